use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Stratified K-fold partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldPlan {
    /// Build a plan from an explicit assignment. Fold ids must be `< k` and every
    /// fold must be non-empty.
    pub fn from_assignment(k: usize, assignment: Vec<usize>, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::KTooSmall(k));
        }
        let mut sizes = vec![0usize; k];
        for &f in &assignment {
            if f >= k {
                return Err(Error::InvalidConfig(format!("fold id {f} >= {k}")));
            }
            sizes[f] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("empty fold".into()));
        }
        Ok(Self {
            k,
            assignment,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Indices in fold `k`, ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == k)
            .collect()
    }

    /// Indices outside fold `k`, ascending.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != k)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Per-unit weight 1/(K |D_k|), so that summing weighted contributions gives
    /// the average of per-fold means.
    pub fn unit_weights(&self) -> Vec<f64> {
        let sizes = self.fold_sizes();
        self.assignment
            .iter()
            .map(|&f| 1.0 / (self.k as f64 * sizes[f] as f64))
            .collect()
    }

    /// Same partition with fold ids renamed by `perm` (fold `f` becomes `perm[f]`).
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        Self::from_assignment(
            self.k,
            self.assignment.iter().map(|&f| perm[f]).collect(),
            self.seed,
        )
    }
}

/// Stratified random K-fold split: labeled and unlabeled units are shuffled
/// separately and dealt round-robin, so fold sizes differ by at most one within
/// each stratum.
pub fn make_folds(data: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::KTooSmall(k));
    }
    let limit = data.n_labeled().min(data.n_unlabeled());
    if k > limit {
        return Err(Error::KTooLarge { k, limit });
    }
    let mut rng = seed::rng(seed, &[seed::FOLDS]);
    let mut assignment = vec![0usize; data.len()];
    for stratum in [true, false] {
        let mut idx: Vec<usize> = data
            .observations()
            .iter()
            .enumerate()
            .filter(|(_, o)| o.r == stratum)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            assignment[i] = pos % k;
        }
    }
    FoldPlan::from_assignment(k, assignment, seed)
}
