use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use super::glm::Glm;
use super::knn::Knn;
use super::tree::Tree;
use super::{BaseLearner, Family, LearnerConfig};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
enum BaseModel {
    Glm(Glm),
    Knn(Knn),
    Tree(Tree),
    Constant(f64),
}

impl BaseModel {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            BaseModel::Glm(m) => m.predict(x),
            BaseModel::Knn(m) => m.predict(x),
            BaseModel::Tree(m) => m.predict(x),
            BaseModel::Constant(c) => *c,
        }
    }
}

fn fit_base(
    learner: BaseLearner,
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    family: Family,
    cfg: &LearnerConfig,
) -> Result<BaseModel> {
    Ok(match learner {
        BaseLearner::Glm => BaseModel::Glm(Glm::fit(x, y, w, family)?),
        BaseLearner::Knn => BaseModel::Knn(Knn::fit(x, y, w, cfg.knn_k)),
        BaseLearner::Tree => BaseModel::Tree(Tree::fit(x, y, w, cfg.tree_depth, cfg.min_leaf)),
    })
}

fn weighted_mean(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / w.iter().sum::<f64>()
}

fn pointwise_loss(family: Family, eps: f64, y: f64, pred: f64) -> f64 {
    match family {
        Family::Continuous => (y - pred).powi(2),
        Family::Binary => {
            let q = pred.clamp(eps, 1.0 - eps);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        }
    }
}

/// A stacked regressor: base learners combined with simplex weights chosen on
/// out-of-fold predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedRegressor {
    family: Family,
    cfg: LearnerConfig,
    learners: Vec<BaseLearner>,
    weights: Vec<f64>,
    models: Vec<Option<BaseModel>>,
    cv_loss: Vec<f64>,
    ensemble_cv_loss: f64,
}

impl FittedRegressor {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn learners(&self) -> &[BaseLearner] {
        &self.learners
    }

    /// Stacking weights, aligned with [`Self::learners`].
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Out-of-fold loss of each base learner.
    pub fn cv_loss(&self) -> &[f64] {
        &self.cv_loss
    }

    /// Out-of-fold loss of the weighted combination.
    pub fn ensemble_cv_loss(&self) -> f64 {
        self.ensemble_cv_loss
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let raw: f64 = self
            .weights
            .iter()
            .zip(&self.models)
            .filter_map(|(a, m)| m.as_ref().map(|m| a * m.predict(x)))
            .sum();
        match self.family {
            Family::Continuous => raw,
            Family::Binary => raw.clamp(self.cfg.clip_eps, 1.0 - self.cfg.clip_eps),
        }
    }

    /// Refit the base learners on weighted data, keeping the stacking weights
    /// and CV diagnostics of the original fit.
    pub fn refit(&self, x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Self> {
        let models = self
            .learners
            .iter()
            .zip(&self.weights)
            .map(|(&l, &a)| {
                if a > 0.0 {
                    fit_base(l, x, y, w, self.family, &self.cfg).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            models,
            ..self.clone()
        })
    }
}

/// Fit a stacked regressor. `seed` drives the internal V-fold split.
pub fn fit_stacked(
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    family: Family,
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<FittedRegressor> {
    let n = x.len();
    let v = cfg.cv_folds;
    let need = (2 * v).max(20);
    if n < need {
        return Err(Error::TooFewSamples { got: n, need });
    }
    let learners = cfg.active_learners();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::STACKING]));
    let mut cv_fold = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        cv_fold[i] = pos % v;
    }

    let mut oof = DMatrix::<f64>::zeros(n, learners.len());
    for f in 0..v {
        let train: Vec<usize> = (0..n).filter(|&i| cv_fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| cv_fold[i] == f).collect();
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let tw: Vec<f64> = train.iter().map(|&i| w[i]).collect();
        for (j, &l) in learners.iter().enumerate() {
            let model = match fit_base(l, &tx, &ty, &tw, family, cfg) {
                Err(Error::DegenerateLabels) => BaseModel::Constant(weighted_mean(&ty, &tw)),
                other => other?,
            };
            for &i in &test {
                oof[(i, j)] = model.predict(&x[i]);
            }
        }
    }
    if family == Family::Binary {
        oof.apply(|p| *p = p.clamp(cfg.clip_eps, 1.0 - cfg.clip_eps));
    }

    let wsum: f64 = w.iter().sum();
    let loss_of = |pred: &dyn Fn(usize) -> f64| {
        (0..n)
            .map(|i| w[i] * pointwise_loss(family, cfg.clip_eps, y[i], pred(i)))
            .sum::<f64>()
            / wsum
    };
    let cv_loss: Vec<f64> = (0..learners.len()).map(|j| loss_of(&|i| oof[(i, j)])).collect();
    let weights = if learners.len() == 1 {
        vec![1.0]
    } else {
        match family {
            Family::Continuous => simplex_least_squares(&oof, y, w),
            Family::Binary => simplex_log_loss(&oof, y, w),
        }
    };
    let combo = &oof * DVector::from_column_slice(&weights);
    let ensemble_cv_loss = loss_of(&|i| combo[i]);

    let models = learners
        .iter()
        .zip(&weights)
        .map(|(&l, &a)| {
            if a > 0.0 {
                fit_base(l, x, y, w, family, cfg).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    Ok(FittedRegressor {
        family,
        cfg: cfg.clone(),
        learners,
        weights,
        models,
        cv_loss,
        ensemble_cv_loss,
    })
}

/// Exact minimizer of the weighted squared error over the simplex, found by
/// solving the equality-constrained problem on every face.
pub(crate) fn simplex_least_squares(p: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Vec<f64> {
    let l = p.ncols();
    let sse = |a: &[f64]| -> f64 {
        (0..p.nrows())
            .map(|i| {
                let f: f64 = (0..l).map(|j| a[j] * p[(i, j)]).sum();
                w[i] * (y[i] - f).powi(2)
            })
            .sum()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << l) {
        let s: Vec<usize> = (0..l).filter(|j| mask & (1 << j) != 0).collect();
        let k = s.len();
        let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
        let mut rhs = DVector::<f64>::zeros(k + 1);
        for (a, &ja) in s.iter().enumerate() {
            for (b, &jb) in s.iter().enumerate() {
                kkt[(a, b)] = 2.0 * (0..p.nrows()).map(|i| w[i] * p[(i, ja)] * p[(i, jb)]).sum::<f64>();
            }
            rhs[a] = 2.0 * (0..p.nrows()).map(|i| w[i] * p[(i, ja)] * y[i]).sum::<f64>();
            kkt[(a, k)] = 1.0;
            kkt[(k, a)] = 1.0;
        }
        rhs[k] = 1.0;
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().take(k).any(|&v| !v.is_finite() || v < -1e-12) {
            continue;
        }
        let mut a = vec![0.0; l];
        for (idx, &j) in s.iter().enumerate() {
            a[j] = sol[idx].max(0.0);
        }
        let tot: f64 = a.iter().sum();
        a.iter_mut().for_each(|v| *v /= tot);
        let loss = sse(&a);
        if best.as_ref().map_or(true, |(b, _)| loss < *b) {
            best = Some((loss, a));
        }
    }
    best.map(|b| b.1).unwrap_or_else(|| {
        let mut a = vec![0.0; l];
        a[0] = 1.0;
        a
    })
}

/// Euclidean projection onto the probability simplex.
pub(crate) fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut tau = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            tau = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

/// Projected-gradient minimization of the weighted log loss of `p a` over the
/// simplex. Columns of `p` must already lie in (0, 1).
pub(crate) fn simplex_log_loss(p: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Vec<f64> {
    let l = p.ncols();
    let wsum: f64 = w.iter().sum();
    let loss = |a: &[f64]| -> f64 {
        (0..p.nrows())
            .map(|i| {
                let q: f64 = (0..l).map(|j| a[j] * p[(i, j)]).sum();
                -w[i] * (y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / wsum
    };
    let grad = |a: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; l];
        for i in 0..p.nrows() {
            let q: f64 = (0..l).map(|j| a[j] * p[(i, j)]).sum();
            let c = -w[i] * (y[i] / q - (1.0 - y[i]) / (1.0 - q)) / wsum;
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += c * p[(i, j)];
            }
        }
        g
    };
    let mut a = vec![1.0 / l as f64; l];
    let mut f = loss(&a);
    let mut step = 1.0;
    for _ in 0..1000 {
        let g = grad(&a);
        let mut moved = false;
        for _ in 0..50 {
            let cand = project_simplex(&a.iter().zip(&g).map(|(x, d)| x - step * d).collect::<Vec<_>>());
            let fc = loss(&cand);
            if fc <= f {
                let delta = a.iter().zip(&cand).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                a = cand;
                f = fc;
                moved = delta > 1e-12;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn least_squares_picks_exact_mixture() {
        let p = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 1.0, 0.0, 2.0, 4.0, 3.0, 1.0]);
        let a = [0.3, 0.7];
        let y: Vec<f64> = (0..4).map(|i| a[0] * p[(i, 0)] + a[1] * p[(i, 1)]).collect();
        let got = simplex_least_squares(&p, &y, &[1.0; 4]);
        assert!((got[0] - 0.3).abs() < 1e-10 && (got[1] - 0.7).abs() < 1e-10, "{got:?}");
    }

    #[test]
    fn projection_is_idempotent_on_simplex() {
        let v = [0.2, 0.5, 0.3];
        let pr = project_simplex(&v);
        for (a, b) in v.iter().zip(&pr) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn random_problem(seed: u64, n: usize, l: usize) -> (DMatrix<f64>, Vec<f64>) {
        use rand::Rng;
        let mut rng = seed::rng(seed, &[]);
        let p = DMatrix::from_fn(n, l, |_, _| rng.random_range(0.02..0.98));
        let y = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        (p, y)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn stacking_weights_on_simplex(seed in any::<u64>(), l in 1usize..5) {
            let (p, y) = random_problem(seed, 40, l);
            let w = vec![1.0; 40];
            for a in [simplex_least_squares(&p, &y, &w), simplex_log_loss(&p, &y, &w)] {
                prop_assert!(a.iter().all(|&v| v >= 0.0));
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn least_squares_beats_every_vertex(seed in any::<u64>()) {
            let (p, y) = random_problem(seed, 30, 3);
            let w = vec![1.0; 30];
            let a = simplex_least_squares(&p, &y, &w);
            let sse = |a: &[f64]| (0..30).map(|i| (y[i] - (0..3).map(|j| a[j] * p[(i, j)]).sum::<f64>()).powi(2)).sum::<f64>();
            for v in 0..3 {
                let mut e = vec![0.0; 3];
                e[v] = 1.0;
                prop_assert!(sse(&a) <= sse(&e) + 1e-9);
            }
        }
    }
}
