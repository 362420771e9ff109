//! Observations, datasets and their validation.

mod csvio;
mod folds;
pub(crate) mod score;

pub use csvio::{read_csv, read_csv_path, write_csv, write_csv_path};
pub use folds::{make_folds, FoldPlan};
pub use score::{score_eval, ScoreKind, ScoreModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit: label indicator, optional outcome, covariates and optional ACP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub r: bool,
    pub y: Option<f64>,
    pub x: Vec<f64>,
    pub yhat: Option<f64>,
}

impl Observation {
    pub fn labeled(y: f64, x: Vec<f64>, yhat: Option<f64>) -> Self {
        Self {
            r: true,
            y: Some(y),
            x,
            yhat,
        }
    }

    pub fn unlabeled(x: Vec<f64>, yhat: Option<f64>) -> Self {
        Self {
            r: false,
            y: None,
            x,
            yhat,
        }
    }

    #[inline]
    pub fn r_f64(&self) -> f64 {
        if self.r {
            1.0
        } else {
            0.0
        }
    }
}

/// Layout of the ACP column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// No ACPs.
    I,
    /// ACPs on every unit.
    II,
    /// ACPs on labeled units only.
    III,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        };
        f.write_str(s)
    }
}

/// A row as read from disk, before validation. `r` is kept numeric so that
/// values other than 0/1 can be reported.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub r: f64,
    pub y: Option<f64>,
    pub x: Vec<f64>,
    pub yhat: Option<f64>,
}

/// A validated semi-supervised dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
    p: usize,
    scenario: Scenario,
    n_labeled: usize,
}

impl Dataset {
    /// Validate already-typed observations.
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let p = observations.first().map(|o| o.x.len()).unwrap_or(0);
        let mut n_labeled = 0;
        for (i, o) in observations.iter().enumerate() {
            let row = i + 1;
            if o.x.len() != p {
                return Err(Error::RaggedCovariates {
                    row,
                    expected: p,
                    found: o.x.len(),
                });
            }
            if o.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidRow {
                    row,
                    what: "non-finite covariate".into(),
                });
            }
            match (o.r, o.y) {
                (true, None) => return Err(Error::MissingOutcomeOnLabeled { row }),
                (false, Some(_)) => return Err(Error::OutcomePresentOnUnlabeled { row }),
                (true, Some(y)) if !y.is_finite() => {
                    return Err(Error::InvalidRow {
                        row,
                        what: "non-finite outcome".into(),
                    })
                }
                _ => {}
            }
            if matches!(o.yhat, Some(v) if !v.is_finite()) {
                return Err(Error::InvalidRow {
                    row,
                    what: "non-finite ACP".into(),
                });
            }
            if o.r {
                n_labeled += 1;
            }
        }
        if n_labeled == 0 {
            return Err(Error::EmptyStratum("labeled"));
        }
        if n_labeled == observations.len() {
            return Err(Error::EmptyStratum("unlabeled"));
        }
        let scenario = infer_scenario(&observations)?;
        Ok(Self {
            observations,
            p,
            scenario,
            n_labeled,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    /// n: number of labeled units.
    pub fn n_labeled(&self) -> usize {
        self.n_labeled
    }

    /// N: number of unlabeled units.
    pub fn n_unlabeled(&self) -> usize {
        self.observations.len() - self.n_labeled
    }

    /// M = n + N.
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// π = n / M.
    pub fn pi(&self) -> f64 {
        self.n_labeled as f64 / self.len() as f64
    }

    /// True when every labeled outcome is 0 or 1.
    pub fn binary_outcome(&self) -> bool {
        self.observations
            .iter()
            .filter_map(|o| o.y)
            .all(|y| y == 0.0 || y == 1.0)
    }

    /// Drop ACPs to obtain the Scenario I or III view of a Scenario II dataset.
    pub fn restrict_acp(&self, target: Scenario) -> Result<Dataset> {
        let allowed = match (self.scenario, target) {
            (a, b) if a == b => true,
            (Scenario::II, _) => true,
            (Scenario::III, Scenario::I) => true,
            _ => false,
        };
        if !allowed {
            return Err(Error::InconsistentAcp(format!(
                "cannot derive scenario {target} from scenario {}",
                self.scenario
            )));
        }
        let observations = self
            .observations
            .iter()
            .map(|o| {
                let yhat = match target {
                    Scenario::I => None,
                    Scenario::II => o.yhat,
                    Scenario::III => o.yhat.filter(|_| o.r),
                };
                Observation { yhat, ..o.clone() }
            })
            .collect();
        Ok(Dataset {
            observations,
            scenario: target,
            ..self.clone()
        })
    }
}

fn infer_scenario(obs: &[Observation]) -> Result<Scenario> {
    let lab_with = obs.iter().filter(|o| o.r && o.yhat.is_some()).count();
    let unl_with = obs.iter().filter(|o| !o.r && o.yhat.is_some()).count();
    let n = obs.iter().filter(|o| o.r).count();
    let big_n = obs.len() - n;
    match (lab_with, unl_with) {
        (0, 0) => Ok(Scenario::I),
        (a, b) if a == n && b == big_n => Ok(Scenario::II),
        (a, 0) if a == n => Ok(Scenario::III),
        (a, b) => Err(Error::InconsistentAcp(format!(
            "{a}/{n} labeled and {b}/{big_n} unlabeled units carry an ACP"
        ))),
    }
}

/// Validate raw rows into a [`Dataset`], inferring the scenario.
pub fn validate_dataset(rows: Vec<RawRow>) -> Result<Dataset> {
    let mut observations = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let r = if row.r == 1.0 {
            true
        } else if row.r == 0.0 {
            false
        } else {
            return Err(Error::InvalidRow {
                row: i + 1,
                what: format!("label indicator must be 0 or 1, got {}", row.r),
            });
        };
        observations.push(Observation {
            r,
            y: row.y,
            x: row.x,
            yhat: row.yhat,
        });
    }
    Dataset::new(observations)
}
