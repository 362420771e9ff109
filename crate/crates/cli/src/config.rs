//! TOML configuration for `simulate`.

use acpshift::data::ScoreKind;
use acpshift::estimator::SolverConfig;
use acpshift::nuisance::LearnerConfig;
use acpshift::oracle::{DgpSpec, OutcomeFamily};
use acpshift::simulation::{GridPoint, SimConfig, SimTarget, TRUTH_MC_N};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub family: OutcomeFamily,
    /// mean | linear | logistic
    pub estimand: String,
    pub target: SimTarget,
    pub replications: usize,
    pub k: usize,
    pub fast_mode: bool,
    /// CI level is 1 - ci_alpha.
    pub ci_alpha: f64,
    pub truth_mc_n: usize,
    pub xi: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            family: OutcomeFamily::Linear,
            estimand: "mean".into(),
            target: SimTarget::Beta,
            replications: 500,
            k: 5,
            fast_mode: false,
            ci_alpha: 0.05,
            truth_mc_n: TRUTH_MC_N,
            xi: None,
            eta: None,
        }
    }
}

/// A block of grid points: the Cartesian product of its lists.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    #[serde(default)]
    pub panel: String,
    pub n: OneOrMany<usize>,
    #[serde(rename = "N")]
    pub big_n: OneOrMany<usize>,
    pub alpha: OneOrMany<f64>,
    pub zeta: OneOrMany<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFile {
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub grid: Vec<GridBlock>,
}

/// Text of `simulate --help` describing the file format.
pub const SIM_CONFIG_HELP: &str = "\
Config file (TOML):

  [sim]                      all keys optional
  family = \"linear\"          linear | logistic
  estimand = \"mean\"          mean | linear | logistic
  target = \"beta\"            beta | theta
  replications = 500
  k = 5                      cross-fitting folds
  fast_mode = false          GLM-only nuisances
  ci_alpha = 0.05            CI level is 1 - ci_alpha
  truth_mc_n = 1000000       Monte Carlo size for the true parameter
  xi = [1, 0.5, 0.5, 0.5, 0.5]
  eta = [1, 1, 1, 1, 1]

  [learner]                  learners = [\"glm\", \"knn\", \"tree\"], cv_folds = 5,
                             knn_k = 10, tree_depth = 4, min_leaf = 5,
                             clip_eps = 0.01, fast_mode = false
  [solver]                   max_iter = 100, damping = 0.5,
                             max_halvings = 30, tol = 1e-10

  [[grid]]                   one or more; each is a Cartesian product
  panel = \"n\"                n | N | alpha | zeta, or empty for all panels
  n = [300, 600]             scalar or list
  N = 300
  alpha = 5
  zeta = 0";

impl SimFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: SimFile = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if file.grid.is_empty() {
            return Err(CliError::Validation("config: no [[grid]] entries".into()));
        }
        Ok(file)
    }

    /// Base configuration shared by every grid point; the grid overrides
    /// n, N, alpha and zeta.
    pub fn base(&self, seed: u64) -> Result<SimConfig, CliError> {
        let s = &self.sim;
        let mut spec = DgpSpec::new(0.0, 0.0, s.family)?;
        if let Some(xi) = &s.xi {
            spec.xi = xi.clone();
        }
        if let Some(eta) = &s.eta {
            spec.eta = eta.clone();
        }
        spec.validate()?;
        let model: ScoreKind = s.estimand.parse()?;
        let mut cfg = SimConfig::new(spec, 300, 300, model, seed);
        cfg.target = s.target;
        cfg.replications = s.replications;
        cfg.k = s.k;
        cfg.fast_mode = s.fast_mode;
        cfg.alpha = s.ci_alpha;
        cfg.truth_mc_n = s.truth_mc_n;
        cfg.learner = self.learner.clone();
        cfg.solver = self.solver.clone();
        Ok(cfg)
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for b in &self.grid {
            for &n in &b.n.values() {
                for &big_n in &b.big_n.values() {
                    for &alpha in &b.alpha.values() {
                        for &zeta in &b.zeta.values() {
                            out.push(GridPoint {
                                panel: b.panel.clone(),
                                n,
                                big_n,
                                alpha,
                                zeta,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}
