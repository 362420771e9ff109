//! Synthetic data-generating process with known nuisances, and Monte Carlo
//! ground truth for target parameters and efficiency bounds.
//!
//! Covariates are `X ~ N(0, I_p)`. The surrogate feature is
//! `Z = ζ X₁ + √(1-ζ²) E` with independent standard normal `E`, so that
//! `(X, Z)` is jointly normal with unit variances and `corr(X₁, Z) = ζ`; at
//! `ζ = 1` this is exactly `Z = X₁`. The outcome's linear predictor is
//! `1 + ξ'X + αZ`, labeling follows `R ~ Bernoulli(expit(η'X))` and the
//! surrogate prediction handed to estimators is `Z` itself.

mod bounds;
mod cache;
pub mod quadrature;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::score::expit;
use crate::error::{Error, Result};
use crate::nuisance::{Family, NuisanceFn, NuisanceSet, RatioSource};
use crate::seed;

pub use bounds::{
    oracle_bounds, oracle_bounds_theta, true_beta, true_theta, true_theta_mixture, OracleBounds, Target, TrueParameter,
};
pub use cache::{default_cache_dir, OracleCache, CACHE_VERSION};

/// Draws used for the marginal labeling rate.
pub const PI_MC_DRAWS: usize = 10_000_000;
const PI_SEED: u64 = 0x5eed_0f_9a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeFamily {
    Linear,
    Logistic,
}

impl OutcomeFamily {
    pub fn nuisance_family(self) -> Family {
        match self {
            OutcomeFamily::Linear => Family::Continuous,
            OutcomeFamily::Logistic => Family::Binary,
        }
    }
}

impl fmt::Display for OutcomeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutcomeFamily::Linear => "linear",
            OutcomeFamily::Logistic => "logistic",
        })
    }
}

impl FromStr for OutcomeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(OutcomeFamily::Linear),
            "logistic" => Ok(OutcomeFamily::Logistic),
            other => Err(Error::InvalidConfig(format!(
                "unknown outcome family `{other}` (expected linear or logistic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub alpha: f64,
    pub zeta: f64,
    pub family: OutcomeFamily,
    #[serde(default = "default_xi")]
    pub xi: Vec<f64>,
    #[serde(default = "default_eta")]
    pub eta: Vec<f64>,
}

fn default_xi() -> Vec<f64> {
    vec![1.0, 0.5, 0.5, 0.5, 0.5]
}

fn default_eta() -> Vec<f64> {
    vec![1.0; 5]
}

/// One synthetic unit before the outcome is masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub x: Vec<f64>,
    pub z: f64,
    pub y: f64,
    pub r: bool,
}

impl DgpSpec {
    pub fn new(alpha: f64, zeta: f64, family: OutcomeFamily) -> Result<Self> {
        let spec = Self {
            alpha,
            zeta,
            family,
            xi: default_xi(),
            eta: default_eta(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::InvalidConfig(format!("zeta must lie in [0, 1], got {}", self.zeta)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be finite, got {}", self.alpha)));
        }
        if self.xi.is_empty() || self.xi.len() != self.eta.len() {
            return Err(Error::InvalidConfig(format!(
                "xi and eta must be non-empty and of equal length ({} vs {})",
                self.xi.len(),
                self.eta.len()
            )));
        }
        if self.xi.iter().chain(&self.eta).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("xi and eta must be finite".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.xi.len()
    }

    fn base(&self, x: &[f64]) -> f64 {
        1.0 + self.xi.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn selection_index(&self, x: &[f64]) -> f64 {
        self.eta.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn residual_sd(&self) -> f64 {
        (1.0 - self.zeta * self.zeta).max(0.0).sqrt()
    }

    pub fn draw_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> Unit {
        let x: Vec<f64> = (0..self.p()).map(|_| rng.sample(StandardNormal)).collect();
        let e: f64 = rng.sample(StandardNormal);
        let z = self.zeta * x[0] + self.residual_sd() * e;
        let lin = self.base(&x) + self.alpha * z;
        let y = match self.family {
            OutcomeFamily::Linear => lin + rng.sample::<f64, _>(StandardNormal),
            OutcomeFamily::Logistic => {
                if rng.random::<f64>() < expit(lin) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let r = rng.random::<f64>() < expit(self.selection_index(&x));
        Unit { x, z, y, r }
    }
}

/// Marginal labeling rate E[expit(η'X)], by Monte Carlo, memoized per η.
pub fn marginal_label_rate(eta: &[f64]) -> f64 {
    static MEMO: OnceLock<Mutex<HashMap<Vec<u64>, f64>>> = OnceLock::new();
    let key: Vec<u64> = eta.iter().map(|v| v.to_bits()).collect();
    let memo = MEMO.get_or_init(Default::default);
    if let Some(&v) = memo.lock().expect("memo lock").get(&key) {
        return v;
    }
    const CHUNK: usize = 1 << 16;
    let chunks = PI_MC_DRAWS.div_ceil(CHUNK);
    let sums: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(PI_MC_DRAWS - c * CHUNK);
            let mut rng = seed::rng(PI_SEED, &[seed::ORACLE, c as u64]);
            (0..len)
                .map(|_| {
                    let t: f64 = eta.iter().map(|e| e * rng.sample::<f64, _>(StandardNormal)).sum();
                    expit(t)
                })
                .sum()
        })
        .collect();
    let v = sums.iter().sum::<f64>() / PI_MC_DRAWS as f64;
    memo.lock().expect("memo lock").insert(key, v);
    v
}

/// True nuisance functions of a [`DgpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticNuisances {
    spec: DgpSpec,
    pi: f64,
}

pub fn analytic_nuisances(spec: &DgpSpec) -> Result<AnalyticNuisances> {
    spec.validate()?;
    Ok(AnalyticNuisances {
        spec: spec.clone(),
        pi: marginal_label_rate(&spec.eta),
    })
}

impl AnalyticNuisances {
    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    /// Marginal labeling rate in the population.
    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn pi0(&self, x: &[f64]) -> f64 {
        expit(self.spec.selection_index(x))
    }

    /// q(x)/p(x).
    pub fn w0(&self, x: &[f64]) -> f64 {
        let p = self.pi0(x);
        self.pi / (1.0 - self.pi) * (1.0 - p) / p
    }

    pub fn mu0(&self, x: &[f64]) -> f64 {
        let s = &self.spec;
        let center = s.base(x) + s.alpha * s.zeta * x[0];
        let sd = s.alpha * s.residual_sd();
        match s.family {
            OutcomeFamily::Linear => center,
            OutcomeFamily::Logistic if sd == 0.0 => expit(center),
            OutcomeFamily::Logistic => quadrature::gh64().normal_expectation(center, sd, expit),
        }
    }

    pub fn mu_tilde0(&self, x: &[f64], z: f64) -> f64 {
        let s = &self.spec;
        let lin = s.base(x) + s.alpha * z;
        match s.family {
            OutcomeFamily::Linear => lin,
            OutcomeFamily::Logistic => expit(lin),
        }
    }

    /// A nuisance set evaluating the true functions, for a dataset whose
    /// labeled fraction is `pi`.
    pub fn nuisance_set(&self, fold: usize, pi: f64) -> NuisanceSet {
        NuisanceSet::new(fold, pi, 0.0, RatioSource::Direct(self.w_fn()), self.mu_fn(), Some(self.mu_tilde_fn()))
    }

    pub fn w_fn(&self) -> NuisanceFn {
        let me = Arc::new(self.clone());
        NuisanceFn::fixed(move |x| me.w0(x))
    }

    pub fn mu_fn(&self) -> NuisanceFn {
        let me = Arc::new(self.clone());
        NuisanceFn::fixed(move |x| me.mu0(x))
    }

    /// μ̃ on covariates with the surrogate appended.
    pub fn mu_tilde_fn(&self) -> NuisanceFn {
        let me = Arc::new(self.clone());
        NuisanceFn::fixed(move |xz| me.mu_tilde0(&xz[..xz.len() - 1], xz[xz.len() - 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_values() {
        let spec = DgpSpec::new(5.0, 0.0, OutcomeFamily::Linear).unwrap();
        let an = analytic_nuisances(&spec).unwrap();
        let x0 = [0.0; 5];
        assert_eq!(an.pi0(&x0), 0.5);
        assert_eq!(an.mu0(&x0), 1.0);
        assert!((an.pi() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn zeta_bounds() {
        assert!(DgpSpec::new(1.0, 1.2, OutcomeFamily::Linear).is_err());
        assert!(DgpSpec::new(1.0, -0.1, OutcomeFamily::Linear).is_err());
        assert!(DgpSpec::new(1.0, 1.0, OutcomeFamily::Linear).is_ok());
    }

    #[test]
    fn redundant_surrogate_has_equal_regressions() {
        for family in [OutcomeFamily::Linear, OutcomeFamily::Logistic] {
            let spec = DgpSpec::new(5.0, 1.0, family).unwrap();
            let an = analytic_nuisances(&spec).unwrap();
            let mut rng = seed::rng(3, &[]);
            for _ in 0..100 {
                let u = spec.draw_unit(&mut rng);
                assert_eq!(u.z, u.x[0]);
                assert_eq!(an.mu0(&u.x), an.mu_tilde0(&u.x, u.z));
            }
        }
    }

    #[test]
    fn logistic_mu0_matches_simulation() {
        let spec = DgpSpec::new(2.0, 0.5, OutcomeFamily::Logistic).unwrap();
        let an = analytic_nuisances(&spec).unwrap();
        let x = [0.3, -0.2, 0.1, 0.0, 0.4];
        let mut rng = seed::rng(9, &[]);
        let n = 400_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                an.mu_tilde0(&x, 0.5 * x[0] + 0.75f64.sqrt() * e)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - an.mu0(&x)).abs() < 2e-3, "{mean} vs {}", an.mu0(&x));
    }

    #[test]
    fn ratio_identity_holds() {
        let spec = DgpSpec::new(1.0, 0.0, OutcomeFamily::Linear).unwrap();
        let an = analytic_nuisances(&spec).unwrap();
        let ns = an.nuisance_set(0, 0.25);
        let x = [0.5, -1.0, 0.2, 0.0, 0.3];
        let w = ns.w_hat(&x);
        let pi_hat = ns.pi_hat(&x);
        assert!((w - 0.25 / 0.75 * (1.0 - pi_hat) / pi_hat).abs() < 1e-12);
        assert_eq!(ns.mu_tilde_hat(&x, 0.7), Some(an.mu_tilde0(&x, 0.7)));
    }

    #[test]
    fn family_round_trip() {
        for f in [OutcomeFamily::Linear, OutcomeFamily::Logistic] {
            assert_eq!(f.to_string().parse::<OutcomeFamily>().unwrap(), f);
        }
        assert!("probit".parse::<OutcomeFamily>().is_err());
    }
}
