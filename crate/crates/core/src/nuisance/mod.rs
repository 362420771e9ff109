//! Cross-fitted nuisance functions: labeling propensity, density ratio and the
//! outcome regressions with and without the ACP, each fit by a small stacking
//! ensemble.

mod glm;
mod knn;
mod stacking;
mod tree;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use glm::Glm;
pub use knn::Knn;
pub use stacking::{fit_stacked, FittedRegressor};
pub use tree::Tree;

use crate::data::{Dataset, FoldPlan, Observation, Scenario};
use crate::error::{Error, Result};
use crate::seed;

/// Outcome type of a regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Squared loss, unbounded predictions.
    Continuous,
    /// Log loss, predictions clipped into [eps, 1 - eps].
    Binary,
}

impl Family {
    /// Binary when every observed outcome is 0 or 1.
    pub fn detect(data: &Dataset) -> Self {
        if data.binary_outcome() {
            Family::Binary
        } else {
            Family::Continuous
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLearner {
    Glm,
    Knn,
    Tree,
}

impl std::fmt::Display for BaseLearner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseLearner::Glm => "glm",
            BaseLearner::Knn => "knn",
            BaseLearner::Tree => "tree",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub learners: Vec<BaseLearner>,
    /// Folds used to build out-of-fold predictions for stacking.
    pub cv_folds: usize,
    pub knn_k: usize,
    pub tree_depth: usize,
    pub min_leaf: usize,
    /// Probability clip for the propensity and binary regressions.
    pub clip_eps: f64,
    /// Use the GLM alone.
    pub fast_mode: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learners: vec![BaseLearner::Glm, BaseLearner::Knn, BaseLearner::Tree],
            cv_folds: 5,
            knn_k: 10,
            tree_depth: 4,
            min_leaf: 5,
            clip_eps: 0.01,
            fast_mode: false,
        }
    }
}

impl LearnerConfig {
    pub fn fast() -> Self {
        Self {
            fast_mode: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps <= 0.1) {
            return Err(Error::InvalidConfig(format!(
                "clip_eps must lie in (0, 0.1], got {}",
                self.clip_eps
            )));
        }
        if self.learners.is_empty() {
            return Err(Error::InvalidConfig("no base learner enabled".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidConfig("cv_folds must be at least 2".into()));
        }
        if self.knn_k == 0 || self.tree_depth == 0 {
            return Err(Error::InvalidConfig("knn_k and tree_depth must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn active_learners(&self) -> Vec<BaseLearner> {
        if self.fast_mode {
            return vec![BaseLearner::Glm];
        }
        let mut out = Vec::new();
        for &l in &self.learners {
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }
}

pub fn clip_probability(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// w = π/(1-π) · (1-π̂)/π̂.
pub fn density_ratio(pi_hat: f64, pi: f64) -> f64 {
    pi / (1.0 - pi) * (1.0 - pi_hat) / pi_hat
}

/// Turn a (clipped) propensity into a density ratio function.
pub fn propensity_to_density_ratio<F>(pi_hat: F, pi: f64) -> impl Fn(&[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    move |x| density_ratio(pi_hat(x), pi)
}

/// A nuisance function: either a fitted stacking regressor or a fixed closure
/// (analytic truth, a deliberately wrong model, a lookup table).
#[derive(Clone)]
pub enum NuisanceFn {
    Fitted(Arc<FittedRegressor>),
    Fixed(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl NuisanceFn {
    pub fn fixed(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        NuisanceFn::Fixed(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        Self::fixed(move |_| c)
    }

    #[inline]
    pub fn eval(&self, features: &[f64]) -> f64 {
        match self {
            NuisanceFn::Fitted(m) => m.predict(features),
            NuisanceFn::Fixed(f) => f(features),
        }
    }

    fn refit(&self, x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Self> {
        match self {
            NuisanceFn::Fitted(m) => Ok(NuisanceFn::Fitted(Arc::new(m.refit(x, y, w)?))),
            NuisanceFn::Fixed(_) => Ok(self.clone()),
        }
    }

    fn diagnostics(&self) -> Option<LearnerDiagnostics> {
        match self {
            NuisanceFn::Fitted(m) => Some(LearnerDiagnostics {
                learners: m.learners().iter().map(ToString::to_string).collect(),
                weights: m.weights().to_vec(),
                cv_loss: m.cv_loss().to_vec(),
                ensemble_cv_loss: m.ensemble_cv_loss(),
            }),
            NuisanceFn::Fixed(_) => None,
        }
    }
}

impl std::fmt::Debug for NuisanceFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NuisanceFn::Fitted(m) => f.debug_tuple("Fitted").field(&m.weights()).finish(),
            NuisanceFn::Fixed(_) => f.write_str("Fixed"),
        }
    }
}

/// Where the density ratio comes from.
#[derive(Debug, Clone)]
pub enum RatioSource {
    /// A propensity model, clipped and mapped through the π identity.
    Propensity(NuisanceFn),
    /// A density ratio given directly; the propensity is recovered by
    /// inverting the identity.
    Direct(NuisanceFn),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerDiagnostics {
    pub learners: Vec<String>,
    pub weights: Vec<f64>,
    pub cv_loss: Vec<f64>,
    pub ensemble_cv_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    pub fold: usize,
    pub propensity: Option<LearnerDiagnostics>,
    pub mu: Option<LearnerDiagnostics>,
    pub mu_tilde: Option<LearnerDiagnostics>,
}

/// Nuisance functions used to evaluate the influence function on one fold.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub fold: usize,
    pi: f64,
    eps: f64,
    ratio: RatioSource,
    mu: NuisanceFn,
    mu_tilde: Option<NuisanceFn>,
}

impl NuisanceSet {
    /// `mu_tilde` takes the covariates with the ACP appended.
    pub fn new(
        fold: usize,
        pi: f64,
        eps: f64,
        ratio: RatioSource,
        mu: NuisanceFn,
        mu_tilde: Option<NuisanceFn>,
    ) -> Self {
        Self {
            fold,
            pi,
            eps,
            ratio,
            mu,
            mu_tilde,
        }
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn pi_hat(&self, x: &[f64]) -> f64 {
        match &self.ratio {
            RatioSource::Propensity(f) => clip_probability(f.eval(x), self.eps),
            RatioSource::Direct(f) => {
                let w = f.eval(x);
                self.pi / (self.pi + (1.0 - self.pi) * w)
            }
        }
    }

    pub fn w_hat(&self, x: &[f64]) -> f64 {
        match &self.ratio {
            RatioSource::Propensity(_) => density_ratio(self.pi_hat(x), self.pi),
            RatioSource::Direct(f) => f.eval(x),
        }
    }

    /// ŵ/(π + (1-π)ŵ), which lies in (0, 1/π).
    pub fn shrinkage(&self, x: &[f64]) -> f64 {
        let w = self.w_hat(x);
        w / (self.pi + (1.0 - self.pi) * w)
    }

    pub fn mu_hat(&self, x: &[f64]) -> f64 {
        self.mu.eval(x)
    }

    pub fn has_acp(&self) -> bool {
        self.mu_tilde.is_some()
    }

    pub fn mu_tilde_hat(&self, x: &[f64], yhat: f64) -> Option<f64> {
        self.mu_tilde.as_ref().map(|f| {
            let mut z = Vec::with_capacity(x.len() + 1);
            z.extend_from_slice(x);
            z.push(yhat);
            f.eval(&z)
        })
    }

    /// Same set with μ̃ replaced by μ (ignoring the ACP).
    pub fn without_acp(&self) -> Self {
        let mu = self.mu.clone();
        Self {
            mu_tilde: Some(NuisanceFn::fixed(move |z: &[f64]| mu.eval(&z[..z.len() - 1]))),
            ..self.clone()
        }
    }

    pub fn diagnostics(&self) -> FoldDiagnostics {
        let propensity = match &self.ratio {
            RatioSource::Propensity(f) | RatioSource::Direct(f) => f.diagnostics(),
        };
        FoldDiagnostics {
            fold: self.fold,
            propensity,
            mu: self.mu.diagnostics(),
            mu_tilde: self.mu_tilde.as_ref().and_then(NuisanceFn::diagnostics),
        }
    }
}

fn features(obs: &[&Observation], with_acp: bool) -> Vec<Vec<f64>> {
    obs.iter()
        .map(|o| {
            let mut f = o.x.clone();
            if with_acp {
                f.push(o.yhat.unwrap_or(f64::NAN));
            }
            f
        })
        .collect()
}

/// Fit π̂(x) = P(R = 1 | x) on units of both strata.
pub fn fit_propensity(train: &[&Observation], cfg: &LearnerConfig, seed: u64) -> Result<FittedRegressor> {
    cfg.validate()?;
    let r: Vec<f64> = train.iter().map(|o| o.r_f64()).collect();
    if r.iter().all(|&v| v == r[0]) {
        return Err(Error::DegenerateLabels);
    }
    fit_stacked(&features(train, false), &r, &vec![1.0; train.len()], Family::Binary, cfg, seed)
}

fn labeled_outcomes(train: &[&Observation]) -> Result<Vec<f64>> {
    train
        .iter()
        .enumerate()
        .map(|(i, o)| match (o.r, o.y) {
            (true, Some(y)) => Ok(y),
            _ => Err(Error::InvalidRow {
                row: i + 1,
                what: "outcome regression needs labeled units with an outcome".into(),
            }),
        })
        .collect()
}

/// Fit μ̂(x) ≈ E(Y | x) on labeled units.
pub fn fit_mu(train: &[&Observation], cfg: &LearnerConfig, family: Family, seed: u64) -> Result<FittedRegressor> {
    cfg.validate()?;
    let y = labeled_outcomes(train)?;
    fit_stacked(&features(train, false), &y, &vec![1.0; y.len()], family, cfg, seed)
}

/// Fit μ̃̂(x, ŷ) ≈ E(Y | x, ŷ) on labeled units carrying an ACP.
pub fn fit_mu_tilde(
    train: &[&Observation],
    cfg: &LearnerConfig,
    family: Family,
    seed: u64,
) -> Result<FittedRegressor> {
    cfg.validate()?;
    if let Some(i) = train.iter().position(|o| o.yhat.is_none()) {
        return Err(Error::MissingAcp(format!("training unit {} has no ACP", i + 1)));
    }
    let y = labeled_outcomes(train)?;
    fit_stacked(&features(train, true), &y, &vec![1.0; y.len()], family, cfg, seed)
}

/// Seed key for fold `k`: its smallest member index, so renaming folds does not
/// change any fit.
fn fold_key(plan: &FoldPlan, k: usize) -> u64 {
    plan.assignment().iter().position(|&f| f == k).unwrap_or(0) as u64
}

const PROPENSITY_TAG: u64 = 0;
const MU_TAG: u64 = 1;
const MU_TILDE_TAG: u64 = 2;

/// Fit one [`NuisanceSet`] per fold on the complement of that fold. The ACP
/// regression is fit only for Scenario II data.
pub fn crossfit_nuisances(
    data: &Dataset,
    plan: &FoldPlan,
    cfg: &LearnerConfig,
    family: Family,
    seed: u64,
) -> Result<Vec<NuisanceSet>> {
    cfg.validate()?;
    let obs = data.observations();
    let pi = data.pi();
    (0..plan.k())
        .into_par_iter()
        .map(|k| {
            let key = fold_key(plan, k);
            let s = |tag| seed::derive(seed, &[seed::NUISANCE, key, tag]);
            let train: Vec<&Observation> = plan.complement(k).into_iter().map(|i| &obs[i]).collect();
            let labeled: Vec<&Observation> = train.iter().copied().filter(|o| o.r).collect();
            let prop = fit_propensity(&train, cfg, s(PROPENSITY_TAG))?;
            let mu = fit_mu(&labeled, cfg, family, s(MU_TAG))?;
            let mu_tilde = if data.scenario() == Scenario::II {
                Some(NuisanceFn::Fitted(Arc::new(fit_mu_tilde(&labeled, cfg, family, s(MU_TILDE_TAG))?)))
            } else {
                None
            };
            Ok(NuisanceSet::new(
                k,
                pi,
                cfg.clip_eps,
                RatioSource::Propensity(NuisanceFn::Fitted(Arc::new(prop))),
                NuisanceFn::Fitted(Arc::new(mu)),
                mu_tilde,
            ))
        })
        .collect()
}

/// Refit every fitted nuisance with per-unit training weights, keeping folds and
/// stacking weights. Fixed functions are passed through unchanged.
pub fn refit_nuisances(
    data: &Dataset,
    plan: &FoldPlan,
    sets: &[NuisanceSet],
    weights: &[f64],
) -> Result<Vec<NuisanceSet>> {
    let obs = data.observations();
    sets.iter()
        .map(|ns| {
            let idx = plan.complement(ns.fold);
            let train: Vec<&Observation> = idx.iter().map(|&i| &obs[i]).collect();
            let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
            let lab: Vec<usize> = (0..train.len()).filter(|&j| train[j].r).collect();
            let lab_obs: Vec<&Observation> = lab.iter().map(|&j| train[j]).collect();
            let lab_w: Vec<f64> = lab.iter().map(|&j| w[j]).collect();
            let y = labeled_outcomes(&lab_obs)?;
            let r: Vec<f64> = train.iter().map(|o| o.r_f64()).collect();
            let ratio = match &ns.ratio {
                RatioSource::Propensity(f) => RatioSource::Propensity(f.refit(&features(&train, false), &r, &w)?),
                RatioSource::Direct(f) => RatioSource::Direct(f.clone()),
            };
            let mu = ns.mu.refit(&features(&lab_obs, false), &y, &lab_w)?;
            let mu_tilde = match &ns.mu_tilde {
                Some(f) => Some(f.refit(&features(&lab_obs, true), &y, &lab_w)?),
                None => None,
            };
            Ok(NuisanceSet { ratio, mu, mu_tilde, ..ns.clone() })
        })
        .collect()
}
