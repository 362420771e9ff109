//! Sandwich variance, Wald intervals and the perturbation bootstrap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, FoldPlan, ScoreKind, ScoreModel};
use crate::error::{Error, Result};
use crate::estimator::{
    resolve_variant, solve_system, EquationSystem, EstimateConfig, Fit, NuisanceValues, Solution,
    SolverConfig, Variant,
};
use crate::nuisance::{refit_nuisances, FoldDiagnostics, NuisanceSet};
use crate::seed;

pub const SCHEMA_VERSION: u32 = 1;

/// Φ⁻¹(p) for the standard normal.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    /// Inverse expected score Jacobian (Ω, or Γ for the combined population).
    pub omega: DMatrix<f64>,
    /// Cross-fitted second moment of the influence function.
    pub v_hat: DMatrix<f64>,
    /// Ω V Ω, the asymptotic covariance of √M (β̂ - β).
    pub sandwich: DMatrix<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn weighted_jacobian_inverse(data: &Dataset, beta: &DVector<f64>, model: &ScoreModel, theta: bool) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if beta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: beta.len() });
    }
    let pi = data.pi();
    let m = data.len() as f64;
    let mut j = DMatrix::zeros(d, d);
    for o in data.observations() {
        let kappa = if theta { 1.0 } else { (1.0 - o.r_f64()) / (1.0 - pi) };
        if kappa != 0.0 {
            j += model.jacobian(&o.x, beta) * (kappa / m);
        }
    }
    let eig = SymmetricEigen::new(symmetrize(&j));
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::SingularMatrix);
    }
    let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(&eig.eigenvectors * inv * eig.eigenvectors.transpose())
}

/// Ω̂ = [M⁻¹ Σ (1-r)/(1-π) ∂s/∂β'(x; β̂)]⁻¹.
pub fn estimate_omega(data: &Dataset, beta: &DVector<f64>, model: &ScoreModel) -> Result<DMatrix<f64>> {
    weighted_jacobian_inverse(data, beta, model, false)
}

/// Γ̂ = [M⁻¹ Σ ∂u/∂θ'(x; θ̂)]⁻¹ over both strata.
pub fn estimate_gamma(data: &Dataset, theta: &DVector<f64>, model: &ScoreModel) -> Result<DMatrix<f64>> {
    weighted_jacobian_inverse(data, theta, model, true)
}

/// Fold-weighted second moment Σ ω φ φ'.
pub fn second_moment(contributions: &[DVector<f64>], weights: &[f64]) -> DMatrix<f64> {
    let d = contributions.first().map_or(0, |c| c.len());
    let mut v = DMatrix::zeros(d, d);
    for (phi, &w) in contributions.iter().zip(weights) {
        v.ger(w, phi, phi, 1.0);
    }
    symmetrize(&v)
}

pub(crate) fn variance_from_system(
    data: &Dataset,
    sys: &EquationSystem,
    beta: &DVector<f64>,
    model: &ScoreModel,
    variant: Variant,
) -> Result<VarianceEstimate> {
    let omega = weighted_jacobian_inverse(data, beta, model, variant.is_theta())?;
    let v_hat = second_moment(&sys.contributions(beta), sys.weights());
    let sandwich = symmetrize(&(&omega * &v_hat * &omega));
    Ok(VarianceEstimate { omega, v_hat, sandwich })
}

/// Sandwich variance at `beta` for the given cross-fitted nuisances.
pub fn sandwich_variance(
    data: &Dataset,
    plan: &FoldPlan,
    nuisances: &[NuisanceSet],
    beta: &DVector<f64>,
    model: &ScoreModel,
    variant: Variant,
) -> Result<VarianceEstimate> {
    let values = NuisanceValues::evaluate(data, plan, nuisances)?;
    let sys = EquationSystem::build(data, plan, &values, model, variant, None)?;
    variance_from_system(data, &sys, beta, model, variant)
}

/// Wald interval for v'β: v'β̂ ± Φ⁻¹(1-α/2) (v'Sv / M)^½.
pub fn confidence_interval(
    beta: &DVector<f64>,
    sandwich: &DMatrix<f64>,
    m: usize,
    v: &DVector<f64>,
    alpha: f64,
) -> Result<(f64, f64)> {
    if v.len() != beta.len() {
        return Err(Error::DimensionMismatch { expected: beta.len(), got: v.len() });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let q = (v.transpose() * sandwich * v)[0];
    let scale = sandwich.amax() * v.norm_squared();
    if q < -1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NegativeVariance(q));
    }
    let centre = v.dot(beta);
    let half = normal_quantile(1.0 - alpha / 2.0) * (q.max(0.0) / m as f64).sqrt();
    Ok((centre - half, centre + half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiEntry {
    pub coord: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub alpha: f64,
    pub z_multiplier: f64,
    pub n: usize,
    #[serde(rename = "N")]
    pub n_unlabeled: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    pub scenario: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    /// Sup-norm of the estimating equation at the returned estimate.
    pub residual: f64,
    pub notes: Vec<String>,
    pub folds: Vec<FoldDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bootstrap: Option<BootstrapSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub schema_version: u32,
    pub estimand: ScoreKind,
    /// Variant requested by the caller.
    pub variant: Variant,
    /// Variant actually computed (differs when ACPs are only on labeled units).
    pub variant_used: Variant,
    pub beta: Vec<f64>,
    /// Estimated covariance of β̂, i.e. the sandwich divided by M.
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub ci: Vec<CiEntry>,
    pub metadata: Metadata,
    pub diagnostics: Diagnostics,
}

impl EstimateResult {
    pub(crate) fn assemble(
        data: &Dataset,
        model: &ScoreModel,
        requested: Variant,
        used: Variant,
        sol: &Solution,
        var: &VarianceEstimate,
        cfg: &EstimateConfig,
    ) -> Result<Self> {
        let d = model.dim();
        let m = data.len();
        let cov = &var.sandwich / m as f64;
        let mut ci = Vec::with_capacity(d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            let (lo, hi) = confidence_interval(&sol.beta, &var.sandwich, m, &e, cfg.alpha)?;
            ci.push(CiEntry { coord: j, lo, hi });
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            estimand: model.kind,
            variant: requested,
            variant_used: used,
            beta: sol.beta.iter().copied().collect(),
            cov: (0..d).map(|i| cov.row(i).iter().copied().collect()).collect(),
            se: (0..d).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
            ci,
            metadata: Metadata {
                alpha: cfg.alpha,
                z_multiplier: normal_quantile(1.0 - cfg.alpha / 2.0),
                n: data.n_labeled(),
                n_unlabeled: data.n_unlabeled(),
                m,
                k: cfg.k,
                seed: cfg.seed,
                scenario: data.scenario().to_string(),
            },
            diagnostics: Diagnostics {
                iterations: sol.iterations,
                residual: sol.residual,
                ..Diagnostics::default()
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapWeights {
    /// Unit-mean exponential.
    Exponential,
    /// All weights one; reproduces the point estimate.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub seed: u64,
    pub levels: (f64, f64),
    pub weights: BootstrapWeights,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            reps: 500,
            seed: 0,
            levels: (0.025, 0.975),
            weights: BootstrapWeights::Exponential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub reps: usize,
    pub failures: usize,
    /// More than 5% of replicates failed.
    pub flagged: bool,
    pub levels: (f64, f64),
    pub intervals: Vec<CiEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub summary: BootstrapSummary,
    /// Successful replicate estimates, in replicate order.
    pub draws: Vec<DVector<f64>>,
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Perturbation bootstrap on an existing fit: each replicate reweights every
/// unit in both the nuisance training losses and the estimating equation.
pub fn bootstrap_fit(
    fit: &Fit,
    data: &Dataset,
    model: &ScoreModel,
    variant: Variant,
    cfg: &EstimateConfig,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if boot.reps < 2 {
        return Err(Error::InvalidConfig("bootstrap needs at least 2 replicates".into()));
    }
    let (used, _) = resolve_variant(data, variant)?;
    let base_sys = EquationSystem::build(data, &fit.plan, &fit.values, model, used, None)?;
    let base = solve_system(&base_sys, &cfg.solver)?;
    let solver = SolverConfig {
        init: Some(base.beta.iter().copied().collect()),
        ..cfg.solver.clone()
    };
    let outcomes: Vec<Result<DVector<f64>>> = (0..boot.reps)
        .into_par_iter()
        .map(|b| {
            let weights: Vec<f64> = match boot.weights {
                BootstrapWeights::Exponential => {
                    let mut rng = seed::rng(boot.seed, &[seed::BOOTSTRAP, b as u64]);
                    (0..data.len()).map(|_| rng.sample(Exp1)).collect()
                }
                BootstrapWeights::Unit => vec![1.0; data.len()],
            };
            let sets = refit_nuisances(data, &fit.plan, &fit.nuisances, &weights)?;
            let values = NuisanceValues::evaluate(data, &fit.plan, &sets)?;
            let sys = EquationSystem::build(data, &fit.plan, &values, model, used, Some(&weights))?;
            Ok(solve_system(&sys, &solver)?.beta)
        })
        .collect();
    let draws: Vec<DVector<f64>> = outcomes.into_iter().filter_map(|r| r.ok()).collect();
    let failures = boot.reps - draws.len();
    if draws.is_empty() {
        return Err(Error::NoConvergence { iterations: cfg.solver.max_iter, residual: f64::NAN });
    }
    let intervals = (0..model.dim())
        .map(|j| {
            let mut col: Vec<f64> = draws.iter().map(|b| b[j]).collect();
            col.sort_by(f64::total_cmp);
            CiEntry {
                coord: j,
                lo: quantile_sorted(&col, boot.levels.0),
                hi: quantile_sorted(&col, boot.levels.1),
            }
        })
        .collect();
    Ok(BootstrapResult {
        summary: BootstrapSummary {
            reps: boot.reps,
            failures,
            flagged: failures as f64 > 0.05 * boot.reps as f64,
            levels: boot.levels,
            intervals,
        },
        draws,
    })
}

/// Perturbation-bootstrap intervals; folds and stacking weights come from the
/// original fit and stay fixed across replicates.
pub fn perturbation_bootstrap(
    data: &Dataset,
    model: &ScoreModel,
    variant: Variant,
    cfg: &EstimateConfig,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult> {
    resolve_variant(data, variant)?;
    let fit = Fit::new(data, model, cfg)?;
    bootstrap_fit(&fit, data, model, variant, cfg, boot)
}
