//! Influence functions, the cross-fitted estimating equation and its solver.
//!
//! Every variant's influence function has the form `(ψ - κ g(a'β)) a(x)` where
//! ψ is a pseudo-outcome built from the data and nuisances, and κ is
//! `(1-r)/(1-π)` for the unlabeled-population parameter or 1 for the combined
//! population. The equation is therefore the negative gradient of the convex
//! potential `Σ ω κ G(a'β) - β'c̄` with `G' = g`, which the solver minimizes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Dataset, FoldPlan, Observation, Scenario, ScoreModel};
use crate::error::{Error, Result};
use crate::inference::{self, EstimateResult};
use crate::nuisance::{crossfit_nuisances, Family, LearnerConfig, NuisanceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Unlabeled-population parameter using ACPs.
    WithAcp,
    /// Unlabeled-population parameter ignoring ACPs.
    WithoutAcp,
    /// Combined-population parameter using ACPs.
    #[serde(rename = "theta-with")]
    ThetaWithAcp,
    /// Combined-population parameter ignoring ACPs.
    #[serde(rename = "theta-without")]
    ThetaWithoutAcp,
}

impl Variant {
    pub fn is_theta(self) -> bool {
        matches!(self, Variant::ThetaWithAcp | Variant::ThetaWithoutAcp)
    }

    pub fn uses_acp(self) -> bool {
        matches!(self, Variant::WithAcp | Variant::ThetaWithAcp)
    }

    /// The same target without the ACP.
    pub fn without_acp(self) -> Self {
        if self.is_theta() {
            Variant::ThetaWithoutAcp
        } else {
            Variant::WithoutAcp
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::WithAcp => "with-acp",
            Variant::WithoutAcp => "without-acp",
            Variant::ThetaWithAcp => "theta-with",
            Variant::ThetaWithoutAcp => "theta-without",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with-acp" => Ok(Variant::WithAcp),
            "without-acp" => Ok(Variant::WithoutAcp),
            "theta-with" => Ok(Variant::ThetaWithAcp),
            "theta-without" => Ok(Variant::ThetaWithoutAcp),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

/// One unit's influence-function contribution split into its three parts.
#[derive(Debug, Clone, PartialEq)]
pub struct EifTerms {
    pub labeled_residual: DVector<f64>,
    pub shrinkage: DVector<f64>,
    pub unlabeled_projection: DVector<f64>,
}

impl EifTerms {
    pub fn contribution(&self) -> DVector<f64> {
        &self.labeled_residual + &self.shrinkage + &self.unlabeled_projection
    }
}

fn outcome(obs: &Observation) -> f64 {
    if obs.r {
        obs.y.unwrap_or(f64::NAN)
    } else {
        0.0
    }
}

fn acp_of(obs: &Observation) -> Result<f64> {
    obs.yhat
        .ok_or_else(|| Error::MissingAcp("observation has no ACP value".into()))
}

fn check_dims(obs: &Observation, beta: &DVector<f64>, model: &ScoreModel) -> Result<()> {
    model.check(&obs.x, beta)
}

/// Influence function with ACPs, built from the score and its conditional means.
pub fn eif_with_acp(
    obs: &Observation,
    ns: &NuisanceSet,
    beta: &DVector<f64>,
    pi: f64,
    model: &ScoreModel,
) -> Result<EifTerms> {
    check_dims(obs, beta, model)?;
    let yhat = acp_of(obs)?;
    let mu_t = ns
        .mu_tilde_hat(&obs.x, yhat)
        .ok_or_else(|| Error::MissingAcp("nuisance set has no ACP regression".into()))?;
    let m = model.conditional_score(ns.mu_hat(&obs.x), &obs.x, beta);
    let m_t = model.conditional_score(mu_t, &obs.x, beta);
    let w = ns.w_hat(&obs.x);
    let d = model.dim();
    let labeled_residual = if obs.r {
        (model.score(outcome(obs), &obs.x, beta) - &m_t) * (w / pi)
    } else {
        DVector::zeros(d)
    };
    let shrinkage = (&m_t - &m) * (w / (pi + (1.0 - pi) * w));
    let unlabeled_projection = if obs.r { DVector::zeros(d) } else { m / (1.0 - pi) };
    Ok(EifTerms {
        labeled_residual,
        shrinkage,
        unlabeled_projection,
    })
}

/// Influence function without ACPs.
pub fn eif_without_acp(
    obs: &Observation,
    ns: &NuisanceSet,
    beta: &DVector<f64>,
    pi: f64,
    model: &ScoreModel,
) -> Result<EifTerms> {
    check_dims(obs, beta, model)?;
    let m = model.conditional_score(ns.mu_hat(&obs.x), &obs.x, beta);
    let w = ns.w_hat(&obs.x);
    let d = model.dim();
    let labeled_residual = if obs.r {
        (model.score(outcome(obs), &obs.x, beta) - &m) * (w / pi)
    } else {
        DVector::zeros(d)
    };
    let unlabeled_projection = if obs.r { DVector::zeros(d) } else { m / (1.0 - pi) };
    Ok(EifTerms {
        labeled_residual,
        shrinkage: DVector::zeros(d),
        unlabeled_projection,
    })
}

/// Combined-population influence function `(r/π̂)(u - h) + h`, with `h` built
/// from μ̃ when `with_acp` and from μ otherwise. The shrinkage part is zero.
pub fn eif_theta(
    obs: &Observation,
    ns: &NuisanceSet,
    theta: &DVector<f64>,
    model: &ScoreModel,
    with_acp: bool,
) -> Result<EifTerms> {
    check_dims(obs, theta, model)?;
    let mu = if with_acp {
        ns.mu_tilde_hat(&obs.x, acp_of(obs)?)
            .ok_or_else(|| Error::MissingAcp("nuisance set has no ACP regression".into()))?
    } else {
        ns.mu_hat(&obs.x)
    };
    let h = model.conditional_score(mu, &obs.x, theta);
    let labeled_residual = if obs.r {
        (model.score(outcome(obs), &obs.x, theta) - &h) / ns.pi_hat(&obs.x)
    } else {
        DVector::zeros(model.dim())
    };
    Ok(EifTerms {
        labeled_residual,
        shrinkage: DVector::zeros(model.dim()),
        unlabeled_projection: h,
    })
}

/// Evaluate the influence function of `variant` for one unit.
pub fn eif(
    obs: &Observation,
    ns: &NuisanceSet,
    beta: &DVector<f64>,
    pi: f64,
    model: &ScoreModel,
    variant: Variant,
) -> Result<EifTerms> {
    match variant {
        Variant::WithAcp => eif_with_acp(obs, ns, beta, pi, model),
        Variant::WithoutAcp => eif_without_acp(obs, ns, beta, pi, model),
        Variant::ThetaWithAcp => eif_theta(obs, ns, beta, model, true),
        Variant::ThetaWithoutAcp => eif_theta(obs, ns, beta, model, false),
    }
}

/// Nuisance values at each unit, taken from the set of the unit's own fold.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceValues {
    pub pi_hat: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub shrinkage: Vec<f64>,
    pub mu: Vec<f64>,
    pub mu_tilde: Option<Vec<f64>>,
}

impl NuisanceValues {
    pub fn evaluate(data: &Dataset, plan: &FoldPlan, nuisances: &[NuisanceSet]) -> Result<Self> {
        if nuisances.len() != plan.k() {
            return Err(Error::DimensionMismatch {
                expected: plan.k(),
                got: nuisances.len(),
            });
        }
        let mut by_fold: Vec<Option<&NuisanceSet>> = vec![None; plan.k()];
        for ns in nuisances {
            if ns.fold >= plan.k() {
                return Err(Error::InvalidConfig(format!("nuisance fold {} out of range", ns.fold)));
            }
            by_fold[ns.fold] = Some(ns);
        }
        let sets: Vec<&NuisanceSet> = by_fold
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::InvalidConfig("missing nuisance set for a fold".into())))
            .collect::<Result<_>>()?;
        let obs = data.observations();
        let mut v = NuisanceValues {
            pi_hat: Vec::with_capacity(obs.len()),
            w_hat: Vec::with_capacity(obs.len()),
            shrinkage: Vec::with_capacity(obs.len()),
            mu: Vec::with_capacity(obs.len()),
            mu_tilde: None,
        };
        let with_acp = data.scenario() == Scenario::II && sets.iter().all(|s| s.has_acp());
        let mut mu_t = Vec::new();
        for (i, o) in obs.iter().enumerate() {
            let ns = sets[plan.fold_of(i)];
            v.pi_hat.push(ns.pi_hat(&o.x));
            v.w_hat.push(ns.w_hat(&o.x));
            v.shrinkage.push(ns.shrinkage(&o.x));
            v.mu.push(ns.mu_hat(&o.x));
            if with_acp {
                mu_t.push(ns.mu_tilde_hat(&o.x, acp_of(o)?).unwrap_or(f64::NAN));
            }
        }
        if with_acp {
            v.mu_tilde = Some(mu_t);
        }
        Ok(v)
    }
}

/// The estimating equation of one variant reduced to per-unit scalars.
#[derive(Debug, Clone)]
pub struct EquationSystem {
    model: ScoreModel,
    design: Vec<DVector<f64>>,
    psi: Vec<f64>,
    kappa: Vec<f64>,
    weight: Vec<f64>,
    cbar: DVector<f64>,
}

impl EquationSystem {
    pub fn build(
        data: &Dataset,
        plan: &FoldPlan,
        values: &NuisanceValues,
        model: &ScoreModel,
        variant: Variant,
        unit_weights: Option<&[f64]>,
    ) -> Result<Self> {
        if model.p != data.p() {
            return Err(Error::DimensionMismatch {
                expected: model.p,
                got: data.p(),
            });
        }
        let pi = data.pi();
        let mu_t = if variant.uses_acp() {
            Some(
                values
                    .mu_tilde
                    .as_ref()
                    .ok_or_else(|| Error::MissingAcp(format!("variant {variant} needs ACPs on every unit")))?,
            )
        } else {
            None
        };
        let obs = data.observations();
        let mut weight = plan.unit_weights();
        if let Some(u) = unit_weights {
            for (w, u) in weight.iter_mut().zip(u) {
                *w *= u;
            }
        }
        let mut psi = Vec::with_capacity(obs.len());
        let mut kappa = Vec::with_capacity(obs.len());
        for (i, o) in obs.iter().enumerate() {
            let (r, y) = (o.r_f64(), outcome(o));
            let mu = values.mu[i];
            let (p, k) = match variant {
                Variant::WithAcp => {
                    let mt = mu_t.unwrap()[i];
                    let lab = if o.r { values.w_hat[i] / pi * (y - mt) } else { 0.0 };
                    let k = (1.0 - r) / (1.0 - pi);
                    (lab + values.shrinkage[i] * (mt - mu) + k * mu, k)
                }
                Variant::WithoutAcp => {
                    let lab = if o.r { values.w_hat[i] / pi * (y - mu) } else { 0.0 };
                    let k = (1.0 - r) / (1.0 - pi);
                    (lab + k * mu, k)
                }
                Variant::ThetaWithAcp | Variant::ThetaWithoutAcp => {
                    let h = if variant.uses_acp() { mu_t.unwrap()[i] } else { mu };
                    let lab = if o.r { (y - h) / values.pi_hat[i] } else { 0.0 };
                    (lab + h, 1.0)
                }
            };
            psi.push(p);
            kappa.push(k);
        }
        let design: Vec<DVector<f64>> = obs.iter().map(|o| model.design(&o.x)).collect();
        let mut cbar = DVector::zeros(model.dim());
        for i in 0..obs.len() {
            cbar += &design[i] * (weight[i] * psi[i]);
        }
        Ok(Self {
            model: *model,
            design,
            psi,
            kappa,
            weight,
            cbar,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Per-unit influence-function values at `beta`.
    pub fn contributions(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.psi.len())
            .map(|i| {
                let a = &self.design[i];
                a * (self.psi[i] - self.kappa[i] * self.model.link(a.dot(beta)))
            })
            .collect()
    }

    /// Fold weights 1/(K |D_k|), times any perturbation weights.
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// N(β): fold-averaged mean of the influence function.
    pub fn residual(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut out = self.cbar.clone();
        for i in 0..self.psi.len() {
            let a = &self.design[i];
            out -= a * (self.weight[i] * self.kappa[i] * self.model.link(a.dot(beta)));
        }
        out
    }

    /// ∂N/∂β'.
    pub fn jacobian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for i in 0..self.psi.len() {
            let a = &self.design[i];
            let c = self.weight[i] * self.kappa[i] * self.model.link_deriv(a.dot(beta));
            if c != 0.0 {
                h.ger(c, a, a, 1.0);
            }
        }
        -h
    }

    fn potential(&self, beta: &DVector<f64>) -> f64 {
        let mut f = -beta.dot(&self.cbar);
        for i in 0..self.psi.len() {
            f += self.weight[i] * self.kappa[i] * self.model.link_potential(self.design[i].dot(beta));
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Step shrink factor used when a Newton step does not decrease the potential.
    pub damping: f64,
    pub max_halvings: usize,
    /// Tolerance on the sup-norm of N(β).
    pub tol: f64,
    pub init: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            damping: 0.5,
            max_halvings: 30,
            tol: 1e-10,
            init: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("solver tolerance must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::InvalidConfig("solver damping must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Newton iteration on N(β) = 0 with backtracking on the convex potential; a
/// damped gradient step replaces Newton when the Jacobian is singular.
pub fn solve_system(sys: &EquationSystem, solver: &SolverConfig) -> Result<Solution> {
    solver.validate()?;
    let d = sys.dim();
    let mut beta = match &solver.init {
        Some(b) if b.len() == d => DVector::from_column_slice(b),
        Some(b) => {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: b.len(),
            })
        }
        None => DVector::zeros(d),
    };
    let mut singular = false;
    for it in 0..=solver.max_iter {
        let n = sys.residual(&beta);
        let res = n.amax();
        if !res.is_finite() {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: res,
            });
        }
        if res <= solver.tol {
            return Ok(Solution {
                beta,
                iterations: it,
                residual: res,
            });
        }
        if it == solver.max_iter {
            break;
        }
        let hess = -sys.jacobian(&beta);
        let step = match hess.clone().cholesky() {
            Some(ch) => {
                singular = false;
                ch.solve(&n)
            }
            None => {
                singular = true;
                let scale = hess.amax().max(1.0);
                &n / scale
            }
        };
        let f0 = sys.potential(&beta);
        let slope = step.dot(&n);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=solver.max_halvings {
            let cand = &beta + &step * t;
            let fc = sys.potential(&cand);
            if fc.is_finite() && fc <= f0 - 1e-4 * t * slope {
                beta = cand;
                moved = true;
                break;
            }
            t *= solver.damping;
        }
        if !moved {
            // The potential is flat to machine precision along the step; take
            // the full Newton step if it reduces the residual.
            let cand = &beta + &step;
            if sys.residual(&cand).amax() < res {
                beta = cand;
            } else if singular {
                return Err(Error::SingularJacobian);
            } else {
                return Err(Error::NoConvergence {
                    iterations: it + 1,
                    residual: res,
                });
            }
        }
    }
    if singular {
        return Err(Error::SingularJacobian);
    }
    Err(Error::NoConvergence {
        iterations: solver.max_iter,
        residual: sys.residual(&beta).amax(),
    })
}

/// Cross-fitted estimating equation evaluated at `beta`.
pub fn estimating_equation(
    data: &Dataset,
    plan: &FoldPlan,
    nuisances: &[NuisanceSet],
    beta: &DVector<f64>,
    model: &ScoreModel,
    variant: Variant,
) -> Result<DVector<f64>> {
    if beta.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: beta.len(),
        });
    }
    let values = NuisanceValues::evaluate(data, plan, nuisances)?;
    Ok(EquationSystem::build(data, plan, &values, model, variant, None)?.residual(beta))
}

/// Solve the cross-fitted estimating equation for the given nuisances.
pub fn solve_beta(
    data: &Dataset,
    plan: &FoldPlan,
    nuisances: &[NuisanceSet],
    model: &ScoreModel,
    variant: Variant,
    solver: &SolverConfig,
) -> Result<Solution> {
    let values = NuisanceValues::evaluate(data, plan, nuisances)?;
    let sys = EquationSystem::build(data, plan, &values, model, variant, None)?;
    solve_system(&sys, solver)
}

/// Everything `estimate` needs besides the data and the estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub k: usize,
    pub seed: u64,
    /// CI level is 1 - alpha.
    pub alpha: f64,
    pub learner: LearnerConfig,
    pub solver: SolverConfig,
    /// Outcome family for the regressions; detected from the data when absent.
    pub family: Option<Family>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            alpha: 0.05,
            learner: LearnerConfig::default(),
            solver: SolverConfig::default(),
            family: None,
        }
    }
}

/// Resolve a requested variant against the data layout, returning the variant
/// that will actually run and an optional note.
pub fn resolve_variant(data: &Dataset, variant: Variant) -> Result<(Variant, Option<String>)> {
    if !variant.uses_acp() {
        return Ok((variant, None));
    }
    match data.scenario() {
        Scenario::II => Ok((variant, None)),
        Scenario::III => Ok((
            variant.without_acp(),
            Some(format!(
                "ACPs observed on labeled units only: {variant} has the same efficiency bound as {}, which was used instead",
                variant.without_acp()
            )),
        )),
        Scenario::I => Err(Error::ScenarioMismatch {
            variant: variant.to_string(),
            scenario: Scenario::I.to_string(),
        }),
    }
}

/// Fitted folds and nuisances shared by several variants on one dataset.
pub struct Fit {
    pub plan: FoldPlan,
    pub nuisances: Vec<NuisanceSet>,
    pub values: NuisanceValues,
}

impl Fit {
    pub fn new(data: &Dataset, model: &ScoreModel, cfg: &EstimateConfig) -> Result<Self> {
        if model.p != data.p() {
            return Err(Error::DimensionMismatch {
                expected: model.p,
                got: data.p(),
            });
        }
        if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
        }
        cfg.solver.validate()?;
        let plan = make_folds(data, cfg.k, cfg.seed)?;
        let family = cfg.family.unwrap_or_else(|| Family::detect(data));
        let nuisances = crossfit_nuisances(data, &plan, &cfg.learner, family, cfg.seed)?;
        let values = NuisanceValues::evaluate(data, &plan, &nuisances)?;
        Ok(Self {
            plan,
            nuisances,
            values,
        })
    }

    /// Solve and run inference for one variant on the shared nuisances.
    pub fn estimate(
        &self,
        data: &Dataset,
        model: &ScoreModel,
        variant: Variant,
        cfg: &EstimateConfig,
    ) -> Result<EstimateResult> {
        let (used, note) = resolve_variant(data, variant)?;
        let sys = EquationSystem::build(data, &self.plan, &self.values, model, used, None)?;
        let sol = solve_system(&sys, &cfg.solver)?;
        let var = inference::variance_from_system(data, &sys, &sol.beta, model, used)?;
        let mut res = EstimateResult::assemble(data, model, variant, used, &sol, &var, cfg)?;
        res.diagnostics.folds = self.nuisances.iter().map(NuisanceSet::diagnostics).collect();
        res.diagnostics.notes.extend(note);
        Ok(res)
    }
}

/// Full pipeline: folds, cross-fitted nuisances, solver and Wald inference.
pub fn estimate(
    data: &Dataset,
    model: &ScoreModel,
    variant: Variant,
    cfg: &EstimateConfig,
) -> Result<EstimateResult> {
    resolve_variant(data, variant)?;
    Fit::new(data, model, cfg)?.estimate(data, model, variant, cfg)
}

/// Combined-population parameter.
pub fn estimate_theta(
    data: &Dataset,
    model: &ScoreModel,
    cfg: &EstimateConfig,
    with_acp: bool,
) -> Result<EstimateResult> {
    let v = if with_acp {
        Variant::ThetaWithAcp
    } else {
        Variant::ThetaWithoutAcp
    };
    estimate(data, model, v, cfg)
}
