use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{analytic_nuisances, AnalyticNuisances, DgpSpec, OutcomeFamily};
use crate::data::score::{ScoreKind, ScoreModel};
use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::seed;

const CHUNK: usize = 1 << 14;
const BATCH: usize = 64;
const TAG_TARGET: u64 = 1;
const TAG_BOUNDS: u64 = 2;

/// Which population the parameter is defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The unlabeled population q.
    Beta,
    /// The combined population.
    Theta,
}

/// A Monte Carlo solution of the population estimating equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameter {
    pub value: Vec<f64>,
    pub se: Vec<f64>,
    /// Inverse of the expected score Jacobian at the truth.
    pub omega: Vec<Vec<f64>>,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBounds {
    pub target: Target,
    pub spec: DgpSpec,
    pub model: ScoreKind,
    pub seed: u64,
    /// Marginal labeling rate used in the influence functions.
    pub pi: f64,
    pub beta0: Vec<f64>,
    pub beta0_se: Vec<f64>,
    /// Second moments of the influence-function numerators.
    pub v_w: Vec<Vec<f64>>,
    pub v_wo: Vec<Vec<f64>>,
    /// Ω for β, Γ for θ.
    pub omega: Vec<Vec<f64>>,
    /// Closed-form efficiency gain, sandwiched by `omega`.
    pub gain: Vec<Vec<f64>>,
    pub gain_se: Vec<Vec<f64>>,
    /// `omega V omega` with and without the surrogate.
    pub bound_w: Vec<Vec<f64>>,
    pub bound_wo: Vec<Vec<f64>>,
    /// Per-unit average of `omega (φ_wo⊗² - φ_w⊗² - gain integrand) omega`,
    /// which is zero in expectation.
    pub consistency_gap: Vec<Vec<f64>>,
    pub consistency_se: Vec<Vec<f64>>,
    /// Sample mean of the with-surrogate influence function and its SE.
    pub eif_mean: Vec<f64>,
    pub eif_mean_se: Vec<f64>,
    pub mc_samples: usize,
    /// Largest entrywise Monte Carlo SE of the gain and the consistency gap.
    pub mc_se: f64,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, rows.first().map_or(0, Vec::len), |i, j| rows[i][j])
}

impl OracleBounds {
    pub fn gain_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.gain)
    }

    pub fn gain_min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.gain_matrix()).eigenvalues.min()
    }

    /// `omega (V_wo - V_w) omega`.
    pub fn bound_difference(&self) -> DMatrix<f64> {
        from_rows(&self.bound_wo) - from_rows(&self.bound_w)
    }

    /// Every entry of the consistency gap lies within `k` SEs of zero, up to
    /// rounding relative to the size of the bounds.
    pub fn consistent_within(&self, k: f64) -> bool {
        let floor = 1e-10 * self.bound_wo.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        self.consistency_gap
            .iter()
            .flatten()
            .zip(self.consistency_se.iter().flatten())
            .all(|(g, s)| g.abs() <= k * s + floor)
    }

    /// Efficiency bound attainable in a given data layout: without a usable
    /// surrogate on both strata the bound is the one that ignores it.
    pub fn bound_for(&self, scenario: Scenario) -> DMatrix<f64> {
        match scenario {
            Scenario::II => from_rows(&self.bound_w),
            Scenario::I | Scenario::III => from_rows(&self.bound_wo),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Keep {
    All,
    Labeled,
    Unlabeled,
}

/// Draw units chunk by chunk until `count` are kept, returning `(x, μ₀(x))`
/// rows flattened with stride p+1.
fn collect_units(an: &AnalyticNuisances, count: usize, seed: u64, keep: Keep) -> Vec<f64> {
    let spec = an.spec();
    let stride = spec.p() + 1;
    let mut out = Vec::with_capacity(count * stride);
    let mut next = 0u64;
    while out.len() < count * stride {
        let batch: Vec<Vec<f64>> = (next..next + BATCH as u64)
            .into_par_iter()
            .map(|c| {
                let mut rng = seed::rng(seed, &[seed::ORACLE, TAG_TARGET, keep as u64, c]);
                let mut buf = Vec::with_capacity(CHUNK * stride);
                for _ in 0..CHUNK {
                    let u = spec.draw_unit(&mut rng);
                    let kept = match keep {
                        Keep::All => true,
                        Keep::Labeled => u.r,
                        Keep::Unlabeled => !u.r,
                    };
                    if !kept {
                        continue;
                    }
                    buf.extend_from_slice(&u.x);
                    buf.push(an.mu0(&u.x));
                }
                buf
            })
            .collect();
        next += BATCH as u64;
        for b in batch {
            out.extend(b);
        }
    }
    out.truncate(count * stride);
    out
}

struct Moments {
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    /// Variance of `grad` as a Monte Carlo average.
    grad_var: DMatrix<f64>,
    potential: f64,
}

/// Weighted sum over pools of per-pool averages.
fn moments(pools: &[(Vec<f64>, f64)], stride: usize, model: &ScoreModel, beta: &DVector<f64>) -> Moments {
    let d = model.dim();
    let mut total = Moments {
        grad: DVector::zeros(d),
        hess: DMatrix::zeros(d, d),
        grad_var: DMatrix::zeros(d, d),
        potential: 0.0,
    };
    for (units, weight) in pools {
        let parts: Vec<(DVector<f64>, DMatrix<f64>, DMatrix<f64>, f64)> = units
            .par_chunks(CHUNK * stride)
            .map(|chunk| {
                let mut grad = DVector::zeros(d);
                let mut hess = DMatrix::zeros(d, d);
                let mut outer = DMatrix::zeros(d, d);
                let mut potential = 0.0;
                for row in chunk.chunks_exact(stride) {
                    let (x, mu) = row.split_at(stride - 1);
                    let a = model.design(x);
                    let t = a.dot(beta);
                    let resid = mu[0] - model.link(t);
                    grad.axpy(resid, &a, 1.0);
                    hess.ger(model.link_deriv(t), &a, &a, 1.0);
                    outer.ger(resid * resid, &a, &a, 1.0);
                    potential += model.link_potential(t) - mu[0] * t;
                }
                (grad, hess, outer, potential)
            })
            .collect();
        let n = (units.len() / stride) as f64;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        let mut outer = DMatrix::zeros(d, d);
        let mut potential = 0.0;
        for (g, h, o, p) in parts {
            grad += g;
            hess += h;
            outer += o;
            potential += p;
        }
        grad /= n;
        let centered = outer / n - &grad * grad.transpose();
        total.grad += grad * *weight;
        total.hess += hess * (*weight / n);
        total.grad_var += centered * (weight * weight / n);
        total.potential += potential * weight / n;
    }
    total
}

fn solve_population(an: &AnalyticNuisances, kind: ScoreKind, mc_n: usize, seed: u64, mix: Mix) -> Result<TrueParameter> {
    if mc_n < 2 {
        return Err(Error::TooFewSamples { got: mc_n, need: 2 });
    }
    let model = ScoreModel::new(kind, an.spec().p());
    let stride = model.p + 1;
    let pools: Vec<(Vec<f64>, f64)> = match mix {
        Mix::Unlabeled => vec![(collect_units(an, mc_n, seed, Keep::Unlabeled), 1.0)],
        Mix::Population => vec![(collect_units(an, mc_n, seed, Keep::All), 1.0)],
        Mix::Labeled(pi) => vec![
            (collect_units(an, mc_n, seed, Keep::Labeled), pi),
            (collect_units(an, mc_n, seed, Keep::Unlabeled), 1.0 - pi),
        ],
    };
    let mut beta = DVector::zeros(model.dim());
    let mut m = moments(&pools, stride, &model, &beta);
    let mut converged = false;
    for _ in 0..100 {
        let step = m.hess.clone().cholesky().ok_or(Error::SingularJacobian)?.solve(&m.grad);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let mc = moments(&pools, stride, &model, &cand);
            if mc.potential <= m.potential + 1e-12 * m.potential.abs() {
                next = Some((cand, mc));
                break;
            }
            t *= 0.5;
        }
        let Some((b, mc)) = next else { break };
        beta = b;
        m = mc;
        if m.grad.amax() < 1e-12 || step.amax() * t < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged && m.grad.amax() > 1e-8 {
        return Err(Error::NoConvergence {
            iterations: 100,
            residual: m.grad.amax(),
        });
    }
    let omega = -m.hess.clone().try_inverse().ok_or(Error::SingularMatrix)?;
    let cov = &omega * &m.grad_var * &omega;
    Ok(TrueParameter {
        value: beta.iter().copied().collect(),
        se: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        omega: to_rows(&omega),
        mc_samples: mc_n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mix {
    Unlabeled,
    Population,
    /// Mixture putting mass `pi` on the labeled population.
    Labeled(f64),
}

/// β₀ on the unlabeled population: units are drawn from the DGP and kept when
/// unlabeled, then the estimating equation is solved with `Y` replaced by
/// μ₀(x), which removes outcome noise from the Monte Carlo error.
pub fn true_beta(spec: &DgpSpec, kind: ScoreKind, mc_n: usize, seed: u64) -> Result<TrueParameter> {
    let an = analytic_nuisances(spec)?;
    solve_population(&an, kind, mc_n, seed, Mix::Unlabeled)
}

/// θ₀ on the combined population, in which units are labeled at the
/// population rate.
pub fn true_theta(spec: &DgpSpec, kind: ScoreKind, mc_n: usize, seed: u64) -> Result<TrueParameter> {
    let an = analytic_nuisances(spec)?;
    solve_population(&an, kind, mc_n, seed, Mix::Population)
}

/// θ₀ on the mixture `pi·p + (1-pi)·q`, the combined population of a sample
/// holding a fixed fraction `pi` of labeled units. Uses `mc_n` draws from each
/// stratum.
pub fn true_theta_mixture(spec: &DgpSpec, kind: ScoreKind, pi: f64, mc_n: usize, seed: u64) -> Result<TrueParameter> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::InvalidConfig(format!("mixture weight must lie in [0, 1], got {pi}")));
    }
    let an = analytic_nuisances(spec)?;
    solve_population(&an, kind, mc_n, seed, Mix::Labeled(pi))
}

#[derive(Clone)]
struct Acc {
    eif: DVector<f64>,
    eif_sq: DVector<f64>,
    v_w: DMatrix<f64>,
    v_wo: DMatrix<f64>,
    gain: DMatrix<f64>,
    gain_sq: DMatrix<f64>,
    gap: DMatrix<f64>,
    gap_sq: DMatrix<f64>,
}

impl Acc {
    fn zeros(d: usize) -> Self {
        Self {
            eif: DVector::zeros(d),
            eif_sq: DVector::zeros(d),
            v_w: DMatrix::zeros(d, d),
            v_wo: DMatrix::zeros(d, d),
            gain: DMatrix::zeros(d, d),
            gain_sq: DMatrix::zeros(d, d),
            gap: DMatrix::zeros(d, d),
            gap_sq: DMatrix::zeros(d, d),
        }
    }

    fn add(&mut self, o: &Acc) {
        self.eif += &o.eif;
        self.eif_sq += &o.eif_sq;
        self.v_w += &o.v_w;
        self.v_wo += &o.v_wo;
        self.gain += &o.gain;
        self.gain_sq += &o.gain_sq;
        self.gap += &o.gap;
        self.gap_sq += &o.gap_sq;
    }
}

fn mean_and_se(sum: &DMatrix<f64>, sum_sq: &DMatrix<f64>, n: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mean = sum / n;
    let se = DMatrix::from_fn(sum.nrows(), sum.ncols(), |i, j| {
        let var = (sum_sq[(i, j)] / n - mean[(i, j)].powi(2)).max(0.0) * n / (n - 1.0);
        (var / n).sqrt()
    });
    (mean, se)
}

fn bounds(spec: &DgpSpec, kind: ScoreKind, mc_n: usize, seed: u64, target: Target) -> Result<OracleBounds> {
    let an = analytic_nuisances(spec)?;
    let mix = match target {
        Target::Beta => Mix::Unlabeled,
        Target::Theta => Mix::Population,
    };
    let truth = solve_population(&an, kind, mc_n, seed, mix)?;
    let model = ScoreModel::new(kind, spec.p());
    let d = model.dim();
    let beta = DVector::from_vec(truth.value.clone());
    let omega = from_rows(&truth.omega);
    let pi = an.pi();

    let chunks = mc_n.div_ceil(CHUNK);
    let parts: Vec<Acc> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(mc_n - c * CHUNK);
            let mut rng = seed::rng(seed, &[seed::ORACLE, TAG_BOUNDS, c as u64]);
            let mut acc = Acc::zeros(d);
            for _ in 0..len {
                let u = spec.draw_unit(&mut rng);
                let a = model.design(&u.x);
                let g = model.link(a.dot(&beta));
                let mu = an.mu0(&u.x);
                let mu_t = an.mu_tilde0(&u.x, u.z);
                let r = if u.r { 1.0 } else { 0.0 };
                let p0 = an.pi0(&u.x);
                let v = match spec.family {
                    OutcomeFamily::Linear => 1.0,
                    OutcomeFamily::Logistic => mu_t * (1.0 - mu_t),
                };
                let aa = &a * a.transpose() * v;
                let m = &a * (mu - g);
                let mt = &a * (mu_t - g);
                let diff = &mt - &m;
                let dd = &diff * diff.transpose();
                // Realized influence function, for the zero-mean check.
                let s = &a * (u.y - g);
                // Conditional second moments given (x, z), integrating out R and Y.
                let (phi_w, vw, vwo, k) = match target {
                    Target::Beta => {
                        let w = an.w0(&u.x);
                        let c = w / (pi + (1.0 - pi) * w);
                        let lab = w / pi;
                        let unl = 1.0 / (1.0 - pi);
                        let phi_w = (&s - &mt) * (r * lab) + &diff * c + &m * ((1.0 - r) * unl);
                        let off = &diff * c + &m * unl;
                        let vw = (&aa * (lab * lab) + &dd * (c * c)) * p0 + &off * off.transpose() * (1.0 - p0);
                        let vwo = (&aa + &dd) * (lab * lab * p0) + &m * m.transpose() * (unl * unl * (1.0 - p0));
                        (phi_w, vw, vwo, (1.0 - p0).powi(3) / p0 / (1.0 - pi).powi(2))
                    }
                    Target::Theta => {
                        let phi_w = (&s - &mt) * (r / p0) + &mt;
                        let vw = &aa / p0 + &mt * mt.transpose();
                        let lab = &diff / p0 + &m;
                        let vwo = &aa / p0 + &lab * lab.transpose() * p0 + &m * m.transpose() * (1.0 - p0);
                        (phi_w, vw, vwo, (1.0 - p0) / p0)
                    }
                };
                let g_unit = &dd * k;
                let gain_s = &omega * &g_unit * &omega;
                let gap_s = &omega * (&vwo - &vw - &g_unit) * &omega;
                acc.eif += &phi_w;
                acc.eif_sq += phi_w.component_mul(&phi_w);
                acc.v_w += vw;
                acc.v_wo += vwo;
                acc.gain_sq += gain_s.component_mul(&gain_s);
                acc.gain += gain_s;
                acc.gap_sq += gap_s.component_mul(&gap_s);
                acc.gap += gap_s;
            }
            acc
        })
        .collect();
    let mut acc = Acc::zeros(d);
    for p in &parts {
        acc.add(p);
    }
    let n = mc_n as f64;
    let v_w = &acc.v_w / n;
    let v_wo = &acc.v_wo / n;
    let (gain, gain_se) = mean_and_se(&acc.gain, &acc.gain_sq, n);
    let (gap, gap_se) = mean_and_se(&acc.gap, &acc.gap_sq, n);
    let eif = DMatrix::from_column_slice(d, 1, acc.eif.as_slice());
    let eif_sq = DMatrix::from_column_slice(d, 1, acc.eif_sq.as_slice());
    let (eif_mean, eif_se) = mean_and_se(&eif, &eif_sq, n);
    let gain = (&gain + gain.transpose()) * 0.5;
    let mc_se = gain_se.iter().chain(gap_se.iter()).fold(0.0f64, |a, &b| a.max(b));
    Ok(OracleBounds {
        target,
        spec: spec.clone(),
        model: kind,
        seed,
        pi,
        beta0: truth.value,
        beta0_se: truth.se,
        bound_w: to_rows(&(&omega * &v_w * &omega)),
        bound_wo: to_rows(&(&omega * &v_wo * &omega)),
        v_w: to_rows(&v_w),
        v_wo: to_rows(&v_wo),
        omega: truth.omega,
        gain: to_rows(&gain),
        gain_se: to_rows(&gain_se),
        consistency_gap: to_rows(&gap),
        consistency_se: to_rows(&gap_se),
        eif_mean: eif_mean.iter().copied().collect(),
        eif_mean_se: eif_se.iter().copied().collect(),
        mc_samples: mc_n,
        mc_se,
    })
}

/// Efficiency bounds for β with and without the surrogate, and the
/// closed-form gain, under the DGP's true nuisances.
pub fn oracle_bounds(spec: &DgpSpec, kind: ScoreKind, mc_n: usize, seed: u64) -> Result<OracleBounds> {
    bounds(spec, kind, mc_n, seed, Target::Beta)
}

/// Combined-population analog of [`oracle_bounds`].
pub fn oracle_bounds_theta(spec: &DgpSpec, kind: ScoreKind, mc_n: usize, seed: u64) -> Result<OracleBounds> {
    bounds(spec, kind, mc_n, seed, Target::Theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correctly_specified_slopes_recover_xi() {
        let spec = DgpSpec::new(0.0, 0.0, OutcomeFamily::Linear).unwrap();
        let b = true_beta(&spec, ScoreKind::LinearGlm, 200_000, 1).unwrap();
        assert!((b.value[0] - 1.0).abs() < 1e-9, "{:?}", b.value);
        for (v, x) in b.value[1..].iter().zip(&spec.xi) {
            assert!((v - x).abs() < 1e-9);
        }
    }

    #[test]
    fn redundant_surrogate_gives_zero_gain() {
        let spec = DgpSpec::new(5.0, 1.0, OutcomeFamily::Linear).unwrap();
        let b = oracle_bounds(&spec, ScoreKind::MeanTarget, 50_000, 2).unwrap();
        assert_eq!(b.gain[0][0], 0.0);
        assert!(b.bound_difference()[(0, 0)].abs() < 1e-9 * b.bound_wo[0][0]);
        assert!(b.consistent_within(4.0));
    }

    #[test]
    fn two_routes_agree() {
        let spec = DgpSpec::new(5.0, 0.0, OutcomeFamily::Linear).unwrap();
        let b = oracle_bounds(&spec, ScoreKind::MeanTarget, 200_000, 3).unwrap();
        assert!(b.consistent_within(4.0), "{:?} {:?}", b.consistency_gap, b.consistency_se);
        let diff = b.bound_difference()[(0, 0)];
        assert!((diff - b.gain[0][0]).abs() <= 4.0 * b.consistency_se[0][0]);
        assert!(b.gain[0][0] > 1.0);
    }

    #[test]
    fn mixture_at_population_rate_matches_theta() {
        let spec = DgpSpec::new(3.0, 0.2, OutcomeFamily::Linear).unwrap();
        let a = true_theta(&spec, ScoreKind::MeanTarget, 400_000, 8).unwrap();
        let b = true_theta_mixture(&spec, ScoreKind::MeanTarget, 0.5, 400_000, 8).unwrap();
        let tol = 4.0 * (a.se[0].powi(2) + b.se[0].powi(2)).sqrt();
        assert!((a.value[0] - b.value[0]).abs() < tol, "{:?} {:?}", a, b);
        // All mass on one stratum reproduces the unlabeled-population target.
        let q = true_theta_mixture(&spec, ScoreKind::MeanTarget, 0.0, 400_000, 8).unwrap();
        let beta = true_beta(&spec, ScoreKind::MeanTarget, 400_000, 8).unwrap();
        assert_eq!(q.value, beta.value);
    }

    #[test]
    fn mc_is_deterministic() {
        let spec = DgpSpec::new(1.0, 0.3, OutcomeFamily::Logistic).unwrap();
        let a = oracle_bounds_theta(&spec, ScoreKind::LogisticGlm, 20_000, 4).unwrap();
        let b = oracle_bounds_theta(&spec, ScoreKind::LogisticGlm, 20_000, 4).unwrap();
        assert_eq!(a, b);
    }
}
