//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each.
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the run; each
//! has a written analysis in the project's decision log. Any other failure
//! exits nonzero.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use acpshift::data::{make_folds, Dataset, FoldPlan, Observation, ScoreKind, ScoreModel};
use acpshift::estimator::{eif_with_acp, eif_without_acp, estimating_equation, solve_beta, SolverConfig, Variant};
use acpshift::inference::normal_quantile;
use acpshift::nuisance::{density_ratio, NuisanceFn, NuisanceSet, RatioSource};
use acpshift::oracle::{analytic_nuisances, oracle_bounds, oracle_bounds_theta, DgpSpec, OracleCache, OutcomeFamily};
use acpshift::simulation::{gen_dataset, run_replications, SimConfig, SimSummary, SimTarget};
use nalgebra::DVector;

const MASTER_SEED: u64 = 20261016;
const REPS: usize = 500;
const KNOWN_RED: &[u32] = &[3, 4, 6];

struct Ctx {
    cache: OracleCache,
    memo: BTreeMap<String, SimSummary>,
}

impl Ctx {
    fn sim(&mut self, alpha: f64, zeta: f64, n: usize, big_n: usize, kind: ScoreKind, family: OutcomeFamily) -> SimSummary {
        let key = format!("{alpha}/{zeta}/{n}/{big_n}/{kind}/{family}");
        if let Some(s) = self.memo.get(&key) {
            return s.clone();
        }
        let spec = DgpSpec::new(alpha, zeta, family).expect("valid spec");
        let mut cfg = SimConfig::new(spec, n, big_n, kind, MASTER_SEED);
        cfg.replications = REPS;
        cfg.fast_mode = true;
        let s = run_replications(&cfg, &self.cache).expect("replication study");
        self.memo.insert(key, s.clone());
        s
    }
}

fn within(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

fn reps_note(s: &SimSummary) -> String {
    format!("{}/{} reps ok{}", s.completed, s.requested, if s.invalid { ", flagged invalid" } else { "" })
}

fn mean_are(ctx: &mut Ctx, alpha: f64, zeta: f64) -> (f64, SimSummary) {
    let s = ctx.sim(alpha, zeta, 300, 300, ScoreKind::MeanTarget, OutcomeFamily::Linear);
    (s.coords[0].are, s)
}

fn c1(ctx: &mut Ctx) -> (bool, String) {
    let (are, s) = mean_are(ctx, 0.0, 0.0);
    (
        within(are, 0.85, 1.15) && !s.invalid,
        format!("ARE {are:.3} (target [0.85, 1.15]); {}", reps_note(&s)),
    )
}

fn c2(ctx: &mut Ctx) -> (bool, String) {
    let (are, s) = mean_are(ctx, 5.0, 1.0);
    (
        within(are, 0.85, 1.15) && !s.invalid,
        format!("ARE {are:.3} (target [0.85, 1.15]); {}", reps_note(&s)),
    )
}

fn c3(ctx: &mut Ctx) -> (bool, String) {
    let (are, s) = mean_are(ctx, 5.0, 0.0);
    let g = ctx.sim(5.0, 0.0, 300, 300, ScoreKind::LinearGlm, OutcomeFamily::Linear);
    let xi1 = g.coords[1].are;
    let ok_mean = within(are, 6.0, 16.0);
    let ok_xi = within(xi1, 5.0, 14.0);
    (
        ok_mean && ok_xi && !s.invalid && !g.invalid,
        format!(
            "mean ARE {are:.2} [6, 16] {}; xi1 ARE {xi1:.2} [5, 14] {} (MSE {:.3}/{:.3}); {}",
            if ok_mean { "ok" } else { "out" },
            if ok_xi { "ok" } else { "out" },
            g.coords[1].mse_without,
            g.coords[1].mse_with,
            reps_note(&g)
        ),
    )
}

fn c4(ctx: &mut Ctx) -> (bool, String) {
    let small = ctx.sim(5.0, 0.0, 300, 300, ScoreKind::MeanTarget, OutcomeFamily::Linear);
    let large = ctx.sim(5.0, 0.0, 300, 1500, ScoreKind::MeanTarget, OutcomeFamily::Linear);
    let factor = small.coords[0].mse_without / large.coords[0].mse_without;
    let with = [small.coords[0].mse_with, large.coords[0].mse_with];
    let ok = within(factor, 2.5, 6.0) && with.iter().all(|&m| within(m, 0.03, 0.12));
    // Same check with the labeled size varying instead, for the record.
    let swapped = ctx.sim(5.0, 0.0, 1500, 300, ScoreKind::MeanTarget, OutcomeFamily::Linear);
    let sf = small.coords[0].mse_without / swapped.coords[0].mse_without;
    (
        ok,
        format!(
            "N 300->1500: without-ACP MSE {:.3}->{:.3}, factor {factor:.2} (target [2.5, 6]); with-ACP MSE {:.3}, {:.3} (target [0.03, 0.12]); with n 300->1500 instead: factor {sf:.2}, with-ACP {:.3}",
            small.coords[0].mse_without, large.coords[0].mse_without, with[0], with[1], swapped.coords[0].mse_with
        ),
    )
}

fn c5(ctx: &mut Ctx) -> (bool, String) {
    let ares: Vec<f64> = (0..=5).map(|a| mean_are(ctx, a as f64, 0.0).0).collect();
    let ok = ares.windows(2).all(|w| w[1] >= 0.85 * w[0]);
    (ok, format!("ARE by alpha 0..5: {:.2?} (each step >= 0.85 x previous)", ares))
}

fn c6(ctx: &mut Ctx) -> (bool, String) {
    let s = ctx.sim(5.0, 0.0, 300, 300, ScoreKind::LogisticGlm, OutcomeFamily::Logistic);
    let c = &s.coords[1];
    let ratio = c.mse_without / c.mse_with;
    (
        within(ratio, 1.4, 3.0) && !s.invalid,
        format!(
            "xi1 MSE ratio {ratio:.2} (target [1.4, 3.0]), MSE {:.3}/{:.3}; {}; first failure: {}",
            c.mse_without,
            c.mse_with,
            reps_note(&s),
            s.failure_messages.first().map_or("none", String::as_str)
        ),
    )
}

fn c7(ctx: &mut Ctx) -> (bool, String) {
    let s = ctx.sim(5.0, 0.0, 900, 900, ScoreKind::MeanTarget, OutcomeFamily::Linear);
    let c = &s.coords[0];
    let ok = within(c.coverage_with, 0.92, 0.975) && within(c.coverage_without, 0.92, 0.975) && c.width_with <= c.width_without;
    (
        ok && !s.invalid,
        format!(
            "coverage with {:.3}, without {:.3} (target [0.92, 0.975]); mean width {:.3} vs {:.3}; {}",
            c.coverage_with,
            c.coverage_without,
            c.width_with,
            c.width_without,
            reps_note(&s)
        ),
    )
}

fn c8(_: &mut Ctx) -> (bool, String) {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for alpha in [0.0, 5.0] {
        for zeta in [0.0, 0.6, 1.0] {
            let spec = DgpSpec::new(alpha, zeta, OutcomeFamily::Linear).expect("valid spec");
            for kind in [ScoreKind::MeanTarget, ScoreKind::LinearGlm] {
                let b = oracle_bounds(&spec, kind, 1_000_000, MASTER_SEED).expect("oracle bounds");
                let consistent = b.consistent_within(4.0);
                let psd = b.gain_min_eigenvalue() >= -4.0 * b.mc_se;
                ok &= consistent && psd;
                if !(consistent && psd) || kind == ScoreKind::MeanTarget {
                    parts.push(format!(
                        "({alpha},{zeta},{kind}) gain {:.1} consistent={consistent} psd={psd}",
                        b.gain[0][0]
                    ));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    (ok, format!("{}; {secs:.0}s", parts.join("; ")))
}

fn c9(_: &mut Ctx) -> (bool, String) {
    let spec = DgpSpec::new(5.0, 0.0, OutcomeFamily::Linear).expect("valid spec");
    let model = ScoreModel::new(ScoreKind::MeanTarget, 5);
    let bounds = oracle_bounds(&spec, ScoreKind::MeanTarget, 1_000_000, MASTER_SEED).expect("oracle bounds");
    let data = gen_dataset(&spec, 4000, 4000, MASTER_SEED).expect("dataset");
    let plan = make_folds(&data, 5, MASTER_SEED).expect("folds");
    let an = analytic_nuisances(&spec).expect("nuisances");
    let se = (bounds.bound_w[0][0] / data.len() as f64).sqrt();
    let beta0 = bounds.beta0[0];
    let zero = || NuisanceFn::constant(0.0);
    let run = |ratio: NuisanceFn, mu: NuisanceFn, mu_t: NuisanceFn| {
        let sets: Vec<NuisanceSet> = (0..plan.k())
            .map(|k| NuisanceSet::new(k, data.pi(), 0.0, RatioSource::Direct(ratio.clone()), mu.clone(), Some(mu_t.clone())))
            .collect();
        let sol = solve_beta(&data, &plan, &sets, &model, Variant::WithAcp, &SolverConfig::default()).expect("solve");
        (sol.beta[0] - beta0).abs() / se
    };
    let a = run(an.w_fn(), zero(), zero());
    let b = run(NuisanceFn::constant(1.0), an.mu_fn(), an.mu_tilde_fn());
    let c = run(NuisanceFn::constant(1.0), zero(), zero());
    (
        a < 5.0 && b < 5.0 && c > 10.0,
        format!("|error|/oracle SE: oracle w + wrong m {a:.2} (< 5), wrong w + oracle m {b:.2} (< 5), both wrong {c:.1} (> 10); SE {se:.4}"),
    )
}

fn c10(_: &mut Ctx) -> (bool, String) {
    let tol = 1e-9;
    let model = ScoreModel::new(ScoreKind::MeanTarget, 1);
    let set = |w: f64, mu: f64, mu_t: f64| {
        NuisanceSet::new(
            0,
            0.5,
            0.01,
            RatioSource::Direct(NuisanceFn::constant(w)),
            NuisanceFn::constant(mu),
            Some(NuisanceFn::constant(mu_t)),
        )
    };
    let zero = DVector::from_element(1, 0.0);
    let lab = Observation::labeled(3.0, vec![0.0], Some(0.0));
    let unl = Observation::unlabeled(vec![0.0], Some(0.0));
    let ns = set(2.0, 0.5, 1.0);
    let got = [
        eif_with_acp(&lab, &ns, &zero, 0.5, &model).unwrap().contribution()[0],
        eif_with_acp(&unl, &ns, &zero, 0.5, &model).unwrap().contribution()[0],
        eif_without_acp(&lab, &ns, &zero, 0.5, &model).unwrap().contribution()[0],
        eif_without_acp(&unl, &ns, &zero, 0.5, &model).unwrap().contribution()[0],
    ];
    let want = [26.0 / 3.0, 5.0 / 3.0, 10.0, 1.0];
    let eif_ok = got.iter().zip(&want).all(|(g, w)| (g - w).abs() < tol);

    let data = Dataset::new(vec![
        Observation::labeled(2.0, vec![0.0], Some(0.0)),
        Observation::labeled(0.0, vec![1.0], Some(0.0)),
        Observation::unlabeled(vec![2.0], Some(0.0)),
        Observation::unlabeled(vec![3.0], Some(0.0)),
    ])
    .unwrap();
    let plan = FoldPlan::from_assignment(2, vec![0, 1, 1, 0], 0).unwrap();
    let mu = [1.0, 0.0, 2.0, 2.0];
    let mu_t = [1.0, 0.0, 1.0, 2.0];
    let sets: Vec<NuisanceSet> = (0..2)
        .map(|k| {
            NuisanceSet::new(
                k,
                0.5,
                0.01,
                RatioSource::Direct(NuisanceFn::constant(1.0)),
                NuisanceFn::fixed(move |x| mu[x[0] as usize]),
                Some(NuisanceFn::fixed(move |z| mu_t[z[0] as usize])),
            )
        })
        .collect();
    let beta = solve_beta(&data, &plan, &sets, &model, Variant::WithAcp, &SolverConfig::default()).unwrap().beta[0];
    let resid = estimating_equation(&data, &plan, &sets, &DVector::from_element(1, 2.25), &model, Variant::WithAcp).unwrap()[0];
    let beta_ok = (beta - 2.25).abs() < tol && resid.abs() < tol;

    let w = density_ratio(0.5, 0.5);
    let prop = NuisanceSet::new(0, 0.3, 0.01, RatioSource::Propensity(NuisanceFn::fixed(|x| 0.2 + 0.1 * x[0])), NuisanceFn::constant(0.0), None);
    let identity_ok = (w - 1.0).abs() < tol
        && (0..5).map(|i| i as f64).all(|x| {
            let lhs = (1.0 - prop.pi_hat(&[x])) / (1.0 - prop.pi());
            (lhs - prop.shrinkage(&[x])).abs() < tol
        });

    let z = normal_quantile(0.975);
    let z_ok = (z - 1.959963984540054).abs() < tol && (z - 1.959964).abs() < 5e-7;
    (
        eif_ok && beta_ok && identity_ok && z_ok,
        format!(
            "EIF {:.4?} vs (8.6667, 1.6667, 10, 1); beta {beta:.12}; w(0.5, 0.5) = {w}; identity {identity_ok}; z {z:.15} (1.959964 to 6 decimals)",
            got
        ),
    )
}

fn c11(ctx: &mut Ctx) -> (bool, String) {
    // No shift: labeling independent of covariates.
    let mut spec = DgpSpec::new(5.0, 0.0, OutcomeFamily::Linear).expect("valid spec");
    spec.eta = vec![0.0; 5];
    let mut cfg = SimConfig::new(spec.clone(), 300, 300, ScoreKind::MeanTarget, MASTER_SEED);
    cfg.target = SimTarget::Theta;
    cfg.fast_mode = true;
    cfg.replications = REPS;
    let s = run_replications(&cfg, &ctx.cache).expect("replications");
    let c = &s.coords[0];
    // Pooled population mean of Y is 1 + ξ'E[X] = 1.
    let pooled = 1.0;
    let n = s.completed as f64;
    let check = |mse: f64, bias: f64| {
        let mean_err = c.truth + bias - pooled;
        let sd = (mse - bias * bias).max(0.0).sqrt();
        (mean_err, sd / n.sqrt())
    };
    let (ew, sw) = check(c.mse_with, c.bias_with);
    let (ewo, swo) = check(c.mse_without, c.bias_without);
    let pooled_ok = ew.abs() <= 3.0 * sw && ewo.abs() <= 3.0 * swo;

    let red = DgpSpec::new(5.0, 1.0, OutcomeFamily::Linear).expect("valid spec");
    let tb = oracle_bounds_theta(&red, ScoreKind::MeanTarget, 1_000_000, MASTER_SEED).expect("bounds");
    let gain_ok = tb.gain[0][0].abs() <= 4.0 * tb.mc_se + 1e-12;
    (
        pooled_ok && gain_ok && !s.invalid,
        format!(
            "mean theta - pooled mean: with {ew:.4} (3 SE = {:.4}), without {ewo:.4} (3 SE = {:.4}); zeta=1 theta gain {:.2e}",
            3.0 * sw,
            3.0 * swo,
            tb.gain[0][0]
        ),
    )
}

type Criterion = fn(&mut Ctx) -> (bool, String);

fn main() -> ExitCode {
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("oracle-cache");
    let mut ctx = Ctx {
        cache: OracleCache::new(dir),
        memo: BTreeMap::new(),
    };
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "no-information null", c1),
        (2, "redundant-ACP null", c2),
        (3, "headline gain", c3),
        (4, "unlabeled-size trend", c4),
        (5, "monotonicity in alpha", c5),
        (6, "logistic gain", c6),
        (7, "CI coverage", c7),
        (8, "oracle consistency", c8),
        (9, "double robustness", c9),
        (10, "formula unit values", c10),
        (11, "theta sanity", c11),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = f(&mut ctx);
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id} ({name}): {detail} [{:.0}s]", start.elapsed().as_secs_f64());
        if !pass && !KNOWN_RED.contains(&id) {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
