//! Replication studies on the synthetic data-generating process.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation, ScoreKind, ScoreModel};
use crate::error::{Error, Result};
use crate::estimator::{EstimateConfig, Fit, SolverConfig, Variant};
use crate::inference::EstimateResult;
use crate::nuisance::LearnerConfig;
use crate::oracle::{true_theta_mixture, DgpSpec, OracleCache, Target, TrueParameter};
use crate::seed;

/// Draws used for the true parameter in replication studies.
pub const TRUTH_MC_N: usize = 1_000_000;
const TRUTH_SEED: u64 = 0x7ac0_0001;
/// Replications below this count are flagged.
pub const LOW_REPLICATION: usize = 100;
/// Failure fraction above which a summary is invalid.
pub const MAX_FAILURE_RATE: f64 = 0.02;

/// Exactly `n` labeled and `big_n` unlabeled units, drawn in sequence from the
/// DGP and kept while their stratum is not yet full. The surrogate is `Z`.
pub fn gen_dataset(spec: &DgpSpec, n: usize, big_n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 || big_n == 0 {
        return Err(Error::InvalidConfig("both strata need at least one unit".into()));
    }
    let mut rng = seed::rng(seed, &[seed::DATASET]);
    let mut obs = Vec::with_capacity(n + big_n);
    let (mut lab, mut unl) = (0, 0);
    while lab < n || unl < big_n {
        let u = spec.draw_unit(&mut rng);
        if u.r && lab < n {
            obs.push(Observation::labeled(u.y, u.x, Some(u.z)));
            lab += 1;
        } else if !u.r && unl < big_n {
            obs.push(Observation::unlabeled(u.x, Some(u.z)));
            unl += 1;
        }
    }
    Dataset::new(obs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub spec: DgpSpec,
    pub n: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub model: ScoreKind,
    #[serde(default)]
    pub target: SimTarget,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub seed: u64,
    #[serde(default)]
    pub fast_mode: bool,
    /// CI level is 1 - alpha.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_truth_mc")]
    pub truth_mc_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimTarget {
    #[default]
    Beta,
    Theta,
}

fn default_reps() -> usize {
    500
}
fn default_k() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.05
}
fn default_truth_mc() -> usize {
    TRUTH_MC_N
}

impl SimConfig {
    pub fn new(spec: DgpSpec, n: usize, big_n: usize, model: ScoreKind, seed: u64) -> Self {
        Self {
            spec,
            n,
            big_n,
            model,
            target: SimTarget::Beta,
            replications: default_reps(),
            k: default_k(),
            learner: LearnerConfig::default(),
            solver: SolverConfig::default(),
            seed,
            fast_mode: false,
            alpha: default_alpha(),
            truth_mc_n: TRUTH_MC_N,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.n < 50 || self.big_n < 50 {
            return Err(Error::InvalidConfig(format!(
                "n and N must be at least 50, got n={} N={}",
                self.n, self.big_n
            )));
        }
        if self.replications < 2 {
            return Err(Error::InvalidConfig("replications must be at least 2".into()));
        }
        self.learner.validate()?;
        self.solver.validate()
    }

    fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            fast_mode: self.fast_mode || self.learner.fast_mode,
            ..self.learner.clone()
        }
    }

    fn variants(&self) -> (Variant, Variant) {
        match self.target {
            SimTarget::Beta => (Variant::WithAcp, Variant::WithoutAcp),
            SimTarget::Theta => (Variant::ThetaWithAcp, Variant::ThetaWithoutAcp),
        }
    }

    /// Estimator configuration for replication `r`.
    pub fn estimate_config(&self, r: usize) -> EstimateConfig {
        EstimateConfig {
            k: self.k,
            seed: seed::derive(self.seed, &[seed::REPLICATION, r as u64, 1]),
            alpha: self.alpha,
            learner: self.learner_config(),
            solver: self.solver.clone(),
            family: Some(self.spec.family.nuisance_family()),
        }
    }

    /// Dataset of replication `r`; depends only on the master seed and `r`.
    pub fn dataset(&self, r: usize) -> Result<Dataset> {
        gen_dataset(&self.spec, self.n, self.big_n, seed::derive(self.seed, &[seed::REPLICATION, r as u64]))
    }

    /// True parameter for this configuration, from the oracle cache.
    pub fn truth(&self, cache: &OracleCache) -> Result<TrueParameter> {
        match self.target {
            SimTarget::Beta => Ok(cache.truth(&self.spec, self.model, self.truth_mc_n, TRUTH_SEED, Target::Beta)?.0),
            SimTarget::Theta => {
                let pi = self.n as f64 / (self.n + self.big_n) as f64;
                true_theta_mixture(&self.spec, self.model, pi, self.truth_mc_n, TRUTH_SEED)
            }
        }
    }
}

/// Estimates from one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub index: usize,
    pub with_acp: Vec<f64>,
    pub without_acp: Vec<f64>,
    pub ci_with: Vec<(f64, f64)>,
    pub ci_without: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordSummary {
    pub coord: usize,
    pub truth: f64,
    pub mse_with: f64,
    pub mse_without: f64,
    pub are: f64,
    pub bias_with: f64,
    pub bias_without: f64,
    pub coverage_with: f64,
    pub coverage_without: f64,
    pub width_with: f64,
    pub width_without: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub config: SimConfig,
    pub truth: Vec<f64>,
    pub truth_se: Vec<f64>,
    pub requested: usize,
    pub completed: usize,
    pub failures: usize,
    /// First few failure messages.
    pub failure_messages: Vec<String>,
    pub invalid: bool,
    pub low_replication: bool,
    pub coords: Vec<CoordSummary>,
}

fn ci_pairs(res: &EstimateResult) -> Vec<(f64, f64)> {
    res.ci.iter().map(|c| (c.lo, c.hi)).collect()
}

/// Run replication `r` for both variants on shared folds and nuisances.
pub fn run_one(cfg: &SimConfig, model: &ScoreModel, r: usize) -> Result<RepRecord> {
    let data = cfg.dataset(r)?;
    let ecfg = cfg.estimate_config(r);
    let fit = Fit::new(&data, model, &ecfg)?;
    let (vw, vwo) = cfg.variants();
    let with = fit.estimate(&data, model, vw, &ecfg)?;
    let without = fit.estimate(&data, model, vwo, &ecfg)?;
    Ok(RepRecord {
        index: r,
        ci_with: ci_pairs(&with),
        ci_without: ci_pairs(&without),
        with_acp: with.beta,
        without_acp: without.beta,
    })
}

/// Replications in index order, failures kept as messages.
pub fn replicate(cfg: &SimConfig) -> Result<Vec<std::result::Result<RepRecord, String>>> {
    cfg.validate()?;
    let model = ScoreModel::new(cfg.model, cfg.spec.p());
    Ok((0..cfg.replications)
        .into_par_iter()
        .map(|r| run_one(cfg, &model, r).map_err(|e| format!("replication {r}: {e}")))
        .collect())
}

/// Reduce replication records against the true parameter.
pub fn summarize(cfg: &SimConfig, truth: &TrueParameter, records: &[std::result::Result<RepRecord, String>]) -> SimSummary {
    let ok: Vec<&RepRecord> = records.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failure_messages: Vec<String> = records.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    let failures = failure_messages.len();
    let n = ok.len() as f64;
    let coords = truth
        .value
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let mean = |f: &dyn Fn(&RepRecord) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
            let covers = |ci: &[(f64, f64)]| (ci[j].0 <= t && t <= ci[j].1) as u8 as f64;
            let mse_with = mean(&|r| (r.with_acp[j] - t).powi(2));
            let mse_without = mean(&|r| (r.without_acp[j] - t).powi(2));
            CoordSummary {
                coord: j,
                truth: t,
                mse_with,
                mse_without,
                are: mse_without / mse_with,
                bias_with: mean(&|r| r.with_acp[j] - t),
                bias_without: mean(&|r| r.without_acp[j] - t),
                coverage_with: mean(&|r| covers(&r.ci_with)),
                coverage_without: mean(&|r| covers(&r.ci_without)),
                width_with: mean(&|r| r.ci_with[j].1 - r.ci_with[j].0),
                width_without: mean(&|r| r.ci_without[j].1 - r.ci_without[j].0),
            }
        })
        .collect();
    SimSummary {
        config: cfg.clone(),
        truth: truth.value.clone(),
        truth_se: truth.se.clone(),
        requested: records.len(),
        completed: ok.len(),
        failures,
        invalid: ok.is_empty() || failures as f64 > MAX_FAILURE_RATE * records.len() as f64,
        low_replication: ok.len() < LOW_REPLICATION,
        failure_messages: failure_messages.into_iter().take(10).collect(),
        coords,
    }
}

/// Replication study against a given true parameter.
pub fn run_replications_with_truth(cfg: &SimConfig, truth: &TrueParameter) -> Result<SimSummary> {
    let records = replicate(cfg)?;
    Ok(summarize(cfg, truth, &records))
}

/// Replication study with the true parameter from the oracle cache.
pub fn run_replications(cfg: &SimConfig, cache: &OracleCache) -> Result<SimSummary> {
    cfg.validate()?;
    let truth = cfg.truth(cache)?;
    run_replications_with_truth(cfg, &truth)
}

/// One point of a sweep; `panel` names the figure panel it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(default)]
    pub panel: String,
    pub n: usize,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub alpha: f64,
    pub zeta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub point: GridPoint,
    pub outcome: std::result::Result<SimSummary, String>,
}

/// Run every grid point on top of `base`, keeping failed points as errors.
pub fn sweep(base: &SimConfig, grid: &[GridPoint], cache: &OracleCache) -> Vec<SweepEntry> {
    grid.iter()
        .map(|p| {
            let mut cfg = base.clone();
            cfg.n = p.n;
            cfg.big_n = p.big_n;
            cfg.spec.alpha = p.alpha;
            cfg.spec.zeta = p.zeta;
            SweepEntry {
                point: p.clone(),
                outcome: run_replications(&cfg, cache).map_err(|e| e.to_string()),
            }
        })
        .collect()
}

/// Column order of the long-format sweep table.
pub const SWEEP_COLUMNS: [&str; 22] = [
    "panel",
    "family",
    "estimand",
    "target",
    "n",
    "N",
    "alpha",
    "zeta",
    "coord",
    "truth",
    "reps",
    "failures",
    "mse_with",
    "mse_without",
    "are",
    "coverage_with",
    "coverage_without",
    "width_with",
    "width_without",
    "width_ratio",
    "flags",
    "note",
];

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Long-format table, one row per (grid point, coordinate).
pub fn write_sweep_csv<W: Write>(base: &SimConfig, entries: &[SweepEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    let target = match base.target {
        SimTarget::Beta => "beta",
        SimTarget::Theta => "theta",
    };
    for e in entries {
        let p = &e.point;
        let head = [
            p.panel.clone(),
            base.spec.family.to_string(),
            base.model.to_string(),
            target.to_string(),
            p.n.to_string(),
            p.big_n.to_string(),
            fmt_f(p.alpha),
            fmt_f(p.zeta),
        ];
        match &e.outcome {
            Ok(s) => {
                let mut flags = Vec::new();
                if s.invalid {
                    flags.push("invalid");
                }
                if s.low_replication {
                    flags.push("low_replication");
                }
                for c in &s.coords {
                    let mut row: Vec<String> = head.to_vec();
                    row.extend([
                        c.coord.to_string(),
                        fmt_f(c.truth),
                        s.completed.to_string(),
                        s.failures.to_string(),
                        fmt_f(c.mse_with),
                        fmt_f(c.mse_without),
                        fmt_f(c.are),
                        fmt_f(c.coverage_with),
                        fmt_f(c.coverage_without),
                        fmt_f(c.width_with),
                        fmt_f(c.width_without),
                        fmt_f(c.width_with / c.width_without),
                        flags.join(";"),
                        s.failure_messages.first().cloned().unwrap_or_default(),
                    ]);
                    w.write_record(&row)?;
                }
            }
            Err(msg) => {
                let mut row: Vec<String> = head.to_vec();
                row.extend(["".into(), "".into(), "0".into(), "".into()]);
                row.extend(std::iter::repeat_n("NaN".to_string(), 8));
                row.extend(["failed".into(), msg.clone()]);
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-replication audit dump.
pub fn write_replications_csv<W: Write>(records: &[std::result::Result<RepRecord, String>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replication", "coord", "with_acp", "without_acp", "lo_with", "hi_with", "lo_without", "hi_without", "error"])?;
    for (i, rec) in records.iter().enumerate() {
        match rec {
            Ok(r) => {
                for j in 0..r.with_acp.len() {
                    w.write_record([
                        r.index.to_string(),
                        j.to_string(),
                        fmt_f(r.with_acp[j]),
                        fmt_f(r.without_acp[j]),
                        fmt_f(r.ci_with[j].0),
                        fmt_f(r.ci_with[j].1),
                        fmt_f(r.ci_without[j].0),
                        fmt_f(r.ci_without[j].1),
                        String::new(),
                    ])?;
                }
            }
            Err(msg) => {
                w.write_record([i.to_string(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), String::new(), msg.clone()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::OutcomeFamily;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn quotas_are_exact() {
        let spec = DgpSpec::new(5.0, 0.0, OutcomeFamily::Linear).unwrap();
        let d = gen_dataset(&spec, 120, 80, 1).unwrap();
        assert_eq!(d.n_labeled(), 120);
        assert_eq!(d.n_unlabeled(), 80);
        assert!(d.observations().iter().all(|o| o.yhat.is_some()));
        assert!(d.observations().iter().all(|o| o.r == o.y.is_some()));
    }

    #[test]
    fn surrogate_correlation_follows_zeta() {
        for (zeta, tol) in [(0.0, 0.01), (0.6, 0.02)] {
            let spec = DgpSpec::new(1.0, zeta, OutcomeFamily::Linear).unwrap();
            let d = gen_dataset(&spec, 50_000, 50_000, 2).unwrap();
            let yhat: Vec<f64> = d.observations().iter().map(|o| o.yhat.unwrap()).collect();
            let x1: Vec<f64> = d.observations().iter().map(|o| o.x[0]).collect();
            // With n = N the pooled sample follows the population law.
            let c = corr(&yhat, &x1);
            assert!((c - zeta).abs() < tol, "zeta {zeta}: corr {c}");
        }
    }

    #[test]
    fn labeled_stratum_is_shifted() {
        let spec = DgpSpec::new(1.0, 0.0, OutcomeFamily::Linear).unwrap();
        let d = gen_dataset(&spec, 50_000, 50_000, 3).unwrap();
        let mean = |lab: bool| {
            let v: Vec<f64> = d
                .observations()
                .iter()
                .filter(|o| o.r == lab)
                .map(|o| o.x.iter().sum::<f64>())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false) + 1.0);
    }

    #[test]
    fn config_bounds() {
        let spec = DgpSpec::new(1.0, 0.0, OutcomeFamily::Linear).unwrap();
        let mut cfg = SimConfig::new(spec, 49, 100, ScoreKind::MeanTarget, 1);
        assert!(cfg.validate().is_err());
        cfg.n = 50;
        cfg.replications = 1;
        assert!(cfg.validate().is_err());
        cfg.replications = 2;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn replications_are_deterministic() {
        let spec = DgpSpec::new(5.0, 0.0, OutcomeFamily::Linear).unwrap();
        let mut cfg = SimConfig::new(spec, 60, 60, ScoreKind::MeanTarget, 11);
        cfg.replications = 2;
        cfg.fast_mode = true;
        let truth = TrueParameter {
            value: vec![1.0],
            se: vec![0.0],
            omega: vec![vec![-1.0]],
            mc_samples: 0,
        };
        let a = run_replications_with_truth(&cfg, &truth).unwrap();
        let b = run_replications_with_truth(&cfg, &truth).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.low_replication);
        assert_eq!(a.completed, 2);
    }

    #[test]
    fn replication_depends_only_on_its_index() {
        let spec = DgpSpec::new(5.0, 0.0, OutcomeFamily::Linear).unwrap();
        let mut cfg = SimConfig::new(spec, 60, 60, ScoreKind::MeanTarget, 11);
        cfg.fast_mode = true;
        let model = ScoreModel::new(ScoreKind::MeanTarget, 5);
        let alone = run_one(&cfg, &model, 7).unwrap();
        cfg.replications = 10;
        let all = replicate(&cfg).unwrap();
        assert_eq!(all[7].as_ref().unwrap(), &alone);
    }
}
