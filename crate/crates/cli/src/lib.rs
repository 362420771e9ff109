//! Command-line front end: estimation on CSV data, simulation sweeps, oracle
//! bounds and report tables.
//!
//! Exit codes: 0 on success, 2 on validation or configuration errors, 3 on
//! numerical failure (solver, singular matrices, invalid simulation points).

pub mod config;
pub mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use acpshift::data::{read_csv_path, write_csv_path, Scenario, ScoreKind, ScoreModel};
use acpshift::estimator::{EstimateConfig, Fit, Variant};
use acpshift::inference::{bootstrap_fit, BootstrapConfig, EstimateResult, SCHEMA_VERSION};
use acpshift::nuisance::LearnerConfig;
use acpshift::oracle::{DgpSpec, OracleCache, OutcomeFamily, Target};
use acpshift::simulation::{gen_dataset, sweep, write_sweep_csv, GridPoint, SimConfig, SimSummary};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{SimFile, SIM_CONFIG_HELP};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<acpshift::Error> for CliError {
    fn from(e: acpshift::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "acpshift", version, about = "Doubly robust estimation for labeled and unlabeled samples with shifted covariates and surrogate outcomes")]
pub struct Cli {
    /// Worker threads for replication, bootstrap and Monte Carlo loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate a parameter from a CSV with columns r,y,x1..xp[,yhat].
    Estimate(EstimateArgs),
    /// Run a simulation sweep described by a TOML config.
    #[command(after_long_help = SIM_CONFIG_HELP)]
    Simulate(SimulateArgs),
    /// Compute oracle efficiency bounds for the synthetic design.
    Oracle(OracleArgs),
    /// Split a sweep table into per-panel CSVs.
    Report(ReportArgs),
    /// Draw a synthetic dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// mean | linear | logistic
    #[arg(long)]
    pub estimand: ScoreKind,
    /// with-acp | without-acp | theta-with | theta-without
    #[arg(long)]
    pub variant: Variant,
    /// Cross-fitting folds.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    /// CI level is 1 - alpha.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Perturbation-bootstrap replicates (0 disables).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    /// GLM-only nuisances.
    #[arg(long)]
    pub fast: bool,
    /// Optional TOML with [learner] and [solver] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Result JSON path.
    #[arg(long, default_value = "estimate.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for are_table.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Replications per grid point; overrides the config.
    #[arg(long)]
    pub reps: Option<usize>,
    /// GLM-only nuisances; overrides the config.
    #[arg(long)]
    pub fast: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Beta,
    Theta,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Coefficient of the surrogate in the outcome model.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha_signal: f64,
    /// Correlation between the surrogate and x1, in [0, 1].
    #[arg(long)]
    pub zeta: f64,
    /// linear | logistic
    #[arg(long, default_value = "linear")]
    pub family: OutcomeFamily,
    /// mean | linear | logistic
    #[arg(long, default_value = "mean")]
    pub estimand: ScoreKind,
    #[arg(long, value_enum, default_value = "beta")]
    pub target: TargetArg,
    #[arg(long, default_value_t = 1_000_000)]
    pub mc_n: usize,
    #[arg(long)]
    pub seed: u64,
    /// JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Sweep table written by `simulate`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScenarioArg {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    #[value(name = "III")]
    III,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::I => Scenario::I,
            ScenarioArg::II => Scenario::II,
            ScenarioArg::III => Scenario::III,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub alpha_signal: f64,
    #[arg(long)]
    pub zeta: f64,
    #[arg(long, default_value = "linear")]
    pub family: OutcomeFamily,
    /// Labeled units.
    #[arg(long)]
    pub n: usize,
    /// Unlabeled units.
    #[arg(long = "N")]
    pub big_n: usize,
    #[arg(long)]
    pub seed: u64,
    /// ACP layout of the written file.
    #[arg(long, value_enum, default_value = "II")]
    pub scenario: ScenarioArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        // A second initialisation in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Generate(a) => cmd_generate(&a),
    }
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateFile {
    #[serde(default)]
    learner: Option<LearnerConfig>,
    #[serde(default)]
    solver: Option<acpshift::estimator::SolverConfig>,
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let data = read_csv_path(&a.data)?;
    let mut cfg = EstimateConfig {
        k: a.k,
        seed: a.seed,
        alpha: a.alpha,
        ..EstimateConfig::default()
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let file: EstimateFile = toml::from_str(&text).map_err(|e| io_err(path, e))?;
        cfg.learner = file.learner.unwrap_or_default();
        cfg.solver = file.solver.unwrap_or_default();
    }
    cfg.learner.fast_mode |= a.fast;
    cfg.learner.validate()?;
    let model = ScoreModel::new(a.estimand, data.p());
    acpshift::estimator::resolve_variant(&data, a.variant)?;
    let fit = Fit::new(&data, &model, &cfg)?;
    let mut res = fit.estimate(&data, &model, a.variant, &cfg)?;
    if a.bootstrap > 0 {
        let boot = BootstrapConfig {
            reps: a.bootstrap,
            seed: a.seed,
            levels: (a.alpha / 2.0, 1.0 - a.alpha / 2.0),
            ..BootstrapConfig::default()
        };
        res.diagnostics.bootstrap = Some(bootstrap_fit(&fit, &data, &model, a.variant, &cfg, &boot)?.summary);
    }
    write_atomic(&a.out, &res.to_json())?;
    print!("{}", summary_lines(&res));
    Ok(())
}

/// One line per coordinate: estimate, SE and Wald interval.
pub fn summary_lines(res: &EstimateResult) -> String {
    let mut s = String::new();
    for (j, b) in res.beta.iter().enumerate() {
        s.push_str(&format!(
            "coord {j}: estimate {b:.6} se {:.6} ci [{:.6}, {:.6}]",
            res.se[j], res.ci[j].lo, res.ci[j].hi
        ));
        if let Some(bs) = &res.diagnostics.bootstrap {
            let c = &bs.intervals[j];
            s.push_str(&format!(" bootstrap [{:.6}, {:.6}]", c.lo, c.hi));
        }
        s.push('\n');
    }
    for note in &res.diagnostics.notes {
        s.push_str(&format!("note: {note}\n"));
    }
    s
}

#[derive(Serialize)]
struct PointReport<'a> {
    point: &'a GridPoint,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<&'a SimSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    schema_version: u32,
    base: &'a SimConfig,
    points: Vec<PointReport<'a>>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| io_err(&a.config, e))?;
    let file = SimFile::parse(&text)?;
    let mut base = file.base(a.seed)?;
    if let Some(r) = a.reps {
        base.replications = r;
    }
    base.fast_mode |= a.fast;
    let grid = file.grid();
    for p in &grid {
        let mut cfg = base.clone();
        cfg.n = p.n;
        cfg.big_n = p.big_n;
        cfg.spec.alpha = p.alpha;
        cfg.spec.zeta = p.zeta;
        cfg.validate()
            .map_err(|e| CliError::Validation(format!("grid point n={} N={} alpha={} zeta={}: {e}", p.n, p.big_n, p.alpha, p.zeta)))?;
    }
    let entries = sweep(&base, &grid, &OracleCache::from_env());
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let table = a.out.join("are_table.csv");
    let f = fs::File::create(&table).map_err(|e| io_err(&table, e))?;
    write_sweep_csv(&base, &entries, std::io::BufWriter::new(f))?;
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        base: &base,
        points: entries
            .iter()
            .map(|e| PointReport {
                point: &e.point,
                summary: e.outcome.as_ref().ok(),
                error: e.outcome.as_ref().err().map(String::as_str),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Validation(e.to_string()))?;
    write_atomic(&a.out.join("summary.json"), &json)?;

    let mut bad = Vec::new();
    for e in &entries {
        let p = &e.point;
        let tag = format!("n={} N={} alpha={} zeta={}", p.n, p.big_n, p.alpha, p.zeta);
        match &e.outcome {
            Ok(s) => {
                let ares: Vec<String> = s.coords.iter().map(|c| format!("{:.3}", c.are)).collect();
                let mut line = format!("{tag}: ARE [{}] reps {}/{}", ares.join(", "), s.completed, s.requested);
                if s.low_replication {
                    line.push_str(" low-replication");
                }
                if s.invalid {
                    line.push_str(" INVALID");
                    bad.push(tag.clone());
                }
                println!("{line}");
            }
            Err(msg) => {
                println!("{tag}: failed: {msg}");
                bad.push(tag);
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{} grid point(s) invalid: {}", bad.len(), bad.join("; "))))
    }
}

pub fn cmd_oracle(a: &OracleArgs) -> Result<(), CliError> {
    let spec = DgpSpec::new(a.alpha_signal, a.zeta, a.family)?;
    let target = match a.target {
        TargetArg::Beta => Target::Beta,
        TargetArg::Theta => Target::Theta,
    };
    let cache = OracleCache::from_env();
    let (bounds, hit) = cache.bounds(&spec, a.estimand, a.mc_n, a.seed, target)?;
    let json = serde_json::to_string_pretty(&bounds).map_err(|e| CliError::Validation(e.to_string()))?;
    match &a.out {
        Some(p) => write_atomic(p, &json)?,
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{json}").map_err(|e| CliError::Validation(e.to_string()))?;
        }
    }
    eprintln!(
        "{} ({})",
        if hit { "served from cache" } else { "computed" },
        cache.dir().display()
    );
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let f = fs::File::open(&a.input).map_err(|e| io_err(&a.input, e))?;
    let split = report::split(f)?;
    for (path, rows) in report::write(&split, &a.out)?.iter().zip(&split.panels) {
        println!("{} ({} rows)", path.display(), rows.len());
    }
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let spec = DgpSpec::new(a.alpha_signal, a.zeta, a.family)?;
    let data = gen_dataset(&spec, a.n, a.big_n, a.seed)?.restrict_acp(a.scenario.into())?;
    write_csv_path(&data, &a.out)?;
    Ok(())
}
