//! Command-line front end: Monte Carlo studies, estimation on a CSV, and
//! confidence band export.

pub mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use drdid::data::{load_csv, Sample};
use drdid::inference::{central_grid, write_band, linspace};
use drdid::pipeline::{estimate, Estimate};
use drdid::sim::{render_table, run_mc, DgpConfig, DrDidRep, McReport, RepEstimator, SemiDidRep, TargetSpec};
use serde::Serialize;

pub use config::RunConfig;
use config::EstimatorName;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] drdid::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) if e.is_data_error() => EXIT_DATA,
            CliError::Core(_) => EXIT_NUMERIC,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "drdid", version, about = "Doubly robust difference-in-differences for heterogeneous effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo study over the configured (n, p, estimator) cells.
    Simulate(Common),
    /// Fit and inference on a CSV sample.
    Estimate(Common),
    /// Confidence band for the smooth component on a CSV sample.
    Band(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Simulate(c) => ("simulate", c),
            Command::Estimate(c) => ("estimate", c),
            Command::Band(c) => ("band", c),
        }
    }
}

/// Loads the configuration and applies flag overrides.
pub fn effective_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let (name, common) = cli.command.parts();
    let result = effective_config(common).and_then(|cfg| {
        cfg.validate(name)?;
        match &cli.command {
            Command::Simulate(_) => cmd_simulate(&cfg).map(|_| ()),
            Command::Estimate(_) => in_pool(&cfg, || cmd_estimate(&cfg).map(|_| ())),
            Command::Band(_) => in_pool(&cfg, || cmd_band(&cfg).map(|_| ())),
        }
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = e.exit_code();
            log::error!("event=command_failed command={name} exit_code={code} error=\"{e}\"");
            eprintln!("error: {e}");
            code
        }
    }
}

/// Runs `f` on a worker pool with `cfg.threads` threads.
pub fn in_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
    pool.install(f)
}

/// `#` lines recording the artifact version and the effective configuration.
pub fn provenance(cfg: &RunConfig) -> Vec<String> {
    vec![format!("drdid version {}", drdid::VERSION), "effective configuration:".into(), cfg.to_toml()]
}

fn create_out(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| drdid::Error::io(&cfg.out, e).into())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| drdid::Error::io(path, e).into())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_vec_pretty(v).map_err(drdid::Error::from)?;
    s.push(b'\n');
    Ok(s)
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    version: &'a str,
    config: &'a RunConfig,
    reports: &'a [McReport],
}

/// Runs every configured cell and writes `report.json`, `table.csv` and
/// `table.txt` into the output directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<McReport>, CliError> {
    let s = &cfg.simulate;
    let est_cfg = cfg.estimation();
    let mut reports = Vec::new();
    for cell in &s.cells {
        let dgp = DgpConfig { family: s.family, n: cell.n, p: cell.p, rho: s.rho, s_beta: s.s_beta, s_theta: s.s_theta, seed: cfg.seed };
        let mut targets = TargetSpec::default_for(cell.p);
        if !s.coords.is_empty() {
            targets.coords = s.coords.iter().map(|j| j - 1).collect();
        }
        let lo = targets.z_grid[0];
        targets.z_grid = linspace(lo, -lo, s.grid_points);
        targets.level = cfg.level;
        for name in &s.estimators {
            let estimator: Box<dyn RepEstimator> = match name {
                EstimatorName::Drdid => Box::new(DrDidRep::new(est_cfg.clone())),
                EstimatorName::Semidid => Box::new(SemiDidRep { degree: est_cfg.fit.degree }),
            };
            log::info!("event=cell_start estimator={} n={} p={} reps={}", estimator.name(), cell.n, cell.p, s.reps);
            let r = run_mc(&dgp, estimator.as_ref(), s.reps, &targets, cfg.threads)?;
            log::info!(
                "event=cell_done estimator={} n={} p={} failures={} infeasible={} linear_coverage={:.4} nonparametric_coverage={:.4}",
                r.estimator, cell.n, cell.p, r.failures, r.infeasible, r.linear.coverage, r.nonparametric.coverage
            );
            reports.push(r);
        }
    }
    create_out(cfg)?;
    let out = SimulateOutput { version: drdid::VERSION, config: cfg, reports: &reports };
    write_file(&cfg.out.join("report.json"), &to_json(&out)?)?;
    render_table(&reports, cfg.out.join("table.csv"), &provenance(cfg))?;
    Ok(reports)
}

fn load_sample(cfg: &RunConfig) -> Result<Sample, CliError> {
    let path = cfg.data.path.as_ref().ok_or_else(|| CliError::Config("data.path is required".into()))?;
    let sample = load_csv(path, &cfg.data.schema)?;
    log::info!("event=data_loaded n={} p={} treated_fraction={:.4}", sample.n(), sample.p(), sample.treated_fraction());
    Ok(sample)
}

fn run_estimation(cfg: &RunConfig, sample: &Sample, with_beta: bool) -> Result<Estimate, CliError> {
    let est_cfg = cfg.estimation();
    let coords: Vec<usize> = if with_beta { cfg.targets.coords.iter().map(|j| j - 1).collect() } else { Vec::new() };
    if let Some(&j) = cfg.targets.coords.iter().find(|&&j| j > sample.p()) {
        return Err(CliError::Config(format!("targets.coords entry {j} exceeds p = {}", sample.p())));
    }
    let grid = if cfg.targets.grid.is_empty() {
        central_grid(sample.z().as_slice(), cfg.targets.grid_points)
    } else {
        cfg.targets.grid.clone()
    };
    let est = estimate(sample, &est_cfg, cfg.seed, &coords, &grid)?;
    if let Some(f) = &est.f {
        let flagged = f.clamped.iter().filter(|&&c| c).count();
        if flagged > 0 {
            log::warn!("event=band_variance_flagged points={flagged} of={}", f.clamped.len());
        }
    }
    let o = &est.nuisance.overlap;
    log::info!(
        "event=overlap min_pi_hat={:.4} max_pi_hat={:.4} n_clipped={} mean_pi_hat={:.4}",
        o.min_pi_hat, o.max_pi_hat, o.n_clipped, o.treated_fraction
    );
    log::info!(
        "event=tuning lambda={:.6e} degree={} folds={} clip={} selected={}",
        est.fit.lambda, est.fit.options.degree, est_cfg.folds, est_cfg.clip, est.fit.n_selected()
    );
    Ok(est)
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    version: &'a str,
    config: &'a RunConfig,
    n: usize,
    p: usize,
    overlap: &'a drdid::OverlapDiagnostics,
    fit: &'a drdid::DrDidFit,
    beta: &'a [drdid::BetaInference],
    f: Option<&'a drdid::FInference>,
}

fn band_bytes(cfg: &RunConfig, est: &Estimate) -> Result<Vec<u8>, CliError> {
    let f = est.f.as_ref().ok_or_else(|| CliError::Config("empty evaluation grid".into()))?;
    let mut buf = Vec::new();
    write_band(f, &mut buf, &provenance(cfg)).map_err(|e| drdid::Error::io(cfg.out.join("band.csv"), e))?;
    Ok(buf)
}

/// Fits on the configured CSV and writes `estimate.json` and `band.csv`.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<Estimate, CliError> {
    let sample = load_sample(cfg)?;
    let est = run_estimation(cfg, &sample, true)?;
    for b in &est.beta {
        let j = b.xi.iter().position(|&v| v != 0.0).unwrap_or(0) + 1;
        log::info!("event=linear_target coord={j} estimate={:.6} ci_low={:.6} ci_high={:.6}", b.t_hat, b.ci_low, b.ci_high);
    }
    create_out(cfg)?;
    let out = EstimateOutput {
        version: drdid::VERSION,
        config: cfg,
        n: sample.n(),
        p: sample.p(),
        overlap: &est.nuisance.overlap,
        fit: &est.fit,
        beta: &est.beta,
        f: est.f.as_ref(),
    };
    write_file(&cfg.out.join("estimate.json"), &to_json(&out)?)?;
    write_file(&cfg.out.join("band.csv"), &band_bytes(cfg, &est)?)?;
    Ok(est)
}

/// Writes only the smooth-component band to `band.csv`.
pub fn cmd_band(cfg: &RunConfig) -> Result<Estimate, CliError> {
    let sample = load_sample(cfg)?;
    let est = run_estimation(cfg, &sample, false)?;
    create_out(cfg)?;
    write_file(&cfg.out.join("band.csv"), &band_bytes(cfg, &est)?)?;
    Ok(est)
}

/// Line-oriented `key=value` log format.
pub fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| writeln!(buf, "level={} target={} {}", record.level(), record.target(), record.args()))
        .try_init();
}
