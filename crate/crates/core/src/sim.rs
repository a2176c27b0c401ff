//! Benchmark designs with known truth and the Monte Carlo harness.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, TruthInfo};
use crate::error::{Error, Result};
use crate::estimator::fit_semidid;
use crate::inference::linspace;
use crate::linalg::{mean, standard_normal_quantile, std_dev, z_quantile};
use crate::nuisance::{misspecify, MisspecMode, MisspecTarget, NuisanceFit};
use crate::pipeline::{estimate, estimate_with_nuisance, EstimationConfig};

pub const RNG_ALGORITHM: &str = "chacha20";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpFamily {
    /// Independent covariates, homoskedastic errors.
    Dgp1,
    /// AR(1)-correlated covariates and heteroskedastic baselines.
    Dgp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub family: DgpFamily,
    pub n: usize,
    pub p: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_s_beta")]
    pub s_beta: usize,
    #[serde(default = "default_s_theta")]
    pub s_theta: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_rho() -> f64 {
    0.5
}
fn default_s_beta() -> usize {
    15
}
fn default_s_theta() -> usize {
    10
}

impl DgpConfig {
    pub fn new(family: DgpFamily, n: usize, p: usize, seed: u64) -> Self {
        DgpConfig { family, n, p, rho: default_rho(), s_beta: default_s_beta(), s_theta: default_s_theta(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(Error::InvalidProblem(format!("simulated samples need n >= 20, got {}", self.n)));
        }
        if self.p == 0 {
            return Err(Error::InvalidProblem("p must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidProblem(format!("rho must be in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }

    pub fn truth(&self) -> TruthInfo {
        let p = self.p;
        let coef = |s: usize, scale: f64| -> Vec<f64> {
            (0..p).map(|i| if i < s { scale / (i + 1) as f64 } else { 0.0 }).collect()
        };
        let beta_treated = coef(self.s_beta, 2.0);
        let beta_control = coef(self.s_beta, 1.0);
        let beta0 = beta_treated.iter().zip(&beta_control).map(|(a, b)| a - b).collect();
        TruthInfo { beta0, beta_treated, beta_control, theta: coef(self.s_theta, 1.0), f0: f64::exp }
    }
}

/// Seed for a replication's cross-fitting folds.
pub fn rep_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws replication `rep` of the design. Each replication reads its own
/// stream of a generator seeded with `cfg.seed`.
pub fn gen_sample(cfg: &DgpConfig, rep: u64) -> Result<(Sample, TruthInfo)> {
    cfg.validate()?;
    let truth = cfg.truth();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep);
    let (n, p) = (cfg.n, cfg.p);
    let mut x = DMatrix::zeros(n, p);
    let mut z = DVector::zeros(n);
    let mut dy = DVector::zeros(n);
    let mut d = vec![false; n];
    let innov = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut row = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            row[j] = match cfg.family {
                DgpFamily::Dgp1 => e,
                DgpFamily::Dgp2 if j == 0 => e,
                DgpFamily::Dgp2 => cfg.rho * row[j - 1] + innov * e,
            };
            x[(i, j)] = row[j];
        }
        let zi: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let e0: f64 = rng.sample(StandardNormal);
        let (base1, base0) = match cfg.family {
            DgpFamily::Dgp1 => (rng.sample(StandardNormal), rng.sample(StandardNormal)),
            DgpFamily::Dgp2 => {
                let et: f64 = rng.sample(StandardNormal);
                let b = et * (zi + row[0]) / std::f64::consts::SQRT_2;
                (b, b)
            }
        };
        let u: f64 = rng.random();
        let treated = u < truth.pi0(&row, zi);
        let y1_post = base1 + truth.phi1(&row, zi) + e1;
        let y0_post = base0 + truth.phi0(&row, zi) + e0;
        // each unit is observed in its own arm in both periods
        dy[i] = if treated { y1_post - base1 } else { y0_post - base0 };
        d[i] = treated;
        z[i] = zi;
    }
    Ok((Sample::new(dy, d, x, z)?, truth))
}

/// Targets evaluated in each replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Zero-based coordinates of the unit-vector linear targets.
    pub coords: Vec<usize>,
    pub z_grid: Vec<f64>,
    pub level: f64,
}

impl TargetSpec {
    /// The first 15 coordinates and the last five, with a 20-point grid over
    /// the central 90% of a standard normal.
    pub fn default_for(p: usize) -> Self {
        let mut coords: Vec<usize> = (0..15.min(p)).chain(p.saturating_sub(5)..p).collect();
        coords.sort_unstable();
        coords.dedup();
        let lo = standard_normal_quantile(0.05);
        TargetSpec { coords, z_grid: linspace(lo, -lo, 20), level: 0.90 }
    }
}

/// One estimate with its interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub estimate: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PointEstimate {
    pub fn from_se(estimate: f64, std_err: f64, level: f64) -> Self {
        let half = z_quantile(level) * std_err;
        PointEstimate { estimate, std_err, ci_low: estimate - half, ci_high: estimate + half }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub linear: Vec<PointEstimate>,
    /// Estimates before any bias correction, aligned with `linear`.
    pub plug_in: Vec<f64>,
    pub nonparametric: Vec<PointEstimate>,
    pub v_beta_nonnegative: bool,
}

/// Something the harness can run on each replication.
pub trait RepEstimator: Sync {
    fn name(&self) -> String;

    /// `Err(SemiDidInfeasible)` here marks the whole cell as infeasible.
    fn check(&self, _cfg: &DgpConfig) -> Result<()> {
        Ok(())
    }

    fn estimate(&self, sample: &Sample, truth: &TruthInfo, seed: u64, targets: &TargetSpec) -> Result<RepResult>;
}

/// How the first stage is obtained in [`DrDidRep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceSource {
    CrossFit,
    /// True nuisance functions, optionally with some blocks misspecified.
    Truth(Vec<(MisspecTarget, MisspecMode)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrDidRep {
    pub config: EstimationConfig,
    pub nuisance: NuisanceSource,
}

impl DrDidRep {
    pub fn new(config: EstimationConfig) -> Self {
        DrDidRep { config, nuisance: NuisanceSource::CrossFit }
    }
}

impl RepEstimator for DrDidRep {
    fn name(&self) -> String {
        match &self.nuisance {
            NuisanceSource::CrossFit => "drdid".into(),
            NuisanceSource::Truth(m) if m.is_empty() => "drdid-oracle-nuisance".into(),
            NuisanceSource::Truth(_) => "drdid-misspecified".into(),
        }
    }

    fn estimate(&self, sample: &Sample, truth: &TruthInfo, seed: u64, targets: &TargetSpec) -> Result<RepResult> {
        let mut cfg = self.config.clone();
        cfg.level = targets.level;
        let est = match &self.nuisance {
            NuisanceSource::CrossFit => estimate(sample, &cfg, seed, &targets.coords, &targets.z_grid)?,
            NuisanceSource::Truth(miss) => {
                let mut nf = NuisanceFit::from_truth(sample, truth, cfg.clip)?;
                for &(which, mode) in miss {
                    nf = misspecify(&nf, sample, which, mode);
                }
                estimate_with_nuisance(sample, &cfg, nf, &targets.coords, &targets.z_grid)?
            }
        };
        let linear = est
            .beta
            .iter()
            .map(|b| PointEstimate { estimate: b.t_hat, std_err: b.std_err(), ci_low: b.ci_low, ci_high: b.ci_high })
            .collect();
        let plug_in = est.beta.iter().map(|b| b.plug_in).collect();
        let nonparametric = match &est.f {
            Some(f) => (0..f.z_grid.len())
                .map(|g| PointEstimate { estimate: f.f_bar[g], std_err: f.std_err(g), ci_low: f.ci_low[g], ci_high: f.ci_high[g] })
                .collect(),
            None => Vec::new(),
        };
        let v_beta_nonnegative = est.beta.iter().all(|b| b.v_beta_hat >= 0.0);
        Ok(RepResult { linear, plug_in, nonparametric, v_beta_nonnegative })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiDidRep {
    pub degree: usize,
}

impl RepEstimator for SemiDidRep {
    fn name(&self) -> String {
        "semidid".into()
    }

    fn check(&self, cfg: &DgpConfig) -> Result<()> {
        let regressors = cfg.p + 2 * self.degree + 1;
        if cfg.n <= regressors {
            return Err(Error::SemiDidInfeasible { n: cfg.n, regressors });
        }
        Ok(())
    }

    fn estimate(&self, sample: &Sample, _truth: &TruthInfo, _seed: u64, targets: &TargetSpec) -> Result<RepResult> {
        let fit = fit_semidid(sample, self.degree)?;
        let linear: Vec<PointEstimate> = targets
            .coords
            .iter()
            .map(|&j| PointEstimate::from_se(fit.beta_hat[j], fit.beta_se(j), targets.level))
            .collect();
        let plug_in = linear.iter().map(|e| e.estimate).collect();
        let nonparametric = targets
            .z_grid
            .iter()
            .map(|&z| PointEstimate::from_se(fit.f_hat(z), fit.f_se(z), targets.level))
            .collect();
        Ok(RepResult { linear, plug_in, nonparametric, v_beta_nonnegative: true })
    }
}

/// Averages over replications, then over targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bias: f64,
    /// Mean estimated standard error.
    pub std_err: f64,
    /// Standard deviation of the estimates across replications.
    pub empirical_sd: f64,
    pub mse: f64,
    pub coverage: f64,
    pub ci_length: f64,
}

impl Metrics {
    fn nan() -> Self {
        Metrics { bias: f64::NAN, std_err: f64::NAN, empirical_sd: f64::NAN, mse: f64::NAN, coverage: f64::NAN, ci_length: f64::NAN }
    }

    fn from_target(ests: &[PointEstimate], truth: f64) -> Self {
        let err: Vec<f64> = ests.iter().map(|e| e.estimate - truth).collect();
        let vals: Vec<f64> = ests.iter().map(|e| e.estimate).collect();
        Metrics {
            bias: mean(&err),
            std_err: mean(&ests.iter().map(|e| e.std_err).collect::<Vec<_>>()),
            empirical_sd: std_dev(&vals),
            mse: mean(&err.iter().map(|e| e * e).collect::<Vec<_>>()),
            coverage: mean(&ests.iter().map(|e| f64::from(u8::from(e.ci_low <= truth && truth <= e.ci_high))).collect::<Vec<_>>()),
            ci_length: mean(&ests.iter().map(|e| e.ci_high - e.ci_low).collect::<Vec<_>>()),
        }
    }

    fn average(items: &[Metrics]) -> Self {
        if items.is_empty() {
            return Metrics::nan();
        }
        let avg = |f: fn(&Metrics) -> f64| mean(&items.iter().map(f).collect::<Vec<_>>());
        Metrics {
            bias: avg(|m| m.bias),
            std_err: avg(|m| m.std_err),
            empirical_sd: avg(|m| m.empirical_sd),
            mse: avg(|m| m.mse),
            coverage: avg(|m| m.coverage),
            ci_length: avg(|m| m.ci_length),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub version: String,
    pub rng: String,
    pub config: DgpConfig,
    pub estimator: String,
    pub targets: TargetSpec,
    pub reps: usize,
    pub failures: usize,
    /// Set when the estimator cannot run at this `(n, p)`.
    pub infeasible: bool,
    pub linear: Metrics,
    pub nonparametric: Metrics,
    /// Per-target metrics, aligned with `targets.coords`.
    pub linear_by_target: Vec<Metrics>,
    /// Per-replication results; `None` for failed replications.
    pub replications: Vec<Option<RepResult>>,
}

/// Runs `reps` replications on a pool of `parallelism` threads. Results are
/// collected in replication order, so the report does not depend on the
/// number of threads.
pub fn run_mc(cfg: &DgpConfig, estimator: &dyn RepEstimator, reps: usize, targets: &TargetSpec, parallelism: usize) -> Result<McReport> {
    cfg.validate()?;
    if reps < 2 {
        return Err(Error::InvalidProblem(format!("need at least 2 replications, got {reps}")));
    }
    if let Some(&j) = targets.coords.iter().find(|&&j| j >= cfg.p) {
        return Err(Error::InvalidProblem(format!("target coordinate {} exceeds p = {}", j + 1, cfg.p)));
    }
    let mut report = McReport {
        version: crate::VERSION.to_string(),
        rng: RNG_ALGORITHM.to_string(),
        config: *cfg,
        estimator: estimator.name(),
        targets: targets.clone(),
        reps,
        failures: 0,
        infeasible: false,
        linear: Metrics::nan(),
        nonparametric: Metrics::nan(),
        linear_by_target: Vec::new(),
        replications: Vec::new(),
    };
    if let Err(e) = estimator.check(cfg) {
        log::info!("event=cell_infeasible estimator={} n={} p={} reason=\"{e}\"", report.estimator, cfg.n, cfg.p);
        report.infeasible = true;
        return Ok(report);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidProblem(format!("thread pool: {e}")))?;
    let results: Vec<Result<RepResult>> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|rep| {
                let (sample, truth) = gen_sample(cfg, rep as u64)?;
                estimator.estimate(&sample, &truth, rep_seed(cfg.seed, rep as u64), targets)
            })
            .collect()
    });
    let mut ok = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => {
                ok.push(v.clone());
                report.replications.push(Some(v));
            }
            Err(e) => {
                log::warn!("event=rep_failed rep={rep} error=\"{e}\"");
                report.failures += 1;
                report.replications.push(None);
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::AllRepsFailed(reps));
    }
    let truth = cfg.truth();
    report.linear_by_target = targets
        .coords
        .iter()
        .enumerate()
        .map(|(t, &j)| {
            let ests: Vec<PointEstimate> = ok.iter().map(|r| r.linear[t]).collect();
            Metrics::from_target(&ests, truth.beta0[j])
        })
        .collect();
    report.linear = Metrics::average(&report.linear_by_target);
    let np: Vec<Metrics> = targets
        .z_grid
        .iter()
        .enumerate()
        .filter(|_| ok.iter().all(|r| r.nonparametric.len() == targets.z_grid.len()))
        .map(|(g, &z)| {
            let ests: Vec<PointEstimate> = ok.iter().map(|r| r.nonparametric[g]).collect();
            Metrics::from_target(&ests, (truth.f0)(z))
        })
        .collect();
    report.nonparametric = Metrics::average(&np);
    Ok(report)
}

/// One row of a rendered table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub n: usize,
    pub p: usize,
    pub estimator: String,
    pub metric: String,
    /// Formatted cells; `-` for infeasible configurations.
    pub linear: String,
    pub nonparametric: String,
}

pub const METRIC_NAMES: [&str; 5] = ["Bias", "Std Err", "MSE", "Coverage", "CI length"];

fn cell(v: f64, infeasible: bool) -> String {
    if infeasible || !v.is_finite() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn table_rows(reports: &[McReport]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for r in reports {
        let pick = |m: &Metrics, i: usize| [m.bias, m.std_err, m.mse, m.coverage, m.ci_length][i];
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            rows.push(TableRow {
                n: r.config.n,
                p: r.config.p,
                estimator: r.estimator.clone(),
                metric: name.to_string(),
                linear: cell(pick(&r.linear, i), r.infeasible),
                nonparametric: cell(pick(&r.nonparametric, i), r.infeasible),
            });
        }
    }
    rows
}

pub fn table_csv(rows: &[TableRow], preamble: &[String]) -> String {
    let mut out = String::new();
    for line in preamble {
        for part in line.lines() {
            let _ = writeln!(out, "# {part}");
        }
    }
    out.push_str("n,p,estimator,metric,linear,nonparametric\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.n, r.p, r.estimator, r.metric, r.linear, r.nonparametric);
    }
    out
}

pub fn table_text(rows: &[TableRow]) -> String {
    let header = ["n", "p", "estimator", "metric", "linear", "nonparametric"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| [r.n.to_string(), r.p.to_string(), r.estimator.clone(), r.metric.clone(), r.linear.clone(), r.nonparametric.clone()])
        .collect();
    let mut width = header.map(str::len);
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, c: &[&str]| {
        let parts: Vec<String> = c
            .iter()
            .enumerate()
            .map(|(i, s)| if i < 4 { format!("{:<w$}", s, w = width[i]) } else { format!("{:>w$}", s, w = width[i]) })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    let mut last_block = None;
    for (r, c) in rows.iter().zip(&cells) {
        let block = (r.n, r.p, r.estimator.clone());
        if last_block.as_ref().is_some_and(|b| *b != block) {
            out.push('\n');
        }
        last_block = Some(block);
        line(&mut out, &c.each_ref().map(String::as_str));
    }
    out
}

pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        let num = |i: usize| -> Result<usize> {
            get(i).parse().map_err(|_| Error::ParseValue { row: rows_len(&rec), col: i.to_string(), value: get(i) })
        };
        rows.push(TableRow { n: num(0)?, p: num(1)?, estimator: get(2), metric: get(3), linear: get(4), nonparametric: get(5) });
    }
    Ok(rows)
}

fn rows_len(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

/// Writes `<path>` as CSV and the same table aligned as text next to it
/// with a `.txt` extension.
pub fn render_table(reports: &[McReport], path: impl AsRef<Path>, preamble: &[String]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidProblem("no reports to render".into()));
    }
    let path = path.as_ref();
    let rows = table_rows(reports);
    std::fs::write(path, table_csv(&rows, preamble)).map_err(|e| Error::io(path, e))?;
    let txt = path.with_extension("txt");
    let mut text = String::new();
    for line in preamble {
        for part in line.lines() {
            let _ = writeln!(text, "# {part}");
        }
    }
    text.push_str(&table_text(&rows));
    std::fs::write(&txt, text).map_err(|e| Error::io(&txt, e))
}
