//! Run configuration read from a TOML file.

use std::path::{Path, PathBuf};

use drdid::data::{ColumnSchema, OutcomeColumns, XColumns};
use drdid::estimator::Penalty;
use drdid::inference::Bound;
use drdid::nuisance::LearnerKind;
use drdid::pipeline::EstimationConfig;
use drdid::sim::DgpFamily;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Execution settings. They never change results, so they are left out
    /// of the configuration echoed into output files.
    #[serde(skip_serializing)]
    pub threads: usize,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub level: f64,
    pub estimation: EstimationConfig,
    pub simulate: SimulateSection,
    pub data: DataSection,
    pub targets: TargetsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
            level: 0.90,
            estimation: EstimationConfig::default(),
            simulate: SimulateSection::default(),
            data: DataSection::default(),
            targets: TargetsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    Drdid,
    Semidid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub family: DgpFamily,
    pub rho: f64,
    pub s_beta: usize,
    pub s_theta: usize,
    pub reps: usize,
    pub cells: Vec<Cell>,
    pub estimators: Vec<EstimatorName>,
    /// One-based coordinates; empty means the default set.
    pub coords: Vec<usize>,
    pub grid_points: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            family: DgpFamily::Dgp1,
            rho: 0.5,
            s_beta: 15,
            s_theta: 10,
            reps: 200,
            cells: vec![Cell { n: 500, p: 50 }],
            estimators: vec![EstimatorName::Drdid],
            coords: Vec::new(),
            grid_points: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub schema: ColumnSchema,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { path: None, schema: ColumnSchema::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsSection {
    /// One-based coordinates of the unit-vector linear targets.
    pub coords: Vec<usize>,
    /// Explicit grid; when empty, `grid_points` equally spaced points over
    /// the central 90% of the observed `z`.
    pub grid: Vec<f64>,
    pub grid_points: usize,
}

impl Default for TargetsSection {
    fn default() -> Self {
        TargetsSection { coords: vec![1], grid: Vec::new(), grid_points: 20 }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Effective estimation settings with the run-level confidence level.
    pub fn estimation(&self) -> EstimationConfig {
        EstimationConfig { level: self.level, ..self.estimation.clone() }
    }

    /// Checks tuning constants and the settings used by `command`.
    pub fn validate(&self, command: &str) -> Result<(), CliError> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::Config(format!("level must be in (0, 1), got {}", self.level)));
        }
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        let e = &self.estimation;
        if e.folds < 2 {
            return Err(CliError::Config(format!("estimation.folds must be at least 2, got {}", e.folds)));
        }
        if !(e.clip > 0.0 && e.clip < 0.5) {
            return Err(CliError::Config(format!("estimation.clip must be in (0, 0.5), got {}", e.clip)));
        }
        if e.fit.degree == 0 {
            return Err(CliError::Config("estimation.fit.degree must be positive".into()));
        }
        positive("estimation.fit.tol", e.fit.tol)?;
        match e.fit.penalty {
            Penalty::Auto(c) => positive("estimation.fit.penalty", c)?,
            Penalty::Fixed(l) if !(l >= 0.0 && l.is_finite()) => {
                return Err(CliError::Config(format!("estimation.fit.penalty must be non-negative, got {l}")))
            }
            Penalty::Fixed(_) => {}
        }
        for (name, b) in [("estimation.beta_bound", e.beta_bound), ("estimation.f_bound", e.f_bound)] {
            match b {
                Bound::Auto(v) | Bound::Fixed(v) => positive(name, v)?,
            }
        }
        for (name, l) in [("estimation.propensity", e.propensity), ("estimation.outcome", e.outcome)] {
            if matches!(l.kind, LearnerKind::L1Linear | LearnerKind::L1Logistic) {
                positive(&format!("{name}.lambda_rule"), l.lambda_rule)?;
            }
        }
        if matches!(e.propensity.kind, LearnerKind::L1Linear) {
            return Err(CliError::Config("estimation.propensity cannot be l1_linear".into()));
        }
        if matches!(e.outcome.kind, LearnerKind::L1Logistic) {
            return Err(CliError::Config("estimation.outcome cannot be l1_logistic".into()));
        }
        match command {
            "simulate" => {
                let s = &self.simulate;
                if s.reps < 2 {
                    return Err(CliError::Config(format!("simulate.reps must be at least 2, got {}", s.reps)));
                }
                if s.cells.is_empty() || s.estimators.is_empty() {
                    return Err(CliError::Config("simulate.cells and simulate.estimators must be non-empty".into()));
                }
                if !(0.0..1.0).contains(&s.rho) {
                    return Err(CliError::Config(format!("simulate.rho must be in [0, 1), got {}", s.rho)));
                }
                if s.grid_points == 0 {
                    return Err(CliError::Config("simulate.grid_points must be positive".into()));
                }
                for c in &s.cells {
                    if c.n < 20 || c.p == 0 {
                        return Err(CliError::Config(format!("cell n={} p={} needs n >= 20 and p >= 1", c.n, c.p)));
                    }
                    if let Some(&j) = s.coords.iter().find(|&&j| j == 0 || j > c.p) {
                        return Err(CliError::Config(format!("simulate.coords entry {j} is outside 1..={}", c.p)));
                    }
                }
            }
            _ => {
                let path = self.data.path.as_ref().ok_or_else(|| CliError::Config("data.path is required".into()))?;
                if !path.is_file() {
                    return Err(CliError::Config(format!("data file {} does not exist", path.display())));
                }
                if self.targets.coords.contains(&0) {
                    return Err(CliError::Config("targets.coords are one-based".into()));
                }
                if self.targets.grid.is_empty() && self.targets.grid_points == 0 {
                    return Err(CliError::Config("targets.grid_points must be positive".into()));
                }
                if let XColumns::List(cols) = &self.data.schema.x {
                    if cols.is_empty() {
                        return Err(CliError::Config("data.schema.x lists no columns".into()));
                    }
                }
                if let OutcomeColumns::Pair { post, pre } = &self.data.schema.outcome {
                    if post == pre {
                        return Err(CliError::Config("outcome post and pre columns must differ".into()));
                    }
                }
            }
        }
        Ok(())
    }
}
