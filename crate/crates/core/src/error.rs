use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which nuisance learner failed inside a cross-fitting fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuisanceKind {
    Propensity,
    OutcomeTreated,
    OutcomeControl,
}

impl std::fmt::Display for NuisanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NuisanceKind::Propensity => "propensity",
            NuisanceKind::OutcomeTreated => "outcome_treated",
            NuisanceKind::OutcomeControl => "outcome_control",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-finite value at row {row}, column `{col}`")]
    NonFiniteValue { row: usize, col: String },
    #[error("could not parse value at row {row}, column `{col}`: {value:?}")]
    ParseValue { row: usize, col: String, value: String },
    #[error("treatment column is degenerate (all rows are {0})")]
    DegenerateTreatment(u8),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("smooth covariate has no variation")]
    DegenerateZ,
    #[error("sieve basis with {k} columns needs more than {n} rows")]
    BasisTooLarge { k: usize, n: usize },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("l1-minimization problem infeasible at bound {bound}")]
    Infeasible { bound: f64 },
    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("stratum D={stratum} has {count} rows, need at least {needed}")]
    InsufficientStratum { stratum: u8, count: usize, needed: usize },
    #[error("learner for {which} failed in fold {fold}: {reason}")]
    LearnerFailure { fold: usize, which: NuisanceKind, reason: String },
    #[error("invalid learner: {0}")]
    InvalidLearner(String),

    #[error("semiparametric baseline infeasible: n={n} does not exceed {regressors} regressors")]
    SemiDidInfeasible { n: usize, regressors: usize },
    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("linear functional is the zero vector")]
    ZeroXi,
    #[error("sieve score matrix is singular (condition number {0:.3e})")]
    SingularSigmaF(f64),

    #[error("all {0} Monte Carlo replications failed")]
    AllRepsFailed(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the input data rather than numerical trouble.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::NonFiniteValue { .. }
                | Error::ParseValue { .. }
                | Error::DegenerateTreatment(_)
                | Error::InvalidSample(_)
                | Error::DimensionMismatch(_)
                | Error::DegenerateZ
                | Error::BasisTooLarge { .. }
                | Error::InsufficientStratum { .. }
                | Error::Csv(_)
                | Error::Io { .. }
        )
    }
}
