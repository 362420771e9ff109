use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("row {row}: labeled unit (r=1) has no outcome")]
    MissingOutcomeOnLabeled { row: usize },
    #[error("row {row}: unlabeled unit (r=0) carries an outcome")]
    OutcomePresentOnUnlabeled { row: usize },
    #[error("row {row}: expected {expected} covariates, found {found}")]
    RaggedCovariates {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("no {0} units in the dataset")]
    EmptyStratum(&'static str),
    #[error("row {row}: {what}")]
    InvalidRow { row: usize, what: String },
    #[error("ACP column is present on some units but not in a recognised layout ({0})")]
    InconsistentAcp(String),
    #[error("ACP column required: {0}")]
    MissingAcp(String),
    #[error("fold count {k} exceeds the smaller stratum size {limit}")]
    KTooLarge { k: usize, limit: usize },
    #[error("fold count {0} is below 2")]
    KTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training labels are a single class")]
    DegenerateLabels,
    #[error("design matrix is singular even after ridge fallback")]
    SingularDesign,
    #[error("too few training units: {got} < {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("estimating-equation Jacobian is singular")]
    SingularJacobian,
    #[error("matrix is singular")]
    SingularMatrix,
    #[error("negative variance {0:e} along the requested direction")]
    NegativeVariance(f64),
    #[error("ACP column required: variant {variant} is incompatible with scenario {scenario}")]
    ScenarioMismatch { variant: String, scenario: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Errors caused by the input data or configuration, as opposed to numerical failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NoConvergence { .. }
                | Error::SingularJacobian
                | Error::SingularMatrix
                | Error::SingularDesign
                | Error::NegativeVariance(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
