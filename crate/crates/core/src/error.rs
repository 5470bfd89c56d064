use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("treatment is not constant within cluster `{0}`")]
    TreatmentNotClusterConstant(String),
    #[error("missing covariate value at row {row}, column `{col}`")]
    MissingCovariateCell { row: usize, col: String },
    #[error("duplicate unit id `{0}`")]
    DuplicateUnitId(String),
    #[error("invalid value `{value}` at row {row}, column `{col}`")]
    InvalidValue { row: usize, col: String, value: String },
    #[error("unit at row {0} has no subcluster id but the data are three-level")]
    MissingSubcluster(usize),
    #[error("dataset has no units")]
    EmptyDataset,

    #[error("formula syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("duplicate term `{0}` in formula")]
    DuplicateTerm(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{variable}` varies below the {level} level")]
    LevelViolation { variable: String, level: String },

    #[error("quasi-separation: coefficient magnitude {0:.1} exceeds the divergence bound")]
    Separation(f64),
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("{what} did not converge in {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },
    #[error("EM did not converge in {} iterations", .0.iterations)]
    EmNotConverged(Box<crate::em::EmFit>),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("moment targets lie outside the convex hull of the observed constraint values")]
    NoInteriorSolution,
    #[error("no observed outcome with positive weight in arm A={0}")]
    ArmEmpty(u8),
    #[error("working correlation is not positive definite")]
    NonPositiveDefiniteCorrelation,
    #[error("too few observed pairs to estimate the working correlation")]
    TooFewPairs,
    #[error("all {0} bootstrap replicates failed")]
    AllReplicatesFailed(usize),

    #[error("method {method} requires {what}")]
    MissingInput { method: String, what: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Io(_) | Csv(_) | MissingColumn(_) | TreatmentNotClusterConstant(_)
            | MissingCovariateCell { .. } | DuplicateUnitId(_) | InvalidValue { .. }
            | MissingSubcluster(_) | EmptyDataset | UnknownVariable(_) | LevelViolation { .. } => {
                ErrorKind::Data
            }
            Syntax { .. } | DuplicateTerm(_) | MissingInput { .. } | Config(_) => ErrorKind::Config,
            _ => ErrorKind::Numerical,
        }
    }
}
