use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid case: {0}")]
    Validation(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("grid is not observable: {0}")]
    Observability(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {location}: {msg}")]
    Numeric { location: String, msg: String },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("contradictory label constraints: meters {0:?} are required both attacked and normal")]
    Contradiction(Vec<usize>),

    #[error("attack pool too small: requested {requested}, only {eligible} eligible samples")]
    Pool { requested: usize, eligible: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Cell {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Model(_) => "model",
            Error::Observability(_) => "observability",
            Error::Precondition(_) => "precondition",
            Error::Shape(_) => "shape",
            Error::Numeric { .. } => "numeric",
            Error::Training { .. } => "training",
            Error::Contradiction(_) => "contradiction",
            Error::Pool { .. } => "pool",
            Error::Config(_) => "config",
            Error::Cell { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
