use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("unknown datatype `{0}`")]
    UnknownDataType(String),

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("invalid operator shape: {0}")]
    Shape(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("invalid hardware description: {0}")]
    Hardware(String),

    #[error("TPS is undefined: per-token time is zero (empty workload and no dispatch latency)")]
    UndefinedTps,

    #[error("malformed stats file: {0}")]
    Import(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation errors are user mistakes; everything else is an internal or
    /// environment failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Syntax { .. }
                | Error::UnknownKeys(_)
                | Error::Constraint(_)
                | Error::UnknownDataType(_)
                | Error::UnknownVariant(_)
                | Error::Shape(_)
                | Error::Scenario(_)
                | Error::Hardware(_)
                | Error::UndefinedTps
                | Error::Import(_)
        )
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
