use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate ray: source and detector points coincide")]
    InvalidRay,

    #[error("index out of range: {what} = {index}, limit {limit}")]
    Bounds {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("dimension mismatch in {block}: expected {expected}, got {actual}")]
    Dimension {
        block: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid material {name}: {reason}")]
    InvalidMaterial { name: String, reason: String },

    #[error("mask for region {region} is empty")]
    EmptyMask { region: usize },

    #[error("invalid pipe spec: {0}")]
    InvalidSpec(String),

    #[error("solver stopped after {iterations} iterations with relative residual {residual:.3e}")]
    IterationLimit { iterations: usize, residual: f64 },

    #[error("autocorrelation undefined for a constant chain")]
    ConstantChain,

    #[error("invalid array file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dimension(block: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            block: block.into(),
            expected,
            actual,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::IterationLimit { .. } | Error::ConstantChain => 3,
            _ => 2,
        }
    }
}
