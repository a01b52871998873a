use thiserror::Error;

/// Errors produced by divergence evaluation, estimation and testing.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LsdError {
    #[error("bad parameter: {0}")]
    BadParameter(String),

    #[error("degenerate tuning (beta={beta}, gamma={gamma}): {reason}")]
    DegenerateTuning {
        beta: f64,
        gamma: f64,
        reason: String,
    },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no data rows")]
    EmptyData,

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl LsdError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LsdError::DegenerateTuning { .. }
                | LsdError::SingularMatrix(_)
                | LsdError::NoConvergence(_)
        )
    }
}

impl From<std::io::Error> for LsdError {
    fn from(e: std::io::Error) -> Self {
        LsdError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LsdError>;
