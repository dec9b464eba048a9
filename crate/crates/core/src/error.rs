use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum JigsawError {
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("house generation failed: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("house `{house_id}` failed validation: {message}")]
    Validation { house_id: String, message: String },

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl JigsawError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        JigsawError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad input data (malformed files, invariant violations).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            JigsawError::Parse { .. } | JigsawError::Validation { .. } | JigsawError::Json(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, JigsawError::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, JigsawError>;
