use thiserror::Error;

pub type Result<T> = std::result::Result<T, OsbmError>;

#[derive(Debug, Error)]
pub enum OsbmError {
    #[error("matrix of dimension {dim} is not positive definite after jitter {jitter:e}")]
    SingularMatrix { dim: usize, jitter: f64 },

    #[error("non-finite value in {stage} at outer iteration {iteration}")]
    NonFinite { stage: &'static str, iteration: usize },

    #[error("malformed line {line}: {content:?}")]
    MalformedLine { line: usize, content: String },

    #[error("self loop on vertex {vertex} at line {line}")]
    SelfLoop { line: usize, vertex: usize },

    #[error("graph has no vertices")]
    EmptyGraph,

    #[error("model selection failed: {0}")]
    SelectionFailed(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl OsbmError {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            OsbmError::SingularMatrix { .. } | OsbmError::NonFinite { .. } => 3,
            OsbmError::SelectionFailed(_) => 4,
            _ => 2,
        }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            OsbmError::SingularMatrix { .. } => "singular_matrix",
            OsbmError::NonFinite { .. } => "non_finite",
            OsbmError::MalformedLine { .. } => "malformed_line",
            OsbmError::SelfLoop { .. } => "self_loop",
            OsbmError::EmptyGraph => "empty_graph",
            OsbmError::SelectionFailed(_) => "selection_failed",
            OsbmError::InvalidInput(_) => "invalid_input",
            OsbmError::Io(_) => "io",
        }
    }
}
