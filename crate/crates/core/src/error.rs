use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum CdapError {
    /// A malformed line in one of the text formats.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input data or configuration violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Operands of a tensor operation have incompatible shapes.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// A caller broke a precondition of an operation.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The episode sampler could not satisfy the requested N-way K-shot layout.
    #[error("sampling failed for class `{class}`: {message}")]
    Sampling { class: String, message: String },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at step {step} (episode {episode}): {message}")]
    Divergence {
        step: usize,
        episode: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CdapError {
    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Self::Validation(message.into())
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Self::Contract(message.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } | Self::Validation(_) | Self::Contract(_) | Self::Shape { .. } => 2,
            Self::Sampling { .. } => 2,
            Self::Divergence { .. } => 3,
            Self::Io(_) => 1,
        }
    }
}

pub type Result<T, E = CdapError> = std::result::Result<T, E>;
