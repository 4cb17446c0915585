use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DldError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DldError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("infeasible CTC target: {frames} frames cannot emit {labels} labels with {repeats} adjacent repeats")]
    InfeasibleTarget {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DldError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        DldError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DldError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        DldError::Format {
            kind,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DldError::Config(_) | DldError::Contract(_) | DldError::Shape { .. } => 2,
            DldError::InfeasibleTarget { .. } => 2,
            DldError::Io { .. } | DldError::Format { .. } => 3,
            DldError::NonFinite { .. } | DldError::Diverged { .. } => 4,
        }
    }
}
