use std::fmt;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: ShapeDisplay,
        right: ShapeDisplay,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular channel transform (pivot {pivot:e})")]
    Singular { pivot: f64 },

    #[error("unsupported transform: {0}")]
    UnsupportedTransform(String),

    #[error("backward: {0}")]
    Graph(String),

    #[error("stability bound violated: time step {tau:e} exceeds {bound:e} ({scheme})")]
    Cfl {
        scheme: &'static str,
        tau: f64,
        bound: f64,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shape rendered as `[a, b, c]` in error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDisplay(pub Vec<usize>);

impl fmt::Display for ShapeDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: ShapeDisplay(left.to_vec()),
            right: ShapeDisplay(right.to_vec()),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
