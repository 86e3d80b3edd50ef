use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate batch: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("scene spec error: {0}")]
    Scene(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn shape(shape: &[usize], reason: impl Into<String>) -> Self {
        Error::Shape {
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
