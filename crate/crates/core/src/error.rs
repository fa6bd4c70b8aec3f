use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("shape too small: {shape:?} (minimum {min} per axis)")]
    ShapeTooSmall { shape: (usize, usize), min: usize },

    #[error("expected {expected} {what}, found {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("non-finite iterate at iteration {iteration} after {step} step")]
    NonFinite { iteration: usize, step: &'static str },

    #[error("infeasible acceleration {acceleration}: {reason}")]
    InfeasibleAcceleration { acceleration: f64, reason: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("zero reference norm")]
    ZeroReference,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("png encoding: {0}")]
    Image(#[from] image::ImageError),
}

pub(crate) fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, found })
    }
}
