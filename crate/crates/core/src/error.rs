use std::path::PathBuf;

use crate::grid::GridSpec;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid {n_x}x{n_y}: both dimensions must be at least 1")]
    EmptyGrid { n_x: usize, n_y: usize },

    #[error("grid mismatch: expected {expected}, got {actual}")]
    SpecMismatch { expected: GridSpec, actual: GridSpec },

    #[error("buffer of length {len} does not match grid {spec} ({} pixels)", spec.len())]
    LengthMismatch { spec: GridSpec, len: usize },

    #[error("field is in the {actual} but the operation expects the {expected}")]
    WrongPlane {
        expected: crate::grid::Plane,
        actual: crate::grid::Plane,
    },

    #[error("value at pixel {index} is not a finite nonnegative real: {value}")]
    InvalidAmplitude { index: usize, value: f64 },

    #[error("grid of {pixels} pixels exceeds the naive DFT limit of {limit}")]
    OracleTooLarge { pixels: usize, limit: usize },

    #[error("degenerate {0}")]
    Degenerate(&'static str),

    #[error("non-finite value encountered at iteration {iter}")]
    NonFinite { iter: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid pattern: {0}")]
    Pattern(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
