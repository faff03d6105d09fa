use std::io;

use thiserror::Error;

pub type Result<T, E = KinError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KinError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stat table cell ({row}, {col}) of layer {layer} was already written")]
    DoubleWrite { layer: usize, row: usize, col: usize },

    #[error("coordinate ({row}, {col}) is outside the {rows}x{cols} stat table")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("layer {layer}: caching pass incomplete, unfilled cells: {cells:?}")]
    Unfilled {
        layer: usize,
        cells: Vec<(usize, usize)>,
    },

    #[error("{mode} normalization requires the {phase} phase to run first")]
    MissingPhase { mode: &'static str, phase: &'static str },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unexpected parameter `{0}`")]
    UnexpectedParameter(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("full-image normalization needs an estimated {needed} bytes, over the budget of {budget} bytes")]
    OverBudget { needed: u64, budget: u64 },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}
