use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: dimension mismatch on {axis}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        axis: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{op}: shapes {left:?} and {right:?} differ")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid geometry: {reason}")]
    InvalidGeometry { op: &'static str, reason: String },

    #[error("batch_norm: channel statistics over a single element are degenerate")]
    DegenerateBatch,

    #[error("{op}: invalid parameter {name} = {value}")]
    InvalidParameter {
        op: &'static str,
        name: &'static str,
        value: f64,
    },

    #[error("{op}: no pixels are counted by the loss mask")]
    EmptyLoss { op: &'static str },

    #[error("{op}: label {label} at index {index} is outside 0..{classes}")]
    Label {
        op: &'static str,
        label: u8,
        index: usize,
        classes: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
}
