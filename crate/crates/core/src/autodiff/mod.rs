//! Dense tensors, a reverse-mode tape, and the optimiser/scheduler pair used
//! by every trainable module.

mod optim;
mod tape;
mod tensor;

pub use optim::{PlateauConfig, PlateauScheduler, SgdMomentum};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("segment ids ({segments}) do not match a {rows}x{cols} input")]
    Segments { rows: usize, cols: usize, segments: usize },
    #[error("column slice {start}..{end} out of range for {cols} columns")]
    Slice { start: usize, end: usize, cols: usize },
    #[error("row index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root has no recorded operations")]
    Detached,
    #[error("{params} parameters but {grads} gradients/buffers")]
    ParamCount { params: usize, grads: usize },
    #[error("non-finite value in {0}")]
    NotFinite(&'static str),
    #[error("{0}")]
    Config(String),
}
