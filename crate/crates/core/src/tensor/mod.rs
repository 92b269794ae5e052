//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod graph;
pub mod kernels;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use graph::{Graph, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("softmax over an empty row")]
    EmptySoftmax,
    #[error("variable was not recorded in this graph")]
    ForeignVariable,
    #[error("graph was already backpropagated; record a new forward pass")]
    AlreadyBackpropagated,
    #[error("gradients requested before backward")]
    NotBackpropagated,
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite gradient in block {block} at flat index {index}")]
    NonFiniteGradient { block: usize, index: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::ShapeMismatch { op, left, right }
    }
}
