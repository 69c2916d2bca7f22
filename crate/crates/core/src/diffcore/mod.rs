//! Dense tensors and a define-by-run reverse-mode differentiation record.
//!
//! The primitive set is closed: matmul, stride-1 2-D convolution, bias add,
//! ReLU, reshape, mean over the batch axis, mean-squared error and softmax
//! cross-entropy. Every reduction runs in a fixed serial order, so identical
//! inputs give bit-identical values and gradients.

mod record;
mod tensor;

pub use record::{ComputationRecord, Gradients, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("tensor shape {shape:?} does not hold {len} values")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("node {0} is not part of this record")]
    UnknownNode(usize),
    #[error("{op}: label {label} out of range for {classes} classes")]
    Label {
        op: &'static str,
        label: usize,
        classes: usize,
    },
}
