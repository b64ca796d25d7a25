//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation computes its value
//! eagerly and records how to push gradients back to its inputs; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse. Trainable
//! tensors live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`], so one store can serve many graphs (one per batch).

mod graph;
mod optim;
mod param;
mod tensor;

use thiserror::Error;

pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig, LrSchedule};
pub use param::{Linear, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("{0}")]
    Invalid(String),
}
