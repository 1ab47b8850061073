//! Dense tensors and reverse-mode differentiation over an explicit
//! expression graph.
//!
//! A [`Graph`] is built once per sentence: leaves are either named inputs
//! (bound at [`Graph::evaluate`] time) or constants. After a forward pass,
//! [`Graph::backward`] returns the gradient of a scalar root with respect to
//! every named input that appears in the graph.

mod check;
mod graph;
mod tensor;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use check::{finite_diff_check, FiniteDiffReport};
pub use graph::{logsumexp, Graph, NodeId, OpKind};
pub use tensor::Tensor;

/// Named tensors bound to the input leaves of a graph.
pub type Bindings = BTreeMap<String, Arc<Tensor>>;

/// Gradient of a scalar root per named input.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid tensor shape {shape:?}: {reason}")]
    BadShape { shape: Vec<usize>, reason: String },
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called before evaluate (node {0} has no value)")]
    NotEvaluated(usize),
    #[error("loss function is not deterministic: {0} vs {1} for identical parameters; fix dropout masks before checking gradients")]
    NonDeterministic(f64, f64),
    #[error("finite difference step must be positive, got {0}")]
    BadStep(f64),
}
