use thiserror::Error;

/// Errors raised while building, evaluating or differentiating a graph.
///
/// Node identities are indices into the owning [`crate::Graph`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf `{name}` (node {node}) is not bound")]
    Unbound { node: usize, name: String },
    #[error("binding for leaf `{name}` (node {node}) has shape {got:?}, expected {expected:?}")]
    BindingShape {
        node: usize,
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("node {node} is not a leaf")]
    NotALeaf { node: usize },
    #[error("node {node} does not exist in this graph")]
    UnknownNode { node: usize },
    #[error("gradient needs a scalar output; node {node} has shape {shape:?}")]
    NonScalar { node: usize, shape: Vec<usize> },
    #[error("gradient norm is zero; the norm is not differentiable at this point")]
    ZeroGradientNorm,
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("empty input")]
    EmptyInput,
}
