//! Expression graph construction with eager shape inference.
//!
//! Nodes are appended in topological order: every node's inputs have smaller
//! ids. Broadcasting is never implicit; elementwise binary ops require equal
//! shapes and [`Graph::broadcast`] must be used to expand size-1 axes.

use std::sync::Arc;

use crate::error::AdError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf { name: String },
    Constant(Arc<Tensor>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    /// `scale * x + shift` with constant coefficients.
    Affine { x: NodeId, scale: f64, shift: f64 },
    /// Sum over `axes`, keeping them as size-1 axes.
    Sum { x: NodeId, axes: Vec<usize> },
    /// Mean over `axes`, keeping them as size-1 axes.
    Mean { x: NodeId, axes: Vec<usize> },
    /// Expand size-1 axes to `shape` (same rank).
    Broadcast { x: NodeId },
    Reshape { x: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    /// Zero padding along one axis; the adjoint of `Slice`.
    Pad { x: NodeId, axis: usize, before: usize },
    /// Stride-1, zero "same"-padded 2-D cross-correlation.
    /// `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]` with odd `k`.
    Conv2d { x: NodeId, w: NodeId },
    /// Weight gradient of `Conv2d`: `gy: [N, Co, H, W]` against `x` gives `[Co, Ci, k, k]`.
    ConvWeightGrad { x: NodeId, gy: NodeId, k: usize },
    /// `[Co, Ci, k, k] -> [Ci, Co, k, k]` with both spatial axes reversed.
    KernelFlip(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Affine { .. } => "affine",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::KernelFlip(_) => "kernel_flip",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::KernelFlip(x)
            | Op::Transpose(x) => vec![*x],
            Op::Affine { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Broadcast { x }
            | Op::Reshape { x }
            | Op::Slice { x, .. }
            | Op::Pad { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, w } => vec![*x, *w],
            Op::ConvWeightGrad { x, gy, .. } => vec![*x, *gy],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

/// An append-only expression graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.shape(id).iter().product()
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<(), AdError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AdError::UnknownNode { node: id.0 })
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> AdError {
        AdError::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        self.push(Op::Leaf { name: name.into() }, shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(Arc::new(value)), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes.get(id.0)?.op {
            Op::Leaf { name } => Some(name),
            _ => None,
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId, AdError> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    fn unary(&mut self, x: NodeId, op: Op) -> Result<NodeId, AdError> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(a, b, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary(a, b, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.unary(x, Op::Neg(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.unary(x, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.unary(x, Op::Log(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.unary(x, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.unary(x, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.unary(x, Op::Softplus(x))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId, AdError> {
        self.unary(x, Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId, AdError> {
        self.affine(x, scale, 0.0)
    }

    fn reduced_shape(&self, x: NodeId, axes: &[usize], op: &'static str) -> Result<Vec<usize>, AdError> {
        let mut shape = self.shape(x).to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(self.shape_err(op, format!("axis {a} out of range for {shape:?}")));
            }
            shape[a] = 1;
        }
        Ok(shape)
    }

    pub fn sum(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId, AdError> {
        self.check(x)?;
        let shape = self.reduced_shape(x, axes, "sum")?;
        Ok(self.push(
            Op::Sum {
                x,
                axes: axes.to_vec(),
            },
            shape,
        ))
    }

    /// Sum over every axis, keeping rank.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.check(x)?;
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId, AdError> {
        self.check(x)?;
        let shape = self.reduced_shape(x, axes, "mean")?;
        Ok(self.push(
            Op::Mean {
                x,
                axes: axes.to_vec(),
            },
            shape,
        ))
    }

    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        self.check(x)?;
        let from = self.shape(x);
        let ok = from.len() == shape.len()
            && from.iter().zip(shape).all(|(&f, &t)| f == t || f == 1);
        if !ok {
            return Err(self.shape_err("broadcast", format!("cannot expand {from:?} to {shape:?}")));
        }
        if from == shape {
            return Ok(x);
        }
        Ok(self.push(Op::Broadcast { x }, shape.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AdError> {
        self.check(x)?;
        if self.numel(x) != shape.iter().product::<usize>() {
            return Err(self.shape_err(
                "reshape",
                format!("{:?} has a different element count than {shape:?}", self.shape(x)),
            ));
        }
        if self.shape(x) == shape {
            return Ok(x);
        }
        Ok(self.push(Op::Reshape { x }, shape.to_vec()))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, AdError> {
        let first = *inputs.first().ok_or(AdError::EmptyInput)?;
        for &i in inputs {
            self.check(i)?;
        }
        let mut shape = self.shape(first).to_vec();
        if axis >= shape.len() {
            return Err(self.shape_err("concat", format!("axis {axis} out of range for {shape:?}")));
        }
        shape[axis] = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible = s.len() == shape.len()
                && s.iter().enumerate().all(|(d, &n)| d == axis || n == shape[d]);
            if !compatible {
                return Err(self.shape_err(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", s, self.shape(first)),
                ));
            }
            shape[axis] += s[axis];
        }
        if inputs.len() == 1 {
            return Ok(first);
        }
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, AdError> {
        self.check(x)?;
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(self.shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        shape[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start }, shape))
    }

    pub fn pad(&mut self, x: NodeId, axis: usize, before: usize, after: usize) -> Result<NodeId, AdError> {
        self.check(x)?;
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(self.shape_err("pad", format!("axis {axis} out of range for {shape:?}")));
        }
        shape[axis] += before + after;
        Ok(self.push(Op::Pad { x, axis, before }, shape))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, AdError> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x);
        let ws = self.shape(w);
        let ok = xs.len() == 4 && ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3] && ws[2] % 2 == 1;
        if !ok {
            return Err(self.shape_err("conv2d", format!("input {xs:?} with kernel {ws:?}")));
        }
        let shape = vec![xs[0], ws[0], xs[2], xs[3]];
        Ok(self.push(Op::Conv2d { x, w }, shape))
    }

    pub fn conv_weight_grad(&mut self, x: NodeId, gy: NodeId, k: usize) -> Result<NodeId, AdError> {
        self.check(x)?;
        self.check(gy)?;
        let xs = self.shape(x);
        let gs = self.shape(gy);
        let ok = xs.len() == 4
            && gs.len() == 4
            && xs[0] == gs[0]
            && xs[2] == gs[2]
            && xs[3] == gs[3]
            && k % 2 == 1;
        if !ok {
            return Err(self.shape_err(
                "conv2d_weight_grad",
                format!("input {xs:?} with output gradient {gs:?}, k={k}"),
            ));
        }
        let shape = vec![gs[1], xs[1], k, k];
        Ok(self.push(Op::ConvWeightGrad { x, gy, k }, shape))
    }

    pub fn kernel_flip(&mut self, w: NodeId) -> Result<NodeId, AdError> {
        self.check(w)?;
        let s = self.shape(w);
        if s.len() != 4 || s[2] != s[3] {
            return Err(self.shape_err("kernel_flip", format!("kernel {s:?}")));
        }
        let shape = vec![s[1], s[0], s[2], s[3]];
        Ok(self.push(Op::KernelFlip(w), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(self.shape_err("transpose", format!("{s:?} is not a matrix")));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(x), shape))
    }

    /// `sqrt(x)` expressed as `exp(0.5 * log(x))`.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let l = self.log(x)?;
        let h = self.scale(l, 0.5)?;
        self.exp(h)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        self.mul(x, x)
    }
}
