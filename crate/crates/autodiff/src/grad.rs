//! Symbolic reverse-mode differentiation.
//!
//! The reverse pass appends ordinary nodes to the same graph, so a gradient
//! is itself an expression and can be differentiated again.

use std::collections::HashMap;

use crate::error::AdError;
use crate::eval::Bindings;
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::Tensor;

impl Graph {
    /// Appends the reverse pass of scalar `output` and returns one gradient
    /// node per entry of `wrt`, each shaped like its leaf.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, AdError> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        if self.numel(output) != 1 {
            return Err(AdError::NonScalar {
                node: output.0,
                shape: self.shape(output).to_vec(),
            });
        }

        let limit = output.0 + 1;
        let mut depends = vec![false; limit];
        for &w in wrt {
            if w.0 < limit {
                depends[w.0] = true;
            }
        }
        for i in 0..limit {
            if !depends[i] && self.nodes[i].op.inputs().iter().any(|j| depends[j.0]) {
                depends[i] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; limit];
        let seed_shape = self.shape(output).to_vec();
        adjoint[output.0] = Some(self.constant(Tensor::ones(&seed_shape)));

        for i in (0..limit).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let y = NodeId(i);
            let contributions = self.vjp(&op, y, g, &depends)?;
            for (j, c) in contributions {
                adjoint[j.0] = Some(match adjoint[j.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of one node for each input that needs an adjoint.
    fn vjp(
        &mut self,
        op: &Op,
        y: NodeId,
        g: NodeId,
        depends: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, AdError> {
        let d = |id: &NodeId| depends[id.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf { .. } | Op::Constant(_) => {}
            Op::Add(a, b) => {
                if d(a) {
                    out.push((*a, g));
                }
                if d(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if d(a) {
                    out.push((*a, g));
                }
                if d(b) {
                    out.push((*b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if d(a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if d(b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Div(a, b) => {
                if d(a) {
                    out.push((*a, self.div(g, *b)?));
                }
                if d(b) {
                    // d(a/b)/db = -y/b
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, *b)?;
                    out.push((*b, self.neg(q)?));
                }
            }
            Op::Neg(x) => out.push((*x, self.neg(g)?)),
            Op::Exp(x) => out.push((*x, self.mul(g, y)?)),
            Op::Log(x) => out.push((*x, self.div(g, *x)?)),
            Op::Tanh(x) => {
                let y2 = self.mul(y, y)?;
                let dy = self.affine(y2, -1.0, 1.0)?;
                out.push((*x, self.mul(g, dy)?));
            }
            Op::Sigmoid(x) => {
                let one_minus = self.affine(y, -1.0, 1.0)?;
                let dy = self.mul(y, one_minus)?;
                out.push((*x, self.mul(g, dy)?));
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(*x)?;
                out.push((*x, self.mul(g, s)?));
            }
            Op::Affine { x, scale, .. } => out.push((*x, self.affine(g, *scale, 0.0)?)),
            Op::Sum { x, .. } => {
                let shape = self.shape(*x).to_vec();
                out.push((*x, self.broadcast(g, &shape)?));
            }
            Op::Mean { x, .. } => {
                let shape = self.shape(*x).to_vec();
                let count = (self.numel(*x) / self.numel(y).max(1)) as f64;
                let b = self.broadcast(g, &shape)?;
                out.push((*x, self.scale(b, 1.0 / count)?));
            }
            Op::Broadcast { x } => {
                let from = self.shape(*x).to_vec();
                let to = self.shape(y).to_vec();
                let axes: Vec<usize> = (0..from.len()).filter(|&a| from[a] != to[a]).collect();
                out.push((*x, self.sum(g, &axes)?));
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                out.push((*x, self.reshape(g, &shape)?));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for inp in inputs {
                    let len = self.shape(*inp)[*axis];
                    if d(inp) {
                        out.push((*inp, self.slice(g, *axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full = self.shape(*x)[*axis];
                let len = self.shape(y)[*axis];
                out.push((*x, self.pad(g, *axis, *start, full - start - len)?));
            }
            Op::Pad { x, axis, before } => {
                let len = self.shape(*x)[*axis];
                out.push((*x, self.slice(g, *axis, *before, len)?));
            }
            Op::Conv2d { x, w } => {
                if d(x) {
                    let wf = self.kernel_flip(*w)?;
                    out.push((*x, self.conv2d(g, wf)?));
                }
                if d(w) {
                    let k = self.shape(*w)[2];
                    out.push((*w, self.conv_weight_grad(*x, g, k)?));
                }
            }
            Op::ConvWeightGrad { x, gy, .. } => {
                // y = sum_n gy_n (*) x_n; g has the kernel's shape.
                if d(x) {
                    let gf = self.kernel_flip(g)?;
                    out.push((*x, self.conv2d(*gy, gf)?));
                }
                if d(gy) {
                    out.push((*gy, self.conv2d(*x, g)?));
                }
            }
            Op::KernelFlip(w) => out.push((*w, self.kernel_flip(g)?)),
            Op::MatMul(a, b) => {
                if d(a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if d(b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(x) => out.push((*x, self.transpose(g)?)),
        }
        Ok(out
            .into_iter()
            .filter(|(j, _)| depends[j.0])
            .collect())
    }

    /// Evaluates the gradients of scalar `output` with respect to `wrt`.
    ///
    /// The graph itself is left untouched; the reverse pass is built on a copy.
    pub fn gradient(
        &self,
        output: NodeId,
        wrt: &[NodeId],
        bindings: &Bindings<'_>,
    ) -> Result<HashMap<NodeId, Tensor>, AdError> {
        for &w in wrt {
            self.check(w)?;
            if self.leaf_name(w).is_none() {
                return Err(AdError::NotALeaf { node: w.0 });
            }
        }
        let mut g = self.clone();
        let grads = g.grad(output, wrt)?;
        let values = g.evaluate(bindings, &grads)?;
        Ok(wrt.iter().copied().zip(values).collect())
    }

    /// Gradients, with respect to `wrt`, of the Euclidean norm of
    /// `d output / d input`. The input gradient is built symbolically and
    /// then differentiated a second time.
    pub fn gradient_of_gradient_norm(
        &self,
        output: NodeId,
        input: NodeId,
        wrt: &[NodeId],
        bindings: &Bindings<'_>,
    ) -> Result<(f64, HashMap<NodeId, Tensor>), AdError> {
        if self.leaf_name(input).is_none() {
            return Err(AdError::NotALeaf { node: input.0 });
        }
        for &w in wrt {
            self.check(w)?;
            if self.leaf_name(w).is_none() {
                return Err(AdError::NotALeaf { node: w.0 });
            }
        }
        let mut g = self.clone();
        let gx = g.grad(output, &[input])?[0];
        let sq = g.square(gx)?;
        let sumsq = g.sum_all(sq)?;
        let sumsq_value = g.evaluate(bindings, &[sumsq])?[0].data()[0];
        if sumsq_value == 0.0 {
            return Err(AdError::ZeroGradientNorm);
        }
        let norm = g.sqrt(sumsq)?;
        let grads = g.grad(norm, wrt)?;
        let mut targets = vec![norm];
        targets.extend_from_slice(&grads);
        let mut values = g.evaluate(bindings, &targets)?;
        let norm_value = values.remove(0).data()[0];
        Ok((norm_value, wrt.iter().copied().zip(values).collect()))
    }
}
