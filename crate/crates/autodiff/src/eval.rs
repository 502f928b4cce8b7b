//! Graph evaluation.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::AdError;
use crate::graph::{Graph, NodeId, Op};
use crate::kernels;
use crate::tensor::Tensor;

/// Values bound to the leaves of a graph for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<NodeId, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Owned(value));
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.values.get(&leaf).map(|c| c.as_ref())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Fail on the first node that produces a NaN or infinity.
    pub check_finite: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { check_finite: true }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

impl Graph {
    /// Evaluates `outputs` with the default options (non-finite values are errors).
    pub fn evaluate(&self, bindings: &Bindings<'_>, outputs: &[NodeId]) -> Result<Vec<Tensor>, AdError> {
        self.evaluate_with(bindings, outputs, EvalOptions::default())
    }

    pub fn evaluate_with(
        &self,
        bindings: &Bindings<'_>,
        outputs: &[NodeId],
        opts: EvalOptions,
    ) -> Result<Vec<Tensor>, AdError> {
        for &o in outputs {
            self.check(o)?;
        }
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        for &o in outputs {
            needed[o.0] = true;
        }
        let mut uses = vec![0usize; n];
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            for inp in self.nodes[i].op.inputs() {
                needed[inp.0] = true;
                uses[inp.0] += 1;
            }
        }
        for &o in outputs {
            uses[o.0] += 1;
        }

        let mut values: Vec<Option<Cow<'_, Tensor>>> = vec![None; n];
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let value: Cow<'_, Tensor> = match &node.op {
                Op::Leaf { name } => {
                    let bound = bindings.values.get(&NodeId(i)).ok_or_else(|| AdError::Unbound {
                        node: i,
                        name: name.clone(),
                    })?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(AdError::BindingShape {
                            node: i,
                            name: name.clone(),
                            got: bound.shape().to_vec(),
                            expected: node.shape.clone(),
                        });
                    }
                    Cow::Borrowed(bound.as_ref())
                }
                Op::Constant(t) => Cow::Borrowed(&**t),
                op => {
                    let get = |id: &NodeId| -> &Tensor { values[id.0].as_deref().expect("input evaluated") };
                    Cow::Owned(self.apply(op, &node.shape, &get))
                }
            };
            if opts.check_finite && !value.is_finite() {
                return Err(AdError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            for inp in node.op.inputs() {
                uses[inp.0] -= 1;
                if uses[inp.0] == 0 {
                    values[inp.0] = None;
                }
            }
            values[i] = Some(value);
        }
        Ok(outputs
            .iter()
            .map(|o| values[o.0].as_deref().expect("output evaluated").clone())
            .collect())
    }

    fn apply<'v>(&self, op: &Op, shape: &[usize], get: &impl Fn(&NodeId) -> &'v Tensor) -> Tensor {
        match op {
            Op::Leaf { .. } => unreachable!("leaves are bound, not computed"),
            Op::Constant(_) => unreachable!("constants are borrowed"),
            Op::Add(a, b) => elementwise(get(a), get(b), |x, y| x + y),
            Op::Sub(a, b) => elementwise(get(a), get(b), |x, y| x - y),
            Op::Mul(a, b) => elementwise(get(a), get(b), |x, y| x * y),
            Op::Div(a, b) => elementwise(get(a), get(b), |x, y| x / y),
            Op::Neg(x) => get(x).map(|v| -v),
            Op::Exp(x) => get(x).map(f64::exp),
            Op::Log(x) => get(x).map(f64::ln),
            Op::Tanh(x) => get(x).map(f64::tanh),
            Op::Sigmoid(x) => get(x).map(kernels::sigmoid),
            Op::Softplus(x) => get(x).map(kernels::softplus),
            Op::Affine { x, scale, shift } => {
                let (s, b) = (*scale, *shift);
                get(x).map(|v| s * v + b)
            }
            Op::Sum { x, .. } => kernels::sum_to(get(x), shape),
            Op::Mean { x, .. } => {
                let x = get(x);
                let count = (x.numel() / shape.iter().product::<usize>().max(1)) as f64;
                kernels::sum_to(x, shape).map(|v| v / count)
            }
            Op::Broadcast { x } => kernels::broadcast_to(get(x), shape),
            Op::Reshape { x } => get(x).clone().reshape(shape.to_vec()).expect("reshape"),
            Op::Concat { inputs, axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(get).collect();
                kernels::concat(&parts, *axis, shape)
            }
            Op::Slice { x, axis, start } => kernels::slice(get(x), *axis, *start, shape),
            Op::Pad { x, axis, before } => kernels::pad(get(x), *axis, *before, shape),
            Op::Conv2d { x, w } => kernels::conv2d(get(x), get(w)),
            Op::ConvWeightGrad { x, gy, k } => kernels::conv_weight_grad(get(x), get(gy), *k),
            Op::KernelFlip(w) => kernels::kernel_flip(get(w)),
            Op::MatMul(a, b) => kernels::matmul(get(a), get(b)),
            Op::Transpose(x) => kernels::transpose(get(x)),
        }
    }
}
