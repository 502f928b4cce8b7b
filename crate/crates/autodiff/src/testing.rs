//! Test support: central finite differences and random composite graphs.
//!
//! Only compiled with the `testing` feature. Nothing here calls the reverse
//! pass; finite differences use forward evaluation alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Bindings, Graph, NodeId, Tensor};

/// Relative error with an absolute floor so near-zero entries compare sensibly.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

/// Evaluates scalar `output` with every leaf taken from `values`.
pub fn eval_scalar(graph: &Graph, output: NodeId, values: &[(NodeId, Tensor)]) -> f64 {
    let mut b = Bindings::new();
    for (id, t) in values {
        b.bind(*id, t);
    }
    graph.evaluate(&b, &[output]).expect("forward evaluation")[0].data()[0]
}

/// Central-difference gradient of scalar `output` with respect to leaf `values[which]`.
pub fn finite_diff(
    graph: &Graph,
    output: NodeId,
    values: &[(NodeId, Tensor)],
    which: usize,
    h: f64,
) -> Tensor {
    finite_diff_fn(&values[which].1, h, |perturbed| {
        let mut vals = values.to_vec();
        vals[which].1 = perturbed.clone();
        eval_scalar(graph, output, &vals)
    })
}

/// Central-difference gradient of an arbitrary scalar function of a tensor.
pub fn finite_diff_fn(at: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Sum of uniforms is plenty for test inputs.
        let s: f64 = (0..4).map(|_| rng.gen::<f64>() - 0.5).sum();
        s * scale * 1.7
    })
}

/// A randomly shaped scalar expression that uses every primitive at least once.
pub struct CompositeCase {
    pub graph: Graph,
    pub output: NodeId,
    /// Leaves with their bound values.
    pub leaves: Vec<(NodeId, Tensor)>,
    /// Leaf treated as "input" (image-like) for second-order checks.
    pub input: NodeId,
    /// Remaining leaves treated as parameters.
    pub params: Vec<NodeId>,
}

impl CompositeCase {
    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        for (id, t) in &self.leaves {
            b.bind(*id, t);
        }
        b
    }
}

pub fn random_composite(seed: u64) -> CompositeCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=2);
    let c2 = rng.gen_range(1..=3);
    let h = rng.gen_range(3..=4);
    let w = rng.gen_range(3..=4);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };

    let mut g = Graph::new();
    let x = g.leaf("x", &[n, c, h, w]);
    let wk = g.leaf("w", &[c2, c, k, k]);
    let b = g.leaf("b", &[1, c2, 1, 1]);
    let m = g.leaf("m", &[c2, c2]);
    let leaves = vec![
        (x, randn(&mut rng, &[n, c, h, w], 0.8)),
        (wk, randn(&mut rng, &[c2, c, k, k], 0.5)),
        (b, randn(&mut rng, &[1, c2, 1, 1], 0.3)),
        (m, randn(&mut rng, &[c2, c2], 0.6)),
    ];

    let e = || "graph construction";
    // conv + bias
    let y = g.conv2d(x, wk).expect(e());
    let bb = g.broadcast(b, &[n, c2, h, w]).expect(e());
    let y = g.add(y, bb).expect(e());
    let act = match rng.gen_range(0..3) {
        0 => g.tanh(y),
        1 => g.sigmoid(y),
        _ => g.softplus(y),
    }
    .expect(e());
    // gated branch: tanh(y) * sigmoid(act)
    let a = g.tanh(y).expect(e());
    let s = g.sigmoid(act).expect(e());
    let gated = g.mul(a, s).expect(e());
    // transposed convolution path and explicit weight-gradient op
    let wf = g.kernel_flip(wk).expect(e());
    let back = g.conv2d(gated, wf).expect(e());
    let wg = g.conv_weight_grad(x, gated, k).expect(e());
    let wg_term = g.mul(wg, wk).expect(e());
    let wg_sum = g.sum_all(wg_term).expect(e());
    // softplus, log, exp, div, neg, sub, affine
    let sp = g.softplus(back).expect(e());
    let shifted = g.affine(sp, 1.0, 0.5).expect(e());
    let lg = g.log(shifted).expect(e());
    let ex = g.exp(lg).expect(e());
    let ratio = g.div(x, ex).expect(e());
    let ng = g.neg(ratio).expect(e());
    let diff = g.sub(lg, ng).expect(e());
    // pad / slice / concat along width
    let padded = g.pad(diff, 3, 1, 2).expect(e());
    let sliced = g.slice(padded, 3, 1, w).expect(e());
    // constant checkerboard-style mask
    let mask = g.constant(Tensor::from_fn(&[n, c, h, w], |i| ((i + i / w) % 2) as f64));
    let sliced = g.mul(sliced, mask).expect(e());
    let cat = g.concat(&[sliced, x], 1).expect(e());
    let cat_mean = g.mean(cat, &[1]).expect(e());
    let cat_sq = g.square(cat_mean).expect(e());
    let cat_sum = g.sum(cat_sq, &[1, 2, 3]).expect(e());
    let cat_total = g.sum_all(cat_sum).expect(e());
    // matmul / transpose / reshape on pooled features
    let pooled = g.mean(gated, &[2, 3]).expect(e());
    let flat = g.reshape(pooled, &[n, c2]).expect(e());
    let mm = g.matmul(flat, m).expect(e());
    let mt = g.transpose(mm).expect(e());
    let mt_sq = g.mul(mt, mt).expect(e());
    let mm_sum = g.sum_all(mt_sq).expect(e());

    let cat_total = g.reshape(cat_total, &[]).expect(e());
    let mm_sum = g.reshape(mm_sum, &[]).expect(e());
    let wg_sum = g.reshape(wg_sum, &[]).expect(e());
    let t1 = g.add(cat_total, mm_sum).expect(e());
    let t2 = g.affine(wg_sum, 0.1, 0.0).expect(e());
    let output = g.add(t1, t2).expect(e());

    CompositeCase {
        graph: g,
        output,
        leaves,
        input: x,
        params: vec![wk, b, m],
    }
}
