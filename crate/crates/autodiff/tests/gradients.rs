use std::collections::BTreeSet;

use covflow_autodiff::testing::{finite_diff, finite_diff_fn, max_rel_err, random_composite};
use covflow_autodiff::{Bindings, Graph, NodeId, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Checks reverse-mode against central differences for every leaf.
fn check_all_leaves(g: &Graph, out: NodeId, leaves: &[(NodeId, Tensor)], tol: f64) {
    let mut b = Bindings::new();
    for (id, t) in leaves {
        b.bind(*id, t);
    }
    let ids: Vec<NodeId> = leaves.iter().map(|(i, _)| *i).collect();
    let grads = g.gradient(out, &ids, &b).unwrap();
    for (k, (id, _)) in leaves.iter().enumerate() {
        let fd = finite_diff(g, out, leaves, k, H);
        let err = max_rel_err(&grads[id], &fd, FLOOR);
        assert!(err < tol, "leaf {k}: relative error {err}");
    }
}

fn unary_case(build: impl Fn(&mut Graph, NodeId) -> NodeId, lo: f64, hi: f64, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 3]);
        let y = build(&mut g, x);
        let s = g.sum_all(y).unwrap();
        let out = g.reshape(s, &[]).unwrap();
        check_all_leaves(&g, out, &[(x, rand_tensor(&mut rng, &[2, 3], lo, hi))], tol);
    }
}

fn binary_case(build: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId, lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let mut g = Graph::new();
        let a = g.leaf("a", &[3, 2]);
        let b = g.leaf("b", &[3, 2]);
        let y = build(&mut g, a, b);
        // Weight the output so every element's gradient differs.
        let w = g.constant(Tensor::from_fn(&[3, 2], |i| 0.5 + i as f64));
        let yw = g.mul(y, w).unwrap();
        let out = g.sum_all(yw).unwrap();
        check_all_leaves(
            &g,
            out,
            &[
                (a, rand_tensor(&mut rng, &[3, 2], lo, hi)),
                (b, rand_tensor(&mut rng, &[3, 2], lo, hi)),
            ],
            1e-4,
        );
    }
}

#[test]
fn elementwise_binary_primitives() {
    binary_case(|g, a, b| g.add(a, b).unwrap(), -2.0, 2.0);
    binary_case(|g, a, b| g.sub(a, b).unwrap(), -2.0, 2.0);
    binary_case(|g, a, b| g.mul(a, b).unwrap(), -2.0, 2.0);
    binary_case(|g, a, b| g.div(a, b).unwrap(), 0.5, 2.0);
}

#[test]
fn elementwise_unary_primitives() {
    unary_case(|g, x| g.neg(x).unwrap(), -2.0, 2.0, 1e-4);
    unary_case(|g, x| g.exp(x).unwrap(), -2.0, 2.0, 1e-4);
    unary_case(|g, x| g.log(x).unwrap(), 0.2, 3.0, 1e-4);
    unary_case(|g, x| g.tanh(x).unwrap(), -2.0, 2.0, 1e-4);
    unary_case(|g, x| g.sigmoid(x).unwrap(), -3.0, 3.0, 1e-4);
    unary_case(|g, x| g.softplus(x).unwrap(), -3.0, 3.0, 1e-4);
    unary_case(|g, x| g.affine(x, -1.7, 0.3).unwrap(), -2.0, 2.0, 1e-4);
    // Saturating regions.
    unary_case(|g, x| g.tanh(x).unwrap(), 2.5, 4.0, 1e-3);
    unary_case(|g, x| g.sigmoid(x).unwrap(), 5.0, 8.0, 1e-3);
}

#[test]
fn structural_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let weights = |g: &mut Graph, shape: &[usize]| g.constant(Tensor::from_fn(shape, |i| ((i * 7) % 5) as f64 - 1.5));

    // sum / mean / broadcast / reshape
    let mut g = Graph::new();
    let x = g.leaf("x", &[2, 3, 4]);
    let s = g.sum(x, &[1]).unwrap();
    let m = g.mean(x, &[0, 2]).unwrap();
    let sb = g.broadcast(s, &[2, 3, 4]).unwrap();
    let mb = g.broadcast(m, &[2, 3, 4]).unwrap();
    let p = g.mul(sb, mb).unwrap();
    let r = g.reshape(p, &[6, 4]).unwrap();
    let w = weights(&mut g, &[6, 4]);
    let rw = g.mul(r, w).unwrap();
    let out = g.sum_all(rw).unwrap();
    check_all_leaves(&g, out, &[(x, rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0))], 1e-4);

    // concat / slice / pad
    let mut g = Graph::new();
    let a = g.leaf("a", &[2, 2, 3]);
    let b = g.leaf("b", &[2, 1, 3]);
    let c = g.concat(&[a, b], 1).unwrap();
    let sl = g.slice(c, 1, 1, 2).unwrap();
    let pd = g.pad(sl, 2, 2, 1).unwrap();
    let w = weights(&mut g, &[2, 2, 6]);
    let pw = g.mul(pd, w).unwrap();
    let sq = g.square(pw).unwrap();
    let out = g.sum_all(sq).unwrap();
    check_all_leaves(
        &g,
        out,
        &[
            (a, rand_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0)),
            (b, rand_tensor(&mut rng, &[2, 1, 3], -1.0, 1.0)),
        ],
        1e-4,
    );

    // matmul / transpose
    let mut g = Graph::new();
    let a = g.leaf("a", &[2, 3]);
    let b = g.leaf("b", &[3, 4]);
    let m = g.matmul(a, b).unwrap();
    let t = g.transpose(m).unwrap();
    let w = weights(&mut g, &[4, 2]);
    let tw = g.mul(t, w).unwrap();
    let sq = g.square(tw).unwrap();
    let out = g.sum_all(sq).unwrap();
    check_all_leaves(
        &g,
        out,
        &[
            (a, rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)),
            (b, rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)),
        ],
        1e-4,
    );
}

#[test]
fn convolution_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for k in [1, 3] {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 2, 4, 3]);
        let w = g.leaf("w", &[3, 2, k, k]);
        let y = g.conv2d(x, w).unwrap();
        let t = g.tanh(y).unwrap();
        let wf = g.kernel_flip(w).unwrap();
        let back = g.conv2d(t, wf).unwrap();
        let gw = g.conv_weight_grad(x, t, k).unwrap();
        let s1 = g.square(back).unwrap();
        let s1 = g.sum_all(s1).unwrap();
        let s2 = g.square(gw).unwrap();
        let s2 = g.sum_all(s2).unwrap();
        let out = g.add(s1, s2).unwrap();
        check_all_leaves(
            &g,
            out,
            &[
                (x, rand_tensor(&mut rng, &[2, 2, 4, 3], -1.0, 1.0)),
                (w, rand_tensor(&mut rng, &[3, 2, k, k], -0.7, 0.7)),
            ],
            1e-4,
        );
    }
}

#[test]
fn random_composites_cover_every_primitive() {
    let mut seen = BTreeSet::new();
    for seed in 0..24 {
        let case = random_composite(seed);
        for id in case.graph.node_ids() {
            seen.insert(case.graph.node(id).op.name());
        }
    }
    let all = [
        "leaf", "constant", "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sigmoid",
        "softplus", "affine", "sum", "mean", "broadcast", "reshape", "concat", "slice", "pad",
        "conv2d", "conv2d_weight_grad", "kernel_flip", "matmul", "transpose",
    ];
    for name in all {
        assert!(seen.contains(name), "primitive {name} never generated");
    }
}

#[test]
fn random_composite_first_order() {
    for seed in 0..24 {
        let case = random_composite(seed);
        check_all_leaves(&case.graph, case.output, &case.leaves, 1e-4);
    }
}

#[test]
fn random_composite_second_order() {
    for seed in 0..24 {
        let case = random_composite(seed);
        let b = case.bindings();
        let (norm, grads) = case
            .graph
            .gradient_of_gradient_norm(case.output, case.input, &case.params, &b)
            .unwrap();
        assert!(norm > 0.0);
        // Oracle: finite differences of the first-order input-gradient norm.
        for (pi, &p) in case.params.iter().enumerate() {
            let idx = case.leaves.iter().position(|(id, _)| *id == p).unwrap();
            let fd = finite_diff_fn(&case.leaves[idx].1, H, |perturbed| {
                let mut bb = Bindings::new();
                for (j, (id, t)) in case.leaves.iter().enumerate() {
                    if j == idx {
                        bb.bind(*id, perturbed);
                    } else {
                        bb.bind(*id, t);
                    }
                }
                let gx = case.graph.gradient(case.output, &[case.input], &bb).unwrap();
                gx[&case.input].norm()
            });
            let err = max_rel_err(&grads[&p], &fd, FLOOR);
            assert!(err < 1e-3, "seed {seed} param {pi}: relative error {err}");
        }
    }
}

#[test]
fn gradient_is_linear() {
    let case = random_composite(3);
    let mut g = case.graph.clone();
    let x = case.input;
    // second function: sum(exp(x)) * 0.3
    let e = g.exp(x).unwrap();
    let s = g.sum_all(e).unwrap();
    let f2 = g.reshape(s, &[]).unwrap();
    let (alpha, beta) = (1.7, -0.6);
    let af = g.scale(case.output, alpha).unwrap();
    let bf = g.scale(f2, beta).unwrap();
    let combo = g.add(af, bf).unwrap();
    let b = case.bindings();
    let ids: Vec<NodeId> = case.leaves.iter().map(|(i, _)| *i).collect();
    let gc = g.gradient(combo, &ids, &b).unwrap();
    let g1 = g.gradient(case.output, &ids, &b).unwrap();
    let g2 = g.gradient(f2, &ids, &b).unwrap();
    for id in &ids {
        for ((c, a), bb) in gc[id].data().iter().zip(g1[id].data()).zip(g2[id].data()) {
            assert!((c - (alpha * a + beta * bb)).abs() < 1e-10);
        }
    }
}

#[test]
fn evaluation_is_deterministic() {
    let case = random_composite(5);
    let b = case.bindings();
    let ids: Vec<NodeId> = case.leaves.iter().map(|(i, _)| *i).collect();
    let v1 = case.graph.evaluate(&b, &[case.output]).unwrap();
    let v2 = case.graph.evaluate(&b, &[case.output]).unwrap();
    assert_eq!(v1[0].data()[0].to_bits(), v2[0].data()[0].to_bits());
    let g1 = case.graph.gradient(case.output, &ids, &b).unwrap();
    let g2 = case.graph.gradient(case.output, &ids, &b).unwrap();
    for id in &ids {
        let bits1: Vec<u64> = g1[id].data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = g2[id].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }
}

proptest! {
    #[test]
    fn conv_adjoint_identity(seed in 0u64..1000) {
        // <conv(x, w), y> == <x, conv(y, flip(w))>
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[1, 3, 4, 5], -1.0, 1.0);
        let cx = covflow_autodiff::kernels::conv2d(&x, &w);
        let cy = covflow_autodiff::kernels::conv2d(&y, &covflow_autodiff::kernels::kernel_flip(&w));
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(cy.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn sum_broadcast_adjoint(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let small = rand_tensor(&mut rng, &[2, 1, 4], -1.0, 1.0);
        let s = covflow_autodiff::kernels::sum_to(&x, &[2, 1, 4]);
        let b = covflow_autodiff::kernels::broadcast_to(&small, &[2, 3, 4]);
        let lhs: f64 = s.data().iter().zip(small.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(b.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}
