//! Numeric kernels behind each primitive.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::tensor::Tensor;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` against `reduced` (per-axis flags) into an outer shape and
/// an inner contiguous block whose axes all share the last axis' flag.
fn split_inner(shape: &[usize], reduced: &[bool]) -> (usize, bool) {
    let Some(&last) = reduced.last() else {
        return (1, false);
    };
    let mut split = shape.len();
    while split > 0 && reduced[split - 1] == last {
        split -= 1;
    }
    (split, last)
}

fn outer_offsets(shape: &[usize], out_shape: &[usize], split: usize) -> Vec<usize> {
    // Offset into the small (kept-axes) tensor for every outer index of the big tensor.
    let mut ostr = vec![0usize; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        ostr[d] = if out_shape[d] == 1 && shape[d] != 1 { 0 } else { acc };
        acc *= out_shape[d];
    }
    let outer: usize = shape[..split].iter().product();
    let mut offsets = Vec::with_capacity(outer);
    let mut idx = vec![0usize; split];
    let mut off = 0usize;
    for _ in 0..outer {
        offsets.push(off);
        for d in (0..split).rev() {
            idx[d] += 1;
            off += ostr[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= ostr[d] * shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sums `x` down to `out_shape`, where each axis of `out_shape` is either
/// equal to the matching axis of `x` or 1.
pub fn sum_to(x: &Tensor, out_shape: &[usize]) -> Tensor {
    let shape = x.shape();
    let reduced: Vec<bool> = shape
        .iter()
        .zip(out_shape)
        .map(|(&s, &o)| o == 1 && s != 1)
        .collect();
    let n_out: usize = out_shape.iter().product();
    let mut out = vec![0.0; n_out];
    if x.numel() == 0 {
        return Tensor::new(out_shape.to_vec(), out).expect("shape");
    }
    let (split, inner_reduced) = split_inner(shape, &reduced);
    let inner: usize = shape[split..].iter().product();
    let offsets = outer_offsets(shape, out_shape, split);
    let data = x.data();
    for (o, chunk) in offsets.iter().zip(data.chunks(inner)) {
        if inner_reduced {
            out[*o] += chunk.iter().sum::<f64>();
        } else {
            for (dst, v) in out[*o..*o + inner].iter_mut().zip(chunk) {
                *dst += v;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

/// Expands size-1 axes of `x` to `out_shape`.
pub fn broadcast_to(x: &Tensor, out_shape: &[usize]) -> Tensor {
    let reduced: Vec<bool> = out_shape
        .iter()
        .zip(x.shape())
        .map(|(&o, &s)| s == 1 && o != 1)
        .collect();
    let n_out: usize = out_shape.iter().product();
    let mut out = vec![0.0; n_out];
    if n_out == 0 {
        return Tensor::new(out_shape.to_vec(), out).expect("shape");
    }
    let (split, inner_reduced) = split_inner(out_shape, &reduced);
    let inner: usize = out_shape[split..].iter().product();
    let offsets = outer_offsets(out_shape, x.shape(), split);
    let src = x.data();
    for (o, chunk) in offsets.iter().zip(out.chunks_mut(inner)) {
        if inner_reduced {
            chunk.fill(src[*o]);
        } else {
            chunk.copy_from_slice(&src[*o..*o + inner]);
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

pub fn concat(parts: &[&Tensor], axis: usize, out_shape: &[usize]) -> Tensor {
    let (outer, inner) = outer_inner(out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let run = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * run..(o + 1) * run]);
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

pub fn slice(x: &Tensor, axis: usize, start: usize, out_shape: &[usize]) -> Tensor {
    let (outer, inner) = outer_inner(x.shape(), axis);
    let full = x.shape()[axis] * inner;
    let len = out_shape[axis] * inner;
    let mut out = Vec::with_capacity(outer * len);
    for o in 0..outer {
        let base = o * full + start * inner;
        out.extend_from_slice(&x.data()[base..base + len]);
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

pub fn pad(x: &Tensor, axis: usize, before: usize, out_shape: &[usize]) -> Tensor {
    let (outer, inner) = outer_inner(out_shape, axis);
    let full = out_shape[axis] * inner;
    let len = x.shape()[axis] * inner;
    let mut out = vec![0.0; outer * full];
    for o in 0..outer {
        let base = o * full + before * inner;
        out[base..base + len].copy_from_slice(&x.data()[o * len..(o + 1) * len]);
    }
    Tensor::new(out_shape.to_vec(), out).expect("shape")
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm a");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm b");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Unfolds one image `[c, h, w]` into rows of `c * k * k` patches with zero
/// padding. Row `r` starts at `r * stride`; each row holds `h * w` values.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64], stride: usize) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for a in 0..k {
            for b in 0..k {
                let row = (ch * k + a) * k + b;
                let dst = &mut col[row * stride..row * stride + hw];
                let dy = a as isize - p;
                let dx = b as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let hw = h * wd;
    let patch = ci * k * k;
    let mut out = vec![0.0; n * co * hw];
    if hw > 0 && co > 0 && ci > 0 {
        out.par_chunks_mut(co * hw)
            .zip(x.data().par_chunks(ci * hw))
            .for_each(|(dst, img)| {
                if k == 1 {
                    gemm(co, ci, hw, w.data(), img, 0.0, dst);
                } else {
                    let mut col = vec![0.0; patch * hw];
                    im2col(img, ci, h, wd, k, &mut col, hw);
                    gemm(co, patch, hw, w.data(), &col, 0.0, dst);
                }
            });
    }
    Tensor::new(vec![n, co, h, wd], out).expect("shape")
}

const WEIGHT_GRAD_CHUNK: usize = 8;

pub fn conv_weight_grad(x: &Tensor, gy: &Tensor, k: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = gy.shape()[1];
    let hw = h * wd;
    let patch = ci * k * k;
    // Fixed-size chunks summed in order keep the result independent of thread count.
    let partials: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(WEIGHT_GRAD_CHUNK)
        .map(|imgs| {
            let mut acc = vec![0.0; co * patch];
            let mut col = vec![0.0; patch * hw];
            for &i in imgs {
                let img = &x.data()[i * ci * hw..(i + 1) * ci * hw];
                let g = &gy.data()[i * co * hw..(i + 1) * co * hw];
                if k == 1 {
                    col.copy_from_slice(img);
                } else {
                    im2col(img, ci, h, wd, k, &mut col, hw);
                }
                let a = ArrayView2::from_shape((co, hw), g).expect("gy");
                let b = ArrayView2::from_shape((patch, hw), &col).expect("col");
                let mut c = ArrayViewMut2::from_shape((co, patch), &mut acc).expect("acc");
                general_mat_mul(1.0, &a, &b.t(), 1.0, &mut c);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; co * patch];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Tensor::new(vec![co, ci, k, k], out).expect("shape")
}

pub fn kernel_flip(w: &Tensor) -> Tensor {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut out = vec![0.0; w.numel()];
    for o in 0..co {
        for i in 0..ci {
            for a in 0..k {
                for b in 0..k {
                    out[((i * co + o) * k + a) * k + b] =
                        w.data()[((o * ci + i) * k + (k - 1 - a)) * k + (k - 1 - b)];
                }
            }
        }
    }
    Tensor::new(vec![ci, co, k, k], out).expect("shape")
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    if m * n > 0 {
        gemm(m, k, n, a.data(), b.data(), 0.0, &mut out);
    }
    Tensor::new(vec![m, n], out).expect("shape")
}

pub fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("shape")
}
