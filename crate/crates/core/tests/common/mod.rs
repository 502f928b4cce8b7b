//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use covflow::layers::ParamStore;
use covflow::model::{build_model, FlowModel, Mode, ModelConfig};
use covflow::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Adds Gaussian noise to every named parameter.
pub fn perturb(store: &mut ParamStore, names: &[String], rng: &mut ChaCha8Rng, scale: f64) {
    for n in names {
        let t = store.get_mut(n).expect("known parameter");
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// A model whose couplings are no longer the identity.
pub fn perturbed_model(cfg: &ModelConfig, seed: u64, scale: f64) -> FlowModel {
    let mut m = build_model(cfg).unwrap();
    let names = m.trainable_names();
    perturb(m.params_mut(), &names, &mut rng(seed), scale);
    m
}

pub fn small_config(mode: Mode, shape: [usize; 3], steps: usize) -> ModelConfig {
    ModelConfig {
        mode,
        coupling_steps: steps,
        hidden_channels: 4,
        residual_blocks: 1,
        input_shape: shape,
        ..ModelConfig::for_mode(mode)
    }
}

/// `log|det J|` of `f` at `x` from a central-difference Jacobian.
pub fn dense_logdet(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let d = x.len();
    let mut j = DMatrix::<f64>::zeros(d, d);
    let mut probe = x.to_vec();
    for col in 0..d {
        probe[col] = x[col] + h;
        let up = f(&probe);
        probe[col] = x[col] - h;
        let down = f(&probe);
        probe[col] = x[col];
        for row in 0..d {
            j[(row, col)] = (up[row] - down[row]) / (2.0 * h);
        }
    }
    j.lu().determinant().abs().ln()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
