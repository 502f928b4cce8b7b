mod common;

use std::f64::consts::PI;

use common::{perturbed_model, rng, small_config, uniform};
use covflow::io::{load_checkpoint, synth_dataset, SynthConfig};
use covflow::model::{build_model, Mode, ModelConfig, Prepared};
use covflow::score::typicality_score;
use covflow::train::{loss, loss_and_grads, train, TrainConfig, TrainOutputs, LOG_HEADER};
use covflow::{Error, Tensor};

fn data(count: usize, seed: u64) -> Tensor {
    synth_dataset(&SynthConfig { count, shape: [3, 8, 8], seed, ..Default::default() }).unwrap().images
}

fn tiny_model(mode: Mode) -> ModelConfig {
    ModelConfig { hidden_channels: 4, residual_blocks: 1, ..small_config(mode, [3, 8, 8], 2) }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, lr_max: 2e-3, seed: 3, ..Default::default() }
}

#[test]
fn zero_alpha_loss_is_mean_nll() {
    let model = perturbed_model(&small_config(Mode::HighConditionalSdl, [3, 4, 4], 1), 1, 0.3);
    let x = uniform(&mut rng(2), &[6, 3, 4, 4], 0.0, 1.0);
    let p = model.prepare(&x, 0).unwrap();
    let v = loss(&model, &p, 0.0).unwrap();
    let ll = model.log_likelihood_prepared(&p.input, p.cond.as_ref()).unwrap();
    let mean_nll = -ll.iter().map(|r| r.log_likelihood).sum::<f64>() / 6.0;
    assert_eq!(v.loss, v.nll);
    assert!((v.nll - mean_nll).abs() < 1e-9);
}

#[test]
fn identity_flow_at_origin() {
    let model = build_model(&small_config(Mode::HighUnconditional, [2, 4, 4], 1)).unwrap();
    let p = Prepared { input: Tensor::zeros(&[2, 2, 4, 4]), cond: None };
    let v = loss(&model, &p, 2.0).unwrap();
    assert!((v.nll - 16.0 * (2.0 * PI).ln()).abs() < 1e-9);
    assert!(v.penalty.abs() <= 2e-12, "{}", v.penalty);
}

#[test]
fn penalty_matches_typicality_score() {
    let model = perturbed_model(&small_config(Mode::HighConditionalSdl, [3, 4, 4], 2), 4, 0.3);
    let x = uniform(&mut rng(5), &[7, 3, 4, 4], 0.0, 1.0);
    let p = model.prepare(&x, 8).unwrap();
    let v = loss(&model, &p, 2.0).unwrap();
    let t = typicality_score(&model, &x, 8).unwrap();
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    assert!((v.penalty - mean).abs() < 1e-9);
    assert!((v.loss - (v.nll + 2.0 * v.penalty)).abs() < 1e-9);
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let model = perturbed_model(&small_config(Mode::HighConditionalSdl, [2, 4, 4], 1), 6, 0.3);
    let x = uniform(&mut rng(7), &[3, 2, 4, 4], 0.1, 0.9);
    let p = model.prepare(&x, 0).unwrap();
    let (_, grads) = loss_and_grads(&model, &p, 2.0).unwrap();
    let h = 1e-5;
    let (mut diff, mut norm) = (0.0, 0.0);
    for name in model.trainable_names() {
        let g = &grads[&name];
        for i in 0..g.numel() {
            let mut m = model.clone();
            let base = m.params().get(&name).unwrap().data()[i];
            m.params_mut().get_mut(&name).unwrap().data_mut()[i] = base + h;
            let up = loss(&m, &p, 2.0).unwrap().loss;
            m.params_mut().get_mut(&name).unwrap().data_mut()[i] = base - h;
            let down = loss(&m, &p, 2.0).unwrap().loss;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - g.data()[i]).powi(2);
            norm += fd * fd;
        }
    }
    assert!((diff / norm).sqrt() < 1e-3, "relative error {}", (diff / norm).sqrt());
}

#[test]
fn training_lowers_the_loss_and_logs_each_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("log.csv");
    let ck_path = dir.path().join("m.ckpt");
    let outputs = TrainOutputs { checkpoint: Some(ck_path.clone()), log_csv: Some(log_path.clone()), stop_after: None };
    let images = data(96, 1);
    let out = train(&images, build_model(&tiny_model(Mode::HighConditionalSdl)).unwrap(), &cfg(4), &outputs, None).unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(out.log[3].nll_nats < out.log[0].nll_nats);
    assert!(out.log.iter().all(|r| r.penalty > 0.0));
    assert_eq!(out.log.last().unwrap().step, 4 * 6);

    let text = std::fs::read_to_string(&log_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[4], out.log[3].csv());

    let ck = load_checkpoint(&ck_path).unwrap();
    assert_eq!(ck.model().unwrap().fingerprint(), out.model.fingerprint());
    assert_eq!(ck.training.unwrap().epoch, 4);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let images = data(48, 2);
    let model = build_model(&tiny_model(Mode::HighConditionalSdl)).unwrap();
    let config = cfg(2);
    let full = train(&images, model.clone(), &config, &TrainOutputs::default(), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("m.ckpt");
    let outputs = TrainOutputs { checkpoint: Some(ck_path.clone()), stop_after: Some(1), ..Default::default() };
    let first = train(&images, model.clone(), &config, &outputs, None).unwrap();
    assert_eq!(first.log.len(), 1);
    assert_ne!(first.state.params, full.state.params);

    let state = load_checkpoint(&ck_path).unwrap().training.unwrap();
    assert_eq!(state, first.state);
    let resumed = train(&images, model.clone(), &config, &TrainOutputs::default(), Some(state)).unwrap();
    assert_eq!(resumed.state.params, full.state.params);
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.model.fingerprint(), full.model.fingerprint());

    let other = TrainConfig { lr_max: 1e-3, ..config };
    let state = load_checkpoint(&ck_path).unwrap().training.unwrap();
    assert!(matches!(train(&images, model, &other, &TrainOutputs::default(), Some(state)), Err(Error::Config(_))));
}

#[test]
fn pinned_seeds_reproduce_the_run() {
    let images = data(32, 3);
    let model = build_model(&tiny_model(Mode::HighUnconditional)).unwrap();
    let a = train(&images, model.clone(), &cfg(1), &TrainOutputs::default(), None).unwrap();
    let b = train(&images, model, &cfg(1), &TrainOutputs::default(), None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.fingerprint(), b.model.fingerprint());
}

#[test]
fn non_finite_batches_abort_the_run() {
    let images = data(64, 4);
    let mut model = build_model(&tiny_model(Mode::HighConditionalSdl)).unwrap();
    let name = model.trainable_names()[0].clone();
    model.params_mut().get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let err = train(&images, model, &cfg(1), &TrainOutputs::default(), None).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn empty_or_invalid_input_rejected() {
    let model = build_model(&tiny_model(Mode::HighConditionalSdl)).unwrap();
    let empty = Tensor::zeros(&[0, 3, 8, 8]);
    assert!(train(&empty, model.clone(), &cfg(1), &TrainOutputs::default(), None).is_err());
    let bad = TrainConfig { batch_size: 0, ..cfg(1) };
    assert!(matches!(train(&data(4, 0), model, &bad, &TrainOutputs::default(), None), Err(Error::Config(_))));
}
