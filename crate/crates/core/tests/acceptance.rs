//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{dense_logdet, perturb, perturbed_model, randn, rel, rng, small_config, uniform};
use covflow::corrupt::{build_ood_suite, corrupt_batch, Kind, SeverityTables, SuiteSpec};
use covflow::freq::{decompose, fit_value_range};
use covflow::io::cifar::{encode_cifar10, parse_cifar10, RECORD_BYTES};
use covflow::io::netpbm::{encode_netpbm, parse_netpbm};
use covflow::io::{load_checkpoint, save_checkpoint, synth_dataset, Checkpoint, Dataset, SynthConfig};
use covflow::layers::{apply_forward, Conv1x1, Coupling, Layer, ParamStore, Parity, Sdl};
use covflow::metrics::{auroc, aggregate_report, fpr_at_tpr, Condition, EvalReport, Metric};
use covflow::model::{build_model, FlowModel, Mode, ModelConfig};
use covflow::score::{compute_stats, nsd, score_dataset, scores_csv, NormalizationStats};
use covflow::train::{train, TrainConfig, TrainOutputs};
use covflow::Tensor;
use covflow_autodiff::testing::{finite_diff, finite_diff_fn, max_rel_err, random_composite};
use covflow_autodiff::Bindings;
use rand::Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runner {
    failed: Vec<&'static str>,
}

impl Runner {
    fn run(&mut self, id: &'static str, title: &str, limit_s: Option<f64>, f: impl FnOnce() -> Check) -> bool {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let res = match (res, limit_s) {
            (Ok(d), Some(l)) if secs > l => Err(format!("{d}; took {secs:.1} s, limit {l} s")),
            (r, _) => r,
        };
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {id:>2} {title}: {detail} [{secs:.1} s]");
        if res.is_err() {
            self.failed.push(id);
        }
        res.is_ok()
    }
}

// 1
fn autodiff_correctness() -> Check {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-3;
    let mut seen = BTreeSet::new();
    let (mut first, mut second) = (0.0f64, 0.0f64);
    let cases = 24;
    for seed in 0..cases {
        let case = random_composite(seed);
        for id in case.graph.node_ids() {
            seen.insert(case.graph.node(id).op.name());
        }
        let b = case.bindings();
        let ids: Vec<_> = case.leaves.iter().map(|(i, _)| *i).collect();
        let grads = case.graph.gradient(case.output, &ids, &b).map_err(|e| e.to_string())?;
        for (k, (id, _)) in case.leaves.iter().enumerate() {
            let fd = finite_diff(&case.graph, case.output, &case.leaves, k, H);
            first = first.max(max_rel_err(&grads[id], &fd, FLOOR));
        }
        let (_, gg) = case
            .graph
            .gradient_of_gradient_norm(case.output, case.input, &case.params, &b)
            .map_err(|e| e.to_string())?;
        for &p in &case.params {
            let idx = case.leaves.iter().position(|(id, _)| *id == p).unwrap();
            let fd = finite_diff_fn(&case.leaves[idx].1, H, |perturbed| {
                let mut bb = Bindings::new();
                for (j, (id, t)) in case.leaves.iter().enumerate() {
                    bb.bind(*id, if j == idx { perturbed } else { t });
                }
                case.graph.gradient(case.output, &[case.input], &bb).unwrap()[&case.input].norm()
            });
            second = second.max(max_rel_err(&gg[&p], &fd, FLOOR));
        }
    }
    let all = [
        "leaf", "constant", "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sigmoid", "softplus", "affine",
        "sum", "mean", "broadcast", "reshape", "concat", "slice", "pad", "conv2d", "conv2d_weight_grad", "kernel_flip",
        "matmul", "transpose",
    ];
    let missing: Vec<_> = all.iter().filter(|n| !seen.contains(*n)).collect();
    ensure(
        missing.is_empty() && first < 1e-4 && second < 1e-3,
        format!("{cases} graphs, first-order max rel err {first:.2e} (< 1e-4), second-order {second:.2e} (< 1e-3), uncovered {missing:?}"),
    )
}

// 2
fn invertibility() -> Check {
    let cfg = ModelConfig { input_shape: [3, 16, 16], ..ModelConfig::default() };
    assert_eq!(cfg.coupling_steps, 16);
    let model = perturbed_model(&cfg, 21, 0.05);
    let x = uniform(&mut rng(22), &[100, 3, 16, 16], 0.0, 1.0);
    let p = model.prepare(&x, 0).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for start in (0..100).step_by(25) {
        let xi = p.input.slice_outer(start, 25);
        let ci = p.cond.as_ref().map(|c| c.slice_outer(start, 25));
        let (z, _) = model.forward(&xi, ci.as_ref()).map_err(|e| e.to_string())?;
        let back = model.inverse(&z, ci.as_ref()).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&xi));
    }
    ensure(worst <= 1e-6, format!("K=16, 100 inputs at 3x16x16, max abs error {worst:.2e} (<= 1e-6)"))
}

// 3
fn logdet_exactness() -> Check {
    const SHAPE: [usize; 4] = [1, 2, 4, 4];
    let mut r = rng(31);
    let x = randn(&mut r, &SHAPE, 0.5);
    let cond = uniform(&mut r, &SHAPE, 0.0, 1.0);
    let init = |l: &Layer, seed: u64| {
        let mut s = ParamStore::new();
        let mut rr = rng(seed);
        l.init(&mut s, &mut rr).unwrap();
        perturb(&mut s, &l.trainable(), &mut rr, 0.3);
        s
    };
    let sdl = Layer::Sdl(Sdl::new("sdl", 2, 0.0));
    let mut sdl_store = ParamStore::new();
    sdl.init(&mut sdl_store, &mut rng(1)).unwrap();
    sdl_store.insert("sdl.beta1", uniform(&mut r, &[2], 0.0, 3.0));
    sdl_store.insert("sdl.beta2", uniform(&mut r, &[2], -0.5, 1.0));
    let conv = Layer::Conv1x1(Conv1x1::new("mix", 2));
    let couple = Layer::Coupling(Coupling::new("couple", 2, 0, 4, 1, Parity::Even));
    let ccouple = Layer::Coupling(Coupling::new("ccouple", 2, 2, 4, 1, Parity::Odd));
    let layers = vec![
        (sdl, sdl_store, true),
        (conv.clone(), init(&conv, 2), false),
        (couple.clone(), init(&couple, 3), false),
        (ccouple.clone(), init(&ccouple, 4), true),
    ];
    let as_tensor = |v: &[f64]| Tensor::new(SHAPE.to_vec(), v.to_vec()).unwrap();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (layer, store, conditional) in &layers {
        let c = conditional.then_some(&cond);
        let analytic = apply_forward(layer, store, &x, c).unwrap().1.data()[0];
        let dense = dense_logdet(x.data(), 1e-5, |v| apply_forward(layer, store, &as_tensor(v), c).unwrap().0.into_data());
        let e = rel(analytic, dense);
        worst = worst.max(e);
        parts.push(format!("{} {e:.1e}", layer.name()));
    }
    let stack = |v: &Tensor| {
        let (a, l1) = apply_forward(&layers[1].0, &layers[1].1, v, None).unwrap();
        let (b, l2) = apply_forward(&layers[3].0, &layers[3].1, &a, Some(&cond)).unwrap();
        (b, l1.data()[0] + l2.data()[0])
    };
    let dense = dense_logdet(x.data(), 1e-5, |v| stack(&as_tensor(v)).0.into_data());
    let e = rel(stack(&x).1, dense);
    worst = worst.max(e);
    parts.push(format!("stack {e:.1e}"));
    ensure(worst < 1e-3, format!("relative errors {} (< 1e-3)", parts.join(", ")))
}

// 4
fn density_sanity() -> Check {
    let model = perturbed_model(&small_config(Mode::HighUnconditional, [1, 2, 2], 1), 11, 0.5);
    let (lo, n) = (-8.0, 33usize);
    let h = -2.0 * lo / (n - 1) as f64;
    let axis: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
    let mut total = 0.0;
    for &a in &axis {
        for &b in &axis {
            let pts: Vec<f64> = axis.iter().flat_map(|&c| axis.iter().flat_map(move |&d| [a, b, c, d])).collect();
            let x = Tensor::new(vec![n * n, 1, 2, 2], pts).unwrap();
            let ll = model.log_likelihood_prepared(&x, None).map_err(|e| e.to_string())?;
            total += ll.iter().map(|r| r.log_likelihood.exp()).sum::<f64>();
        }
    }
    let mass = total * h.powi(4);
    ensure((mass - 1.0).abs() < 0.02, format!("mass {mass:.5} over a {n}^4 grid (within 0.02 of 1)"))
}

// 7
fn metric_oracles() -> Check {
    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut twice = 0u64;
        for &o in ood {
            for &i in id {
                twice += if o > i { 2 } else if o == i { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * id.len() * ood.len()) as f64
    }
    fn brute_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
        let mut best: Option<f64> = None;
        for &t in ood {
            let tpr = ood.iter().filter(|&&o| o >= t).count() as f64 / ood.len() as f64;
            if tpr >= target && best.map_or(true, |b| t > b) {
                best = Some(t);
            }
        }
        let t = best.unwrap();
        id.iter().filter(|&&v| v >= t).count() as f64 / id.len() as f64
    }
    let mut r = rng(71);
    let mut mismatches = 0;
    for case in 0..1000 {
        let levels = if case % 2 == 0 { 20 } else { 100_000 };
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            let n = r.gen_range(1..=200);
            (0..n).map(|_| r.gen_range(0..levels) as f64 / 7.0).collect::<Vec<f64>>()
        };
        let id = draw(&mut r);
        let ood = draw(&mut r);
        let target = if case % 3 == 0 { 0.95 } else { r.gen_range(0.01..=1.0) };
        if auroc(&id, &ood).unwrap() != brute_auroc(&id, &ood) || fpr_at_tpr(&id, &ood, target).unwrap() != brute_fpr(&id, &ood, target) {
            mismatches += 1;
        }
    }
    let id: Vec<f64> = (0..2000).map(|_| r.gen()).collect();
    let ood: Vec<f64> = (0..2000).map(|_| r.gen()).collect();
    let chance = auroc(&id, &ood).unwrap();
    ensure(
        mismatches == 0 && (chance - 0.5).abs() <= 0.02,
        format!("{mismatches} mismatches over 1000 instances, identical-distribution auroc {chance:.4} (0.50 +/- 0.02)"),
    )
}

// 8
fn nsd_identities() -> Check {
    let s = NormalizationStats {
        mu_l: -812.5,
        sigma_l: 13.25,
        mu_t: 41.0,
        sigma_t: 2.5,
        n: 100,
        model_fingerprint: String::new(),
        split: "validation".into(),
        seed: 0,
    };
    let at_means = nsd(s.mu_l, s.mu_t, &s);
    let three = nsd(s.mu_l - 2.0 * s.sigma_l, s.mu_t + s.sigma_t, &s);

    let mut cfg = small_config(Mode::HighConditionalSdl, [3, 16, 16], 1);
    cfg.dequant.value_range = [-0.3, 0.3];
    let mut model = perturbed_model(&cfg, 4, 0.05);
    model.round_to_storage();
    let data = synth_dataset(&SynthConfig { count: 24, seed: 2, ..Default::default() }).unwrap();
    let stats = compute_stats(&model, &data.images, 0, "validation").map_err(|e| e.to_string())?;
    let a = scores_csv(&score_dataset(&model, &data.images, &data.ids, Some(&stats), 0).map_err(|e| e.to_string())?);
    let b = scores_csv(&score_dataset(&model, &data.images, &data.ids, Some(&stats), 0).map_err(|e| e.to_string())?);
    ensure(
        at_means == 0.0 && three == 3.0 && a == b,
        format!("nsd at means {at_means}, at (mu_l-2s_l, mu_t+s_t) {three}, repeated CSV identical: {}", a == b),
    )
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// 10
fn io_round_trips() -> Check {
    let p = Path::new("acceptance.bin");
    let mut r = rng(101);
    let bytes: Vec<u8> = (0..3 * RECORD_BYTES).map(|_| r.gen()).collect();
    let (imgs, labels) = parse_cifar10(&bytes, p).map_err(|e| e.to_string())?;
    let cifar = encode_cifar10(&imgs, &labels).unwrap() == bytes;

    let mut netpbm = true;
    for (maxval, c) in [(255u32, 1usize), (255, 3), (65535, 1), (65535, 3)] {
        let img = Tensor::from_fn(&[c, 7, 5], |_| r.gen_range(0..=maxval) as f64 / maxval as f64);
        let enc = encode_netpbm(&img, maxval).unwrap();
        let (back, mv) = parse_netpbm(&enc, p).unwrap();
        netpbm &= back == img && mv == maxval && encode_netpbm(&back, maxval).unwrap() == enc;
    }

    let dir = tempfile::tempdir().unwrap();
    let model = perturbed_model(&small_config(Mode::HighConditionalSdl, [3, 8, 8], 2), 5, 0.05);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&model)).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model().unwrap();
    let checkpoint = loaded.config() == model.config()
        && model.params().iter().all(|(name, t)| {
            let back = loaded.params().get(name).unwrap();
            t.data().iter().zip(back.data()).all(|(a, b)| *b == *a as f32 as f64)
        });

    let clean = synth_dataset(&SynthConfig { count: 4, shape: [3, 8, 8], seed: 3, ..Default::default() }).unwrap();
    let spec = SuiteSpec { seed: 9, ..Default::default() };
    build_ood_suite(&clean, &dir.path().join("a"), &spec).unwrap();
    build_ood_suite(&clean, &dir.path().join("b"), &spec).unwrap();
    let (ta, tb) = (tree_bytes(&dir.path().join("a")), tree_bytes(&dir.path().join("b")));
    let suite = ta == tb && !ta.is_empty();
    ensure(
        cifar && netpbm && checkpoint && suite,
        format!(
            "cifar {cifar}, netpbm 8/16-bit {netpbm}, checkpoint at f32 {checkpoint}, suite regeneration identical {suite} ({} files)",
            ta.len()
        ),
    )
}

/// Shared desk-scale setup for the training-based criteria.
struct Desk {
    train: Dataset,
    val: Dataset,
    config: ModelConfig,
    train_config: TrainConfig,
}

impl Desk {
    fn new() -> Self {
        let data = synth_dataset(&SynthConfig::default()).unwrap();
        assert_eq!(data.len(), 2000);
        let (train, val) = data.split(0.1, 0);
        let high = decompose(&train.images, 1.0).unwrap().high;
        let mut config = ModelConfig {
            mode: Mode::HighConditionalSdl,
            coupling_steps: 4,
            hidden_channels: 8,
            residual_blocks: 1,
            input_shape: [3, 16, 16],
            ..ModelConfig::default()
        };
        config.dequant.value_range = fit_value_range(high.data(), 0.01).unwrap();
        let train_config = TrainConfig { alpha: 2.0, lr_max: 2e-3, epochs: 30, batch_size: 32, ..Default::default() };
        Desk { train, val, config, train_config }
    }

    fn val_bpd(&self, model: &FlowModel) -> f64 {
        let r = model.log_likelihood(&self.val.images, 0).unwrap();
        r.iter().map(|x| x.bits_per_dim).sum::<f64>() / r.len() as f64
    }

    fn fit(&self, mode: Mode) -> (FlowModel, f64, f64) {
        let cfg = ModelConfig { mode, ..self.config.clone() };
        let model = build_model(&cfg).unwrap();
        let before = self.val_bpd(&model);
        let out = train(&self.train.images, model, &self.train_config, &TrainOutputs::default(), None).unwrap();
        let after = self.val_bpd(&out.model);
        (out.model, before, after)
    }
}

fn ood_report(desk: &Desk, model: &FlowModel) -> EvalReport {
    let stats = compute_stats(model, &desk.val.images, 0, "validation").unwrap();
    let test = synth_dataset(&SynthConfig { count: 200, seed: 1, ..Default::default() }).unwrap();
    let id = score_dataset(model, &test.images, &test.ids, Some(&stats), 0).unwrap();
    let tables = SeverityTables::default();
    let mut conditions = Vec::new();
    for kind in Kind::ALL {
        for severity in 1..=5u8 {
            let x = corrupt_batch(&test.images, kind, severity, &tables, 0).unwrap();
            let records = score_dataset(model, &x, &test.ids, Some(&stats), 0).unwrap();
            conditions.push(Condition { corruption: kind.as_str().into(), severity, records: Some(records) });
        }
    }
    aggregate_report(&id, &conditions).unwrap()
}

fn auc(report: &EvalReport, kind: Kind, severity: u8, metric: Metric) -> f64 {
    report.row(kind.as_str(), Some(severity), metric).and_then(|r| r.auroc).unwrap()
}

fn main() {
    let mut runner = Runner { failed: Vec::new() };
    println!("acceptance suite");
    runner.run("1", "autodiff correctness", Some(60.0), autodiff_correctness);
    runner.run("2", "invertibility", Some(60.0), invertibility);
    runner.run("3", "log-det exactness", None, logdet_exactness);
    runner.run("4", "density sanity", None, density_sanity);
    runner.run("7", "metric oracles", None, metric_oracles);
    runner.run("8", "nsd identities", None, nsd_identities);
    runner.run("10", "i/o round trips", None, io_round_trips);

    let desk = Desk::new();
    let mut trained = None;
    runner.run("5", "training progress", Some(30.0 * 60.0), || {
        let (model, before, after) = desk.fit(Mode::HighConditionalSdl);
        let drop = before - after;
        trained = Some((model, after));
        ensure(drop >= 0.5, format!("val bpd {before:.4} -> {after:.4} after 30 epochs, drop {drop:.4} (>= 0.5)"))
    });

    let mut report = None;
    runner.run("6", "covariate-shift ordering", Some(15.0 * 60.0), || {
        let (model, _) = trained.as_ref().ok_or("no trained model")?;
        let rep = ood_report(&desk, model);
        let noise: Vec<f64> = (3..=5).map(|s| auc(&rep, Kind::GaussianNoise, s, Metric::Nsd)).collect();
        let blur: Vec<(f64, f64)> = (3..=5)
            .map(|s| (auc(&rep, Kind::GaussianBlur, s, Metric::Nsd), auc(&rep, Kind::GaussianBlur, s, Metric::Ll)))
            .collect();
        let avg = |m| rep.average(m).and_then(|r| r.auroc).unwrap();
        let (n, l, t) = (avg(Metric::Nsd), avg(Metric::Ll), avg(Metric::Typicality));
        let a = noise.iter().all(|&v| v >= 0.85);
        let b = blur.iter().all(|(n, l)| n > l);
        let c = n >= l.max(t) - 0.02;
        let detail = format!(
            "(a) {} noise nsd sev3-5 {noise:?}; (b) {} blur nsd/ll sev3-5 {blur:?}; (c) {} suite average nsd {n:.4} ll {l:.4} typicality {t:.4}",
            if a { "ok" } else { "FAILED" },
            if b { "ok" } else { "FAILED" },
            if c { "ok" } else { "FAILED" },
        );
        report = Some(rep);
        ensure(a && b && c, detail)
    });

    runner.run("9", "ablation direction", None, || {
        let (_, conditional) = trained.as_ref().ok_or("no trained model")?;
        let (_, _, unconditional) = desk.fit(Mode::HighUnconditional);
        ensure(
            *conditional < unconditional,
            format!("val bpd after 30 epochs: conditional+SDL {conditional:.4} vs high-frequency unconditional {unconditional:.4}"),
        )
    });

    if let Some(rep) = &report {
        println!("\ndesk-scale report (overall averages)");
        for m in Metric::ALL {
            if let Some(r) = rep.average(m) {
                println!("  {m:<10} auroc {:.4} fpr95 {:.4}", r.auroc.unwrap_or(f64::NAN), r.fpr95.unwrap_or(f64::NAN));
            }
        }
    }
    if runner.failed.is_empty() {
        println!("\nall criteria passed");
    } else {
        println!("\nfailed criteria: {}", runner.failed.join(", "));
        std::process::exit(1);
    }
}
