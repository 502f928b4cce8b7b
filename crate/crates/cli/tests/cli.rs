use std::path::Path;
use std::process::{Command, Output};

fn covflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covflow"))
        .current_dir(dir)
        .env_remove("COVFLOW_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = covflow(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit status")
}

const CONFIG: &str = "[corrupt]\nkinds = [\"gaussian_noise\", \"contrast\"]\nseverities = [1, 3]\n";

fn tiny_train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", "data", "--out", out, "--epochs", "2", "--steps", "1", "--hidden", "4", "--blocks", "1",
        "--batch-size", "16",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["synth", "--out", "data", "--count", "60", "--shape", "3,8,8", "--seed", "1"]);
    ok(d, &["synth", "--out", "idtest", "--count", "20", "--shape", "3,8,8", "--seed", "2"]);
    let train = tiny_train(d, "m.ckpt", &[]);
    assert!(String::from_utf8_lossy(&train.stderr).contains("[train]"));
    let log = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(d.join("m.ckpt.run.toml").exists());

    ok(d, &["stats", "--model", "m.ckpt", "--data", "data"]);
    assert!(d.join("m.ckpt.stats.json").exists());

    ok(d, &["score", "--model", "m.ckpt", "--data", "idtest", "--out", "a.csv"]);
    ok(d, &["score", "--model", "m.ckpt", "--data", "idtest", "--out", "b.csv", "--stats", "m.ckpt.stats.json"]);
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("sample_id,ll_nats,grad_norm,nsd\n"));
    assert_eq!(text.lines().count(), 21);
    assert!(!text.contains("NA"));

    ok(d, &["--config", "run.toml", "corrupt", "--data", "idtest", "--out", "suite"]);
    assert!(d.join("suite/gaussian_noise/3").is_dir());
    assert!(!d.join("suite/pixelate").exists());
    ok(d, &["verify", "suite"]);
    ok(d, &["verify", "data"]);
    ok(d, &["verify", "m.ckpt"]);

    let eval = [
        "--config", "run.toml", "eval", "--model", "m.ckpt", "--id", "idtest", "--suite", "suite", "--out", "report.csv",
        "--scores-dir", "scores",
    ];
    ok(d, &eval);
    ok(d, &["--config", "run.toml", "eval", "--from-scores", "--scores-dir", "scores", "--out", "again.csv"]);
    let report = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(report, std::fs::read_to_string(d.join("again.csv")).unwrap());
    assert!(report.starts_with("corruption,severity,metric,auroc,fpr95,n_id,n_ood\n"));
    // 4 conditions and 2 per-severity averages plus the overall one, 3 metrics each
    assert_eq!(report.lines().count(), 1 + 7 * 3);
    assert!(report.contains("AVERAGE,all,nsd,"));

    ok(d, &["sample", "--model", "m.ckpt", "--low", "idtest", "--count", "4", "--out", "samples"]);
    ok(d, &["verify", "samples"]);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "data", "--count", "40", "--shape", "3,8,8", "--seed", "3"]);
    tiny_train(d, "full.ckpt", &[]);
    tiny_train(d, "part.ckpt", &["--stop-after", "1"]);
    ok(d, &["train", "--data", "data", "--out", "part.ckpt", "--resume", "part.ckpt"]);
    let fp = |name: &str| String::from_utf8(ok(d, &["verify", name]).stdout).unwrap();
    assert_eq!(fp("full.ckpt"), fp("part.ckpt"));
    let full = std::fs::read_to_string(d.join("full.csv")).unwrap();
    assert_eq!(full, std::fs::read_to_string(d.join("part.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&covflow(d, &["train", "--bogus"])), 2);
    assert_eq!(code(&covflow(d, &["frobnicate"])), 2);
    std::fs::write(d.join("bad.toml"), "[train]\nmomentum = 0.9\n").unwrap();
    assert_eq!(code(&covflow(d, &["--config", "bad.toml", "synth", "--out", "x"])), 2);
    std::fs::write(d.join("neg.toml"), "[train]\nlr_max = -1.0\n").unwrap();
    assert_eq!(code(&covflow(d, &["--config", "neg.toml", "synth", "--out", "x"])), 2);
    assert_eq!(code(&covflow(d, &["verify", "missing"])), 3);
    assert_eq!(code(&covflow(d, &["score", "--model", "none.ckpt", "--data", "x", "--out", "s.csv"])), 3);
    assert_eq!(code(&covflow(d, &["eval", "--from-scores", "--out", "r.csv"])), 2);

    ok(d, &["synth", "--out", "data", "--count", "5", "--shape", "1,4,4"]);
    let img = d.join("data/images/000002.pgm");
    let mut bytes = std::fs::read(&img).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&img, bytes).unwrap();
    assert_eq!(code(&covflow(d, &["verify", "data"])), 3);
}

#[test]
fn data_root_resolves_relative_paths() {
    let root = tempfile::tempdir().unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    ok(root.path(), &["synth", "--out", "shared", "--count", "4", "--shape", "1,4,4"]);
    assert_eq!(code(&covflow(elsewhere.path(), &["verify", "shared"])), 3);
    let out = Command::new(env!("CARGO_BIN_EXE_covflow"))
        .current_dir(elsewhere.path())
        .env("COVFLOW_DATA_ROOT", root.path())
        .args(["verify", "shared"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn library_entry_point_maps_usage_errors() {
    assert_eq!(covflow_cli::main_with_args(["covflow", "synth"]), 2);
}
