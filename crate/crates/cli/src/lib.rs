//! Command-line workflow: synthesize or load data, train, compute reference
//! statistics, score, corrupt and evaluate.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use covflow::corrupt::{build_ood_suite, Kind, SuiteManifest, SuiteSpec};
use covflow::freq::{decompose, fit_value_range, DequantConfig};
use covflow::io::dataset::{read_manifest, MANIFEST};
use covflow::io::synth::synth_info;
use covflow::io::{load_checkpoint, read_dataset, save_checkpoint, synth_dataset, verify, write_dataset, Dataset};
use covflow::io::{dataset::Provenance, write_atomic, Checkpoint, ManifestInfo};
use covflow::metrics::{aggregate_report, Condition};
use covflow::model::{build_model, FlowModel, Mode};
use covflow::score::{compute_stats, read_scores_csv, score_dataset, write_scores_csv, NormalizationStats, ScoreRecord};
use covflow::train::{train, TrainOutputs, TrainingState};
use covflow::{Error, Result, Tensor};

pub use config::RunConfig;
use config::data_path;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "covflow", version, about = "Covariate-shift detection with conditional normalizing flows")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Compute normalization statistics on the held-out split.
    Stats(StatsArgs),
    /// Score a dataset, writing a CSV.
    Score(ScoreArgs),
    /// Build the AUROC / FPR95 report over a corruption suite.
    Eval(EvalArgs),
    /// Write corrupted copies of a dataset.
    Corrupt(CorruptArgs),
    /// Draw samples from a model.
    Sample(SampleArgs),
    /// Generate a synthetic texture dataset.
    Synth(SynthArgs),
    /// Check a dataset directory, suite or checkpoint against its own records.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from the training state in this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs; the checkpoint stays resumable.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of coupling steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// The training dataset; statistics use its held-out split.
    #[arg(long)]
    pub data: PathBuf,
    /// Use every image instead of the held-out split.
    #[arg(long)]
    pub all: bool,
    /// Statistics sidecar; defaults to `<model>.stats.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Statistics for NSD; defaults to those stored in the checkpoint.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Report CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// In-distribution test data.
    #[arg(long)]
    pub id: Option<PathBuf>,
    /// Corruption suite directory.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Where per-condition score CSVs are written, or read with `--from-scores`.
    #[arg(long)]
    pub scores_dir: Option<PathBuf>,
    /// Rebuild the report from score CSVs in `--scores-dir` without a model.
    #[arg(long)]
    pub from_scores: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated corruption names.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<Kind>>,
    #[arg(long, value_delimiter = ',')]
    pub severities: Option<Vec<u8>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Images whose low-frequency part conditions the samples.
    #[arg(long)]
    pub low: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub smoothness: Option<f64>,
    #[arg(long)]
    pub grain: Option<f64>,
    /// Image size as `C,H,W`.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub path: PathBuf,
}

/// Maps an error to the process exit status.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) | Error::Autodiff(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn echo(cfg: &RunConfig) {
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_run_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&sidecar(path, ".run.toml"), cfg.to_toml().as_bytes())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Stats(a) => cmd_stats(&mut cfg, a),
        Command::Score(a) => cmd_score(&mut cfg, a),
        Command::Eval(a) => cmd_eval(&mut cfg, a),
        Command::Corrupt(a) => cmd_corrupt(&mut cfg, a),
        Command::Sample(a) => cmd_sample(a),
        Command::Synth(a) => cmd_synth(&mut cfg, a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn load_data(p: &Path) -> Result<Dataset> {
    let d = read_dataset(&data_path(p))?;
    log::info!("loaded {} images of shape {:?} from {}", d.len(), &d.images.shape()[1..], p.display());
    Ok(d)
}

/// Applies flag overrides, then sizes and grids the model to the data.
fn resolve_train(cfg: &mut RunConfig, a: &TrainArgs, train_images: &Tensor) -> Result<()> {
    let m = &mut cfg.model;
    if let Some(v) = a.mode {
        m.mode = v;
    }
    if let Some(v) = a.steps {
        m.coupling_steps = v;
    }
    if let Some(v) = a.hidden {
        m.hidden_channels = v;
    }
    if let Some(v) = a.blocks {
        m.residual_blocks = v;
    }
    if let Some(v) = a.sigma {
        m.sigma = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr_max = v;
    }
    if let Some(v) = a.alpha {
        t.alpha = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
        cfg.model.seed = v;
    }
    let s = train_images.shape();
    cfg.model.input_shape = [s[1], s[2], s[3]];
    if cfg.data.fit_range {
        cfg.model.dequant = if cfg.model.mode.decomposes() {
            let high = decompose(train_images, cfg.model.sigma)?.high;
            let range = fit_value_range(high.data(), cfg.data.range_margin)?;
            DequantConfig { value_range: range, ..DequantConfig::high_frequency() }
        } else {
            DequantConfig::unit()
        };
    }
    cfg.validate()
}

fn split(cfg: &RunConfig, d: &Dataset) -> (Dataset, Dataset) {
    d.split(cfg.data.val_fraction, cfg.data.split_seed)
}

fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    cfg.validate()?;
    let data = load_data(&a.data)?;
    let (tr, va) = split(cfg, &data);
    let resume: Option<(Checkpoint, TrainingState)> = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let st = ck.training.clone().ok_or_else(|| Error::Input(format!("{} holds no training state", p.display())))?;
            Some((ck, st))
        }
        None => None,
    };
    match &resume {
        Some((ck, st)) => {
            // the checkpoint fixes the model and schedule
            cfg.model = ck.config.clone();
            cfg.train = st.config.clone();
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
        }
        None => resolve_train(cfg, a, &tr.images)?,
    }
    echo(cfg);
    log::info!("training on {} images, holding out {}", tr.len(), va.len());
    let model = match &resume {
        Some((ck, _)) => ck.model()?,
        None => build_model(&cfg.model)?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let outputs = TrainOutputs { checkpoint: Some(a.out.clone()), log_csv: Some(log_path), stop_after: a.stop_after };
    let mut state = resume.map(|(_, s)| s);
    if let Some(s) = &mut state {
        s.config = cfg.train.clone();
    }
    let out = train(&tr.images, model, &cfg.train, &outputs, state)?;
    let mut ck = Checkpoint::from_model(&out.model);
    ck.training = Some(out.state);
    save_checkpoint(&a.out, &ck)?;
    write_run_config(&a.out, cfg)?;
    if let Some(last) = out.log.last() {
        eprintln!("final training bpd {:.4}", last.bpd);
    }
    Ok(())
}

fn cmd_stats(cfg: &mut RunConfig, a: &StatsArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.score.seed = s;
    }
    cfg.validate()?;
    echo(cfg);
    let mut ck = load_checkpoint(&a.model)?;
    let model = ck.model()?;
    let data = load_data(&a.data)?;
    let (images, split_name) = if a.all {
        (data.images, "all")
    } else {
        (split(cfg, &data).1.images, "validation")
    };
    let stats = compute_stats(&model, &images, cfg.score.seed, split_name)?;
    eprintln!(
        "mu_l {:.6} sigma_l {:.6} mu_t {:.6} sigma_t {:.6} over {} images",
        stats.mu_l, stats.sigma_l, stats.mu_t, stats.sigma_t, stats.n
    );
    stats.save(&a.out.clone().unwrap_or_else(|| sidecar(&a.model, ".stats.json")))?;
    ck.stats = Some(stats);
    save_checkpoint(&a.model, &ck)
}

fn load_model_and_stats(model: &Path, stats: Option<&Path>) -> Result<(FlowModel, Option<NormalizationStats>)> {
    let ck = load_checkpoint(model)?;
    let m = ck.model()?;
    let s = match stats {
        Some(p) => Some(NormalizationStats::load(p)?),
        None => ck.stats,
    };
    Ok((m, s))
}

fn cmd_score(cfg: &mut RunConfig, a: &ScoreArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.score.seed = s;
    }
    cfg.validate()?;
    echo(cfg);
    let (model, stats) = load_model_and_stats(&a.model, a.stats.as_deref())?;
    if stats.is_none() {
        log::warn!("no statistics available; NSD is left empty");
    }
    let data = load_data(&a.data)?;
    let recs = score_dataset(&model, &data.images, &data.ids, stats.as_ref(), cfg.score.seed)?;
    let flagged = recs.iter().filter(|r| r.flagged).count();
    if flagged > 0 {
        log::warn!("{flagged} samples have non-finite scores");
    }
    write_scores_csv(&a.out, &recs)?;
    write_run_config(&a.out, cfg)
}

fn condition_file(kind: &str, severity: u8) -> String {
    format!("{kind}_{severity}.csv")
}

fn cmd_eval(cfg: &mut RunConfig, a: &EvalArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.score.seed = s;
    }
    cfg.validate()?;
    echo(cfg);
    let (id, conditions) = if a.from_scores {
        let dir = a.scores_dir.as_ref().ok_or_else(|| Error::Config("--from-scores needs --scores-dir".into()))?;
        let id = read_scores_csv(&dir.join("id.csv"))?;
        let mut conds = Vec::new();
        for kind in &cfg.corrupt.kinds {
            for &s in &cfg.corrupt.severities {
                let p = dir.join(condition_file(kind.as_str(), s));
                let records = if p.exists() { Some(read_scores_csv(&p)?) } else { None };
                conds.push(Condition { corruption: kind.as_str().into(), severity: s, records });
            }
        }
        (id, conds)
    } else {
        let need = |o: &Option<PathBuf>, flag: &str| o.clone().ok_or_else(|| Error::Config(format!("eval needs {flag}")));
        let (model, stats) = load_model_and_stats(&need(&a.model, "--model")?, a.stats.as_deref())?;
        let id_data = load_data(&need(&a.id, "--id")?)?;
        let suite_dir = data_path(&need(&a.suite, "--suite")?);
        let suite = SuiteManifest::load(&suite_dir)?;
        if !suite.complete {
            return Err(Error::Input(format!("suite {} is incomplete; regenerate it", suite_dir.display())));
        }
        let seed = cfg.score.seed;
        let id = score_dataset(&model, &id_data.images, &id_data.ids, stats.as_ref(), seed)?;
        if let Some(dir) = &a.scores_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            write_scores_csv(&dir.join("id.csv"), &id)?;
        }
        let mut conds = Vec::new();
        for kind in &cfg.corrupt.kinds {
            for &s in &cfg.corrupt.severities {
                let entry = suite.entries.iter().find(|e| e.kind == *kind && e.severity == s);
                let records: Option<Vec<ScoreRecord>> = match entry {
                    Some(e) => {
                        let d = read_dataset(&suite_dir.join(&e.path))?;
                        Some(score_dataset(&model, &d.images, &d.ids, stats.as_ref(), seed)?)
                    }
                    None => None,
                };
                if let (Some(dir), Some(r)) = (&a.scores_dir, &records) {
                    write_scores_csv(&dir.join(condition_file(kind.as_str(), s)), r)?;
                }
                conds.push(Condition { corruption: kind.as_str().into(), severity: s, records });
            }
        }
        (id, conds)
    };
    let report = aggregate_report(&id, &conditions)?;
    write_atomic(&a.out, report.to_csv().as_bytes())?;
    write_run_config(&a.out, cfg)?;
    for row in report.rows.iter().filter(|r| r.severity.is_none()) {
        eprintln!("{} average auroc {:?} fpr95 {:?}", row.metric, row.auroc, row.fpr95);
    }
    Ok(())
}

fn cmd_corrupt(cfg: &mut RunConfig, a: &CorruptArgs) -> Result<()> {
    if let Some(k) = &a.kinds {
        cfg.corrupt.kinds = k.clone();
    }
    if let Some(s) = &a.severities {
        cfg.corrupt.severities = s.clone();
    }
    if let Some(s) = a.seed {
        cfg.corrupt.seed = s;
    }
    cfg.validate()?;
    echo(cfg);
    let data = load_data(&a.data)?;
    let spec = SuiteSpec {
        kinds: cfg.corrupt.kinds.clone(),
        severities: cfg.corrupt.severities.clone(),
        tables: cfg.corrupt.tables.clone(),
        seed: cfg.corrupt.seed,
        run_config: Some(cfg.to_json()),
    };
    let suite = build_ood_suite(&data, &a.out, &spec)?;
    eprintln!("wrote {} corrupted datasets to {}", suite.entries.len(), a.out.display());
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?.model()?;
    let mode = model.config().mode;
    let low_images = match &a.low {
        Some(p) => Some(load_data(p)?),
        None => None,
    };
    let low = match &low_images {
        Some(d) if mode.uses_low() => {
            let n = a.count.min(d.len());
            Some(decompose(&d.images.slice_outer(0, n), model.config().sigma)?.low)
        }
        Some(_) => return Err(Error::Config(format!("mode {mode} does not take --low"))),
        None if mode.uses_low() => return Err(Error::Config(format!("mode {mode} needs --low images"))),
        None => None,
    };
    let drawn = model.sample(low.as_ref(), a.count, a.temperature, a.seed)?;
    // recombine with the conditioning image, or centre a bare high-frequency sample
    let images = match (&low, mode.decomposes()) {
        (Some(l), _) => Tensor::new(l.shape().to_vec(), l.data().iter().zip(drawn.data()).map(|(a, b)| a + b).collect())?,
        (None, true) => drawn.map(|v| v + 0.5),
        (None, false) => drawn,
    }
    .map(|v| v.clamp(0.0, 1.0));
    let n = images.shape()[0];
    let ids: Vec<String> = (0..n).map(|i| format!("sample{i:06}")).collect();
    let info = ManifestInfo {
        name: "samples".into(),
        provenance: Provenance::Clean { source: format!("samples from {}", a.model.display()) },
        tags: vec!["samples".into()],
        bit_depth: 8,
        run_config: Some(serde_json::json!({
            "temperature": a.temperature,
            "seed": a.seed,
            "model_fingerprint": model.fingerprint(),
        })),
    };
    write_dataset(&a.out, &images, &ids, info)?;
    eprintln!("wrote {n} samples to {}", a.out.display());
    Ok(())
}

fn cmd_synth(cfg: &mut RunConfig, a: &SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    if let Some(v) = a.count {
        s.count = v;
    }
    if let Some(v) = a.smoothness {
        s.smoothness = v;
    }
    if let Some(v) = a.grain {
        s.grain = v;
    }
    if let Some(v) = &a.shape {
        s.shape = <[usize; 3]>::try_from(v.as_slice())
            .map_err(|_| Error::Config(format!("--shape takes C,H,W, got {v:?}")))?;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    cfg.validate()?;
    echo(cfg);
    let d = synth_dataset(&cfg.synth)?;
    let mut info = synth_info(&cfg.synth);
    info.run_config = Some(cfg.to_json());
    let m = write_dataset(&a.out, &d.images, &d.ids, info)?;
    eprintln!("wrote {} images to {} (checksum {})", m.count, a.out.display(), m.checksum);
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let p = data_path(&a.path);
    if p.is_file() {
        let ck = load_checkpoint(&p)?;
        println!("checkpoint ok: mode {}, fingerprint {}", ck.config.mode, ck.fingerprint());
        return Ok(());
    }
    if p.join(covflow::corrupt::SUITE_FILE).exists() {
        let suite = SuiteManifest::load(&p)?;
        if !suite.complete {
            return Err(Error::Input(format!("suite {} is incomplete", p.display())));
        }
        for e in &suite.entries {
            let r = verify(&p.join(&e.path))?;
            if r.checksum != e.checksum {
                return Err(Error::Input(format!("{} checksum differs from the suite record", e.path.display())));
            }
        }
        println!("suite ok: {} datasets", suite.entries.len());
        return Ok(());
    }
    if p.join(MANIFEST).exists() {
        let r = verify(&p)?;
        let m = read_manifest(&p)?;
        println!("dataset ok: {} ({} images, checksum {})", m.name, r.count, r.checksum);
        return Ok(());
    }
    Err(Error::Input(format!("{} is not a checkpoint, suite or dataset directory", p.display())))
}
