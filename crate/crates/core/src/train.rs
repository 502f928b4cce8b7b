//! Likelihood training with an optional input-gradient penalty.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use covflow_autodiff::{AdError, NodeId};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::bytes::{Reader, Writer};
use crate::io::checkpoint::{read_store_f64, save_checkpoint, write_store_f64, Checkpoint};
use crate::layers::ParamStore;
use crate::model::{FlowGraph, FlowModel, Prepared};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the mean input-gradient norm in the loss.
    pub alpha: f64,
    pub lr_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many epochs (the last epoch always writes).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 2.0,
            lr_max: 5e-4,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            clip_norm: None,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.lr_max > 0.0) || !self.lr_max.is_finite() {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One-cycle schedule: cosine warmup from `lr_max/25` over the first 30% of
/// steps, then cosine decay to `lr_max/1e4`. Steps past the end are clamped.
pub fn one_cycle_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    let start = lr_max / 25.0;
    let end = lr_max / 1e4;
    if total_steps == 0 {
        return start;
    }
    let s = step.min(total_steps) as f64;
    let warm = 0.3 * total_steps as f64;
    if s <= warm {
        start + (lr_max - start) * (1.0 - (PI * s / warm).cos()) / 2.0
    } else {
        let p = (s - warm) / (total_steps as f64 - warm);
        end + (lr_max - end) * (1.0 + (PI * p).cos()) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for each trainable tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, names: &[String]) -> Result<Self> {
        let mut s = OptimizerState::default();
        for n in names {
            let shape = params.get(n)?.shape().to_vec();
            s.m.insert(n.clone(), Tensor::zeros(&shape));
            s.v.insert(n.clone(), Tensor::zeros(&shape));
        }
        Ok(s)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, h: AdamParams) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        for (name, g) in grads {
            let m = self.m.get_mut(name).ok_or_else(|| Error::Input(format!("no moment for `{name}`")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::Input(format!("no moment for `{name}`")))?;
            let p = params.get_mut(name).ok_or_else(|| Error::Input(format!("missing parameter `{name}`")))?;
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = h.beta1 * *mv + (1.0 - h.beta1) * gv;
                *vv = h.beta2 * *vv + (1.0 - h.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub nll_nats: f64,
    pub penalty: f64,
    pub bpd: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,step,nll_nats,penalty,bpd,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.step, self.nll_nats, self.penalty, self.bpd, self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    config: TrainConfig,
    log: Vec<LogRow>,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    /// Full-precision parameters.
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub log: Vec<LogRow>,
}

impl TrainingState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u64(self.epoch as u64);
        w.u64(self.optimizer.step);
        let meta = StateMeta { config: self.config.clone(), log: self.log.clone() };
        w.blob(&serde_json::to_vec(&meta).expect("state meta serializes"));
        write_store_f64(&mut w, &self.params);
        write_store_f64(&mut w, &self.optimizer.m);
        write_store_f64(&mut w, &self.optimizer.v);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let meta: StateMeta = serde_json::from_slice(r.blob()?).map_err(|e| r.fail(format!("bad training state: {e}")))?;
        let params = read_store_f64(&mut r)?;
        let m = read_store_f64(&mut r)?;
        let v = read_store_f64(&mut r)?;
        if r.remaining() != 0 {
            return Err(r.fail("trailing bytes in training state"));
        }
        Ok(TrainingState {
            epoch,
            config: meta.config,
            params,
            optimizer: OptimizerState { m, v, step },
            log: meta.log,
        })
    }
}

/// Value of the training objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Mean negative log-likelihood (nats).
    pub nll: f64,
    /// Mean per-sample input-gradient norm.
    pub penalty: f64,
}

/// Added to the squared input-gradient norm before the square root.
pub const NORM_FLOOR: f64 = 1e-24;

/// Graph computing the objective and its parameter gradients for a fixed batch size.
pub struct LossGraph {
    pub flow: FlowGraph,
    pub loss: NodeId,
    pub nll: NodeId,
    pub penalty: Option<NodeId>,
    pub alpha: f64,
    pub names: Vec<String>,
    pub grads: Vec<NodeId>,
}

impl LossGraph {
    pub fn build(model: &FlowModel, n: usize, alpha: f64, with_grads: bool) -> Result<Self> {
        let mut flow = FlowGraph::build(model, n)?;
        let mean_ll = flow.graph.mean(flow.log_likelihood, &[0])?;
        let mean_ll = flow.graph.reshape(mean_ll, &[])?;
        let nll = flow.graph.neg(mean_ll)?;
        let (loss, penalty) = if alpha > 0.0 {
            let sq = flow.input_gradient_sq_norm()?;
            // keeps the norm and its derivative finite at a zero gradient
            let sq = flow.graph.affine(sq, 1.0, NORM_FLOOR)?;
            let norm = flow.graph.sqrt(sq)?;
            let pen = flow.graph.mean(norm, &[0])?;
            let pen = flow.graph.reshape(pen, &[])?;
            let weighted = flow.graph.scale(pen, alpha)?;
            (flow.graph.add(nll, weighted)?, Some(pen))
        } else {
            (nll, None)
        };
        let names = model.trainable_names();
        let grads = if with_grads {
            let leaves = names.iter().map(|n| flow.params.get(n)).collect::<Result<Vec<_>>>()?;
            flow.graph.grad(loss, &leaves)?
        } else {
            Vec::new()
        };
        Ok(LossGraph { flow, loss, nll, penalty, alpha, names, grads })
    }

    fn outputs(&self, with_grads: bool) -> Vec<NodeId> {
        let mut out = vec![self.loss, self.nll];
        out.extend(self.penalty);
        if with_grads {
            out.extend(&self.grads);
        }
        out
    }

    fn evaluate(&self, model: &FlowModel, batch: &Prepared, with_grads: bool) -> Result<(LossValue, BTreeMap<String, Tensor>), AdError> {
        let b = self
            .flow
            .bindings(model, &batch.input, batch.cond.as_ref())
            .map_err(|_| AdError::EmptyInput)?;
        let outs = self.flow.graph.evaluate(&b, &self.outputs(with_grads))?;
        let mut it = outs.into_iter();
        let loss = it.next().unwrap().data()[0];
        let nll = it.next().unwrap().data()[0];
        let penalty = if self.penalty.is_some() { it.next().unwrap().data()[0] } else { 0.0 };
        let grads = self.names.iter().cloned().zip(it).collect();
        Ok((LossValue { loss, nll, penalty }, grads))
    }
}

/// Objective on a prepared batch: mean NLL plus `alpha` times the mean input-gradient norm.
pub fn loss(model: &FlowModel, batch: &Prepared, alpha: f64) -> Result<LossValue> {
    let n = batch.input.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let lg = LossGraph::build(model, n, alpha, false)?;
    lg.evaluate(model, batch, false)
        .map(|(v, _)| v)
        .map_err(|e| Error::Numeric(format!("loss is not finite: {e}")))
}

/// Loss and parameter gradients on a prepared batch.
pub fn loss_and_grads(model: &FlowModel, batch: &Prepared, alpha: f64) -> Result<(LossValue, BTreeMap<String, Tensor>)> {
    let n = batch.input.shape()[0];
    let lg = LossGraph::build(model, n, alpha, true)?;
    Ok(lg.evaluate(model, batch, true)?)
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
    /// Stop after this many completed epochs, leaving a resumable state.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with parameters rounded to checkpoint precision.
    pub model: FlowModel,
    pub log: Vec<LogRow>,
    pub state: TrainingState,
}

/// Seed of the dequantization noise for one batch.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rand::Rng::gen(&mut rng)
}

/// Shuffled sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn gather(images: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = images.shape()[1..].iter().product();
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(shape, data).expect("gather keeps sizes consistent")
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

const MAX_BAD_BATCHES: usize = 3;

struct GraphCache {
    graphs: HashMap<(usize, bool), LossGraph>,
}

impl GraphCache {
    fn get(&mut self, model: &FlowModel, n: usize, alpha: f64) -> Result<&LossGraph> {
        let key = (n, alpha > 0.0);
        if !self.graphs.contains_key(&key) {
            self.graphs.insert(key, LossGraph::build(model, n, alpha, true)?);
        }
        Ok(&self.graphs[&key])
    }
}

/// Trains `model` on `images` (`[N, C, H, W]` in `[0, 1]`).
///
/// With `resume`, training continues after the recorded epoch using the saved
/// full-precision parameters and optimizer moments.
pub fn train(
    images: &Tensor,
    mut model: FlowModel,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    resume: Option<TrainingState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    let names = model.trainable_names();
    let (start_epoch, mut opt, mut log) = match resume {
        Some(state) => {
            if state.config != *cfg {
                return Err(Error::Config("resume state was produced with a different training configuration".into()));
            }
            *model.params_mut() = state.params;
            (state.epoch, state.optimizer, state.log)
        }
        None => (0, OptimizerState::new(model.params(), &names)?, Vec::new()),
    };
    let spe = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * spe) as u64;
    let dims = model.config().dims() as f64;
    let bit_offset = model.config().dequant.bit_depth as f64 - model.config().dequant.width().log2();
    let mut cache = GraphCache { graphs: HashMap::new() };

    if start_epoch == 0 {
        if let Some(p) = &outputs.log_csv {
            std::fs::write(p, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(p, e))?;
        }
    }

    let mut bad_streak = 0;
    let mut state = None;
    let end = outputs.stop_after.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    for epoch in start_epoch..end {
        let order = epoch_order(cfg.seed, epoch, n);
        let (mut nll_sum, mut pen_sum, mut count) = (0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather(images, idx);
            let prepared = model.prepare(&batch, batch_seed(cfg.seed, epoch, b))?;
            lr = one_cycle_lr(opt.step, total, cfg.lr_max);
            let mut result = cache.get(&model, idx.len(), cfg.alpha)?.evaluate(&model, &prepared, true);
            if result.is_err() && cfg.alpha > 0.0 {
                log::warn!("epoch {epoch} batch {b}: penalty not finite, using likelihood only");
                result = cache.get(&model, idx.len(), 0.0)?.evaluate(&model, &prepared, true);
            }
            let (value, mut grads) = match result {
                Ok(v) => {
                    bad_streak = 0;
                    v
                }
                Err(e) => {
                    bad_streak += 1;
                    log::warn!("epoch {epoch} batch {b}: skipped non-finite batch ({e})");
                    if bad_streak >= MAX_BAD_BATCHES {
                        return Err(Error::Numeric(format!(
                            "{MAX_BAD_BATCHES} consecutive non-finite batches at epoch {epoch}, step {}; last error: {e}",
                            opt.step
                        )));
                    }
                    opt.step += 1;
                    continue;
                }
            };
            if let Some(c) = cfg.clip_norm {
                let norm = global_norm(&grads);
                if norm > c {
                    let f = c / norm;
                    grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= f));
                }
            }
            opt.update(model.params_mut(), &grads, lr, AdamParams::default())?;
            nll_sum += value.nll * idx.len() as f64;
            pen_sum += value.penalty * idx.len() as f64;
            count += idx.len();
        }
        let nll = if count > 0 { nll_sum / count as f64 } else { f64::NAN };
        let row = LogRow {
            epoch: epoch + 1,
            step: opt.step,
            nll_nats: nll,
            penalty: if count > 0 { pen_sum / count as f64 } else { f64::NAN },
            bpd: nll / (dims * std::f64::consts::LN_2) + bit_offset,
            lr,
        };
        log::info!("{}", row.csv());
        if let Some(p) = &outputs.log_csv {
            let mut f = std::fs::OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(p, e))?;
        }
        log.push(row);
        let st = TrainingState {
            epoch: epoch + 1,
            config: cfg.clone(),
            params: model.params().clone(),
            optimizer: opt.clone(),
            log: log.clone(),
        };
        let last = epoch + 1 == end;
        if let Some(path) = &outputs.checkpoint {
            if last || (epoch + 1) % cfg.checkpoint_every == 0 {
                let mut ck = Checkpoint::from_model(&model);
                ck.training = Some(st.clone());
                save_checkpoint(path, &ck)?;
            }
        }
        state = Some(st);
    }
    let state = match state {
        Some(s) => s,
        None => TrainingState {
            epoch: start_epoch,
            config: cfg.clone(),
            params: model.params().clone(),
            optimizer: opt,
            log: log.clone(),
        },
    };
    model.round_to_storage();
    Ok(TrainOutcome { model, log, state })
}
