//! Per-sample OOD scores: log-likelihood, typicality (norm of the input
//! gradient of the log-likelihood) and the normalized score distance (NSD)
//! that combines the two.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use covflow_autodiff::{EvalOptions, NodeId};
use serde::{Deserialize, Serialize};

use crate::io::write_atomic;
use crate::model::{FlowGraph, FlowModel, EVAL_CHUNK};
use crate::{Error, Result, Tensor};

pub const SCORES_HEADER: &str = "sample_id,ll_nats,grad_norm,nsd";

/// Reference statistics of in-distribution scores, tied to one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationStats {
    pub mu_l: f64,
    pub sigma_l: f64,
    pub mu_t: f64,
    pub sigma_t: f64,
    pub n: usize,
    pub model_fingerprint: String,
    /// Which data the statistics were computed on, e.g. `validation`.
    pub split: String,
    /// Dequantization seed used while scoring.
    pub seed: u64,
}

impl NormalizationStats {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Input(format!("statistics need at least 2 samples, got {}", self.n)));
        }
        for (name, v) in [("sigma_l", self.sigma_l), ("sigma_t", self.sigma_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.mu_l.is_finite() && self.mu_t.is_finite()) {
            return Err(Error::Input("statistics means are not finite".into()));
        }
        Ok(())
    }

    pub fn check_model(&self, model: &FlowModel) -> Result<()> {
        let fp = model.fingerprint();
        if fp != self.model_fingerprint {
            return Err(Error::Fingerprint { expected: self.model_fingerprint.clone(), found: fp });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self).expect("stats serialize"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Raw scores of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawScore {
    pub log_likelihood: f64,
    pub grad_norm: f64,
}

impl RawScore {
    pub fn is_finite(&self) -> bool {
        self.log_likelihood.is_finite() && self.grad_norm.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub log_likelihood: f64,
    pub grad_norm: f64,
    pub nsd: Option<f64>,
    /// Set when either raw score is not finite.
    pub flagged: bool,
}

struct ScoreGraph {
    flow: FlowGraph,
    sq_norm: NodeId,
}

/// Log-likelihood and input-gradient norm per sample, with dequantization
/// noise pinned by `seed`. Non-finite results are returned as such.
pub fn score_batch(model: &FlowModel, images: &Tensor, seed: u64) -> Result<Vec<RawScore>> {
    let p = model.prepare(images, seed)?;
    let n = p.input.shape()[0];
    let mut graphs: HashMap<usize, ScoreGraph> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        if !graphs.contains_key(&len) {
            let mut flow = model.forward_graph(len)?;
            let sq_norm = flow.input_gradient_sq_norm()?;
            graphs.insert(len, ScoreGraph { flow, sq_norm });
        }
        let sg = &graphs[&len];
        let xi = p.input.slice_outer(start, len);
        let ci = p.cond.as_ref().map(|c| c.slice_outer(start, len));
        let b = sg.flow.bindings(model, &xi, ci.as_ref())?;
        let vals = sg.flow.graph.evaluate_with(
            &b,
            &[sg.flow.log_likelihood, sg.sq_norm],
            EvalOptions { check_finite: false },
        )?;
        for i in 0..len {
            out.push(RawScore { log_likelihood: vals[0].data()[i], grad_norm: vals[1].data()[i].sqrt() });
        }
        start += len;
    }
    Ok(out)
}

/// Euclidean norm of the input gradient of each sample's log-likelihood.
pub fn typicality_score(model: &FlowModel, images: &Tensor, seed: u64) -> Result<Vec<f64>> {
    Ok(score_batch(model, images, seed)?.into_iter().map(|s| s.grad_norm).collect())
}

/// Statistics from already computed scores.
pub fn stats_from_scores(scores: &[RawScore], fingerprint: &str, split: &str, seed: u64) -> Result<NormalizationStats> {
    let bad = scores.iter().filter(|s| !s.is_finite()).count();
    if bad > 0 {
        return Err(Error::Numeric(format!("{bad} of {} reference samples have non-finite scores", scores.len())));
    }
    let ll: Vec<f64> = scores.iter().map(|s| s.log_likelihood).collect();
    let gn: Vec<f64> = scores.iter().map(|s| s.grad_norm).collect();
    if ll.len() < 2 {
        return Err(Error::Input(format!("statistics need at least 2 samples, got {}", ll.len())));
    }
    let (mu_l, sigma_l) = mean_std(&ll);
    let (mu_t, sigma_t) = mean_std(&gn);
    let stats = NormalizationStats {
        mu_l,
        sigma_l,
        mu_t,
        sigma_t,
        n: ll.len(),
        model_fingerprint: fingerprint.to_string(),
        split: split.to_string(),
        seed,
    };
    stats.validate()?;
    Ok(stats)
}

/// Reference statistics over held-out in-distribution images.
pub fn compute_stats(model: &FlowModel, images: &Tensor, seed: u64, split: &str) -> Result<NormalizationStats> {
    let scores = score_batch(model, images, seed)?;
    stats_from_scores(&scores, &model.fingerprint(), split, seed)
}

/// Sum of the standardized absolute deviations, each score against its own statistics.
pub fn nsd(ll: f64, grad_norm: f64, stats: &NormalizationStats) -> f64 {
    (ll - stats.mu_l).abs() / stats.sigma_l + (grad_norm - stats.mu_t).abs() / stats.sigma_t
}

/// Scores every image; with `stats`, also NSD after checking the model fingerprint.
pub fn score_dataset(
    model: &FlowModel,
    images: &Tensor,
    ids: &[String],
    stats: Option<&NormalizationStats>,
    seed: u64,
) -> Result<Vec<ScoreRecord>> {
    if let Some(s) = stats {
        s.validate()?;
        s.check_model(model)?;
    }
    if ids.len() != images.shape().first().copied().unwrap_or(0) {
        return Err(Error::Input(format!("{} ids for {} images", ids.len(), images.shape()[0])));
    }
    let raw = score_batch(model, images, seed)?;
    Ok(raw
        .into_iter()
        .zip(ids)
        .map(|(r, id)| {
            let flagged = !r.is_finite();
            ScoreRecord {
                sample_id: id.clone(),
                log_likelihood: r.log_likelihood,
                grad_norm: r.grad_norm,
                nsd: stats.map(|s| if flagged { f64::NAN } else { nsd(r.log_likelihood, r.grad_norm, s) }),
                flagged,
            }
        })
        .collect())
}

fn fmt(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v:?}")
}

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut s = String::from(SCORES_HEADER);
    s.push('\n');
    for r in records {
        let nsd = r.nsd.map(fmt).unwrap_or_else(|| "NA".into());
        s.push_str(&format!("{},{},{},{}\n", r.sample_id, fmt(r.log_likelihood), fmt(r.grad_norm), nsd));
    }
    s
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(scores_csv(records).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != SCORES_HEADER {
        return Err(Error::format(path, format!("expected header {SCORES_HEADER:?}, got {:?}", header.join(","))));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::format(path, format!("row {}: bad number {:?}", line + 2, &rec[i])))
        };
        let ll = num(1)?;
        let gn = num(2)?;
        let nsd = if &rec[3] == "NA" { None } else { Some(num(3)?) };
        out.push(ScoreRecord {
            sample_id: rec[0].to_string(),
            log_likelihood: ll,
            grad_norm: gn,
            nsd,
            flagged: !(ll.is_finite() && gn.is_finite()),
        });
    }
    Ok(out)
}
