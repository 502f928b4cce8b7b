//! Versioned binary model checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "CVFL" | u32 version | blob config-json
//! u32 tensor-count | { u16 name-len, name, u8 rank, u32 dims.., f32 values.. }*
//! u8 has-stats | [blob stats-json]
//! blob training-state
//! [32] fingerprint = sha256(config-json || tensor section)
//! [32] sha256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::bytes::{Reader, Writer};
use crate::layers::ParamStore;
use crate::model::{FlowModel, ModelConfig};
use crate::score::NormalizationStats;
use crate::train::TrainingState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVFL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stats: Option<NormalizationStats>,
    pub training: Option<TrainingState>,
}

fn config_bytes(config: &ModelConfig) -> Vec<u8> {
    serde_json::to_vec(config).expect("model config serializes")
}

fn tensor_section(params: &ParamStore) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.name(name);
        w.tensor_f32(t);
    }
    w.buf
}

fn digest(config: &[u8], tensors: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config);
    h.update(tensors);
    h.finalize().into()
}

/// Hex fingerprint of a configuration and its parameters at storage precision.
pub fn fingerprint(config: &ModelConfig, params: &ParamStore) -> String {
    hex::encode(digest(&config_bytes(config), &tensor_section(params)))
}

impl Checkpoint {
    pub fn from_model(model: &FlowModel) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            stats: None,
            training: None,
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.config, &self.params)
    }

    pub fn model(&self) -> Result<FlowModel> {
        FlowModel::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = config_bytes(&self.config);
        let tensors = tensor_section(&self.params);
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.blob(&cfg);
        w.bytes(&tensors);
        match &self.stats {
            Some(s) => {
                w.u8(1);
                w.blob(&serde_json::to_vec(s).expect("stats serialize"));
            }
            None => w.u8(0),
        }
        let train = self.training.as_ref().map(|t| t.to_bytes()).unwrap_or_default();
        w.blob(&train);
        w.bytes(&digest(&cfg, &tensors));
        let sum: [u8; 32] = Sha256::digest(&w.buf).into();
        w.bytes(&sum);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(Error::Refused(format!("{}: not a checkpoint (bad magic)", path.display())));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Refused(format!(
                "{}: unsupported format version {version} (this build reads {VERSION})",
                path.display()
            )));
        }
        let cfg_raw = r.blob()?;
        let tensors_start = r.pos();
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.name()?;
            let t = r.tensor_f32()?;
            params.insert(name, t);
        }
        let tensors_raw = &bytes[tensors_start..r.pos()];
        let stats_raw = match r.u8()? {
            0 => None,
            1 => Some(r.blob()?),
            f => return Err(r.fail(format!("bad stats flag {f}"))),
        };
        let train_raw = r.blob()?;
        let stored_fp = r.take(32)?;
        let body_len = r.pos();
        let stored_sum = r.take(32)?;
        if r.remaining() != 0 {
            return Err(r.fail("trailing bytes after checksum"));
        }
        let fp = digest(cfg_raw, tensors_raw);
        if fp != stored_fp {
            return Err(Error::Fingerprint { expected: hex::encode(stored_fp), found: hex::encode(fp) });
        }
        let sum: [u8; 32] = Sha256::digest(&bytes[..body_len]).into();
        if sum != stored_sum {
            return Err(Error::Refused(format!("{}: checksum mismatch", path.display())));
        }
        let config: ModelConfig = serde_json::from_slice(cfg_raw)
            .map_err(|e| Error::Refused(format!("{}: bad config: {e}", path.display())))?;
        let stats = stats_raw
            .map(|s| serde_json::from_slice(s))
            .transpose()
            .map_err(|e| Error::Refused(format!("{}: bad stats: {e}", path.display())))?;
        let training = if train_raw.is_empty() {
            None
        } else {
            Some(TrainingState::from_bytes(train_raw, path)?)
        };
        Ok(Checkpoint { config, params, stats, training })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    super::write_atomic(path, &ckpt.to_bytes())
}

/// Reads and verifies a checkpoint; nothing is returned unless every check passes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

pub(crate) fn write_store_f64(w: &mut Writer, store: &ParamStore) {
    w.u32(store.len() as u32);
    for (name, t) in store.iter() {
        w.name(name);
        w.tensor_f64(t);
    }
}

pub(crate) fn read_store_f64(r: &mut Reader<'_>) -> Result<ParamStore> {
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.name()?;
        let t = r.tensor_f64()?;
        store.insert(name, t);
    }
    Ok(store)
}
