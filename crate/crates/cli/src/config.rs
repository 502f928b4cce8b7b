use std::path::{Path, PathBuf};

use covflow::corrupt::{Kind, SeverityTables};
use covflow::io::SynthConfig;
use covflow::model::ModelConfig;
use covflow::train::TrainConfig;
use covflow::{Error, Result};
use serde::{Deserialize, Serialize};

/// How training data is split and how the modeled signal's grid is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Held out for normalization statistics.
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Fit the grid range of the high-frequency signal to the training data.
    pub fit_range: bool,
    /// Relative padding on each side of the fitted range.
    pub range_margin: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { val_fraction: 0.1, split_seed: 0, fit_range: true, range_margin: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Pins dequantization noise while scoring.
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptConfig {
    pub seed: u64,
    pub kinds: Vec<Kind>,
    pub severities: Vec<u8>,
    pub tables: SeverityTables,
}

impl Default for CorruptConfig {
    fn default() -> Self {
        CorruptConfig {
            seed: 0,
            kinds: Kind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            tables: SeverityTables::default(),
        }
    }
}

/// Everything that affects results, merged from the config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub score: ScoreConfig,
    pub corrupt: CorruptConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        self.corrupt.tables.validate()?;
        self.synth.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.data.val_fraction)));
        }
        if !(self.data.range_margin >= 0.0) {
            return Err(Error::Config(format!("range_margin must be >= 0, got {}", self.data.range_margin)));
        }
        if let Some(s) = self.corrupt.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return Err(Error::Config(format!("severities must be 1..=5, got {s}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Resolves a data path: relative paths that do not exist as given are looked
/// up under `COVFLOW_DATA_ROOT` when it is set.
pub fn data_path(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(root) = std::env::var_os("COVFLOW_DATA_ROOT") {
            return Path::new(&root).join(p);
        }
    }
    p.to_path_buf()
}
