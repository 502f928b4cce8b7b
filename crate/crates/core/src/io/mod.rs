//! Datasets, image formats and checkpoints.

pub mod checkpoint;
pub mod cifar;
pub mod dataset;
pub mod netpbm;
pub mod synth;

pub(crate) mod bytes;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{read_dataset, verify, write_dataset, Dataset, DatasetManifest, ManifestInfo, Provenance};
pub use synth::{synth_dataset, SynthConfig};

use std::path::Path;

use crate::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
