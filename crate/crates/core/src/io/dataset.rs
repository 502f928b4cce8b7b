//! Image datasets on disk: Netpbm directories with a JSON manifest, or
//! CIFAR-10 binary batches.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cifar, netpbm, write_atomic};
use crate::{Error, Result, Tensor};

pub const MANIFEST: &str = "manifest.json";
const IMAGE_DIR: &str = "images";

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Clean {
        source: String,
    },
    Synthetic {
        config: super::synth::SynthConfig,
    },
    Corruption {
        corruption: String,
        severity: u8,
        /// Parameter applied at this severity.
        parameter: f64,
        /// The full per-severity table the parameter was taken from.
        table: Vec<f64>,
        seed: u64,
        source_checksum: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub count: usize,
    pub format: String,
    /// Sample bit depth on disk.
    pub bit_depth: u32,
    /// sha256 over the image files in order.
    pub checksum: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Stable identifiers, one per image, in file order.
    pub ids: Vec<String>,
    /// Resolved settings of the run that produced the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub ids: Vec<String>,
    pub labels: Option<Vec<u8>>,
    pub manifest: Option<DatasetManifest>,
}

impl Dataset {
    pub fn new(images: Tensor) -> Self {
        let n = images.shape().first().copied().unwrap_or(0);
        Dataset { images, ids: (0..n).map(|i| format!("{i:06}")).collect(), labels: None, manifest: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Dataset {
            images: Tensor::new(shape, data).expect("subset sizes"),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            manifest: None,
        }
    }

    /// Deterministic `(train, validation)` split holding out `fraction` of the samples.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64 * fraction).round() as usize).min(self.len());
        let (val, train) = idx.split_at(held);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }
}

fn extension(c: usize) -> &'static str {
    if c == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn file_name(i: usize, c: usize) -> String {
    format!("{i:06}.{}", extension(c))
}

/// Fields of a manifest the writer cannot derive from the images.
#[derive(Debug, Clone)]
pub struct ManifestInfo {
    pub name: String,
    pub provenance: Provenance,
    pub tags: Vec<String>,
    pub bit_depth: u32,
    pub run_config: Option<serde_json::Value>,
}

/// Writes images as Netpbm files followed by the manifest, which is written
/// last so an interrupted write leaves no valid dataset behind.
pub fn write_dataset(dir: &Path, images: &Tensor, ids: &[String], info: ManifestInfo) -> Result<DatasetManifest> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::Input(format!("datasets hold [N, 1|3, H, W] images, got {s:?}")));
    }
    if ids.len() != s[0] {
        return Err(Error::Input(format!("{} ids for {} images", ids.len(), s[0])));
    }
    let maxval = match info.bit_depth {
        8 => 255,
        16 => 65535,
        b => return Err(Error::Config(format!("bit depth must be 8 or 16, got {b}"))),
    };
    let img_dir = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let stale = dir.join(MANIFEST);
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let mut hash = Sha256::new();
    for i in 0..s[0] {
        let bytes = netpbm::encode_netpbm(&images.slice_outer(i, 1).reshape(s[1..].to_vec())?, maxval)?;
        hash.update(&bytes);
        let p = img_dir.join(file_name(i, s[1]));
        std::fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = DatasetManifest {
        name: info.name,
        shape: [s[1], s[2], s[3]],
        count: s[0],
        format: "netpbm".into(),
        bit_depth: info.bit_depth,
        checksum: hex::encode(hash.finalize()),
        provenance: info.provenance,
        tags: info.tags,
        ids: ids.to_vec(),
        run_config: info.run_config,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let p = dir.join(MANIFEST);
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&p, e.to_string()))
}

fn read_manifest_dir(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    if m.ids.len() != m.count {
        return Err(Error::format(dir.join(MANIFEST), format!("{} ids for count {}", m.ids.len(), m.count)));
    }
    let [c, h, w] = m.shape;
    let mut hash = Sha256::new();
    let mut data = Vec::with_capacity(m.count * c * h * w);
    for i in 0..m.count {
        let p = dir.join(IMAGE_DIR).join(file_name(i, c));
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        hash.update(&bytes);
        let (img, _) = netpbm::parse_netpbm(&bytes, &p)?;
        if img.shape() != [c, h, w] {
            return Err(Error::format(&p, format!("shape {:?} differs from manifest {:?}", img.shape(), m.shape)));
        }
        data.extend_from_slice(img.data());
    }
    let extra = count_images(&dir.join(IMAGE_DIR))?;
    if extra != m.count {
        return Err(Error::format(dir, format!("manifest lists {} images, directory holds {extra}", m.count)));
    }
    let sum = hex::encode(hash.finalize());
    if sum != m.checksum {
        return Err(Error::format(dir.join(MANIFEST), format!("checksum mismatch: manifest {}, files {sum}", m.checksum)));
    }
    Ok(Dataset {
        images: Tensor::new(vec![m.count, c, h, w], data)?,
        ids: m.ids.clone(),
        labels: None,
        manifest: Some(m),
    })
}

fn count_images(dir: &Path) -> Result<usize> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if matches!(e.path().extension().and_then(|s| s.to_str()), Some("pgm" | "ppm")) {
            n += 1;
        }
    }
    Ok(n)
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|s| s.to_str()).is_some_and(|x| exts.contains(&x)) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a dataset from a manifest directory, a CIFAR-10 `.bin` file, a
/// directory of `.bin` batches, or a plain directory of Netpbm images.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found")));
    }
    if path.is_file() {
        let (images, labels) = cifar::read_cifar10_binary(path)?;
        let mut d = Dataset::new(images);
        d.labels = Some(labels);
        return Ok(d);
    }
    if path.join(MANIFEST).exists() {
        return read_manifest_dir(path);
    }
    let bins = sorted_files(path, &["bin"])?;
    if !bins.is_empty() {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for b in &bins {
            let (imgs, l) = cifar::read_cifar10_binary(b)?;
            parts.push(imgs);
            labels.extend(l);
        }
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        let mut d = Dataset::new(Tensor::new(vec![labels.len(), 3, 32, 32], data)?);
        d.labels = Some(labels);
        return Ok(d);
    }
    let files = sorted_files(path, &["pgm", "ppm"])?;
    if files.is_empty() {
        return Err(Error::format(path, "no images found"));
    }
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut ids = Vec::new();
    for f in &files {
        let img = netpbm::read_netpbm(f)?;
        match &shape {
            Some(s) if s != img.shape() => {
                return Err(Error::format(f, format!("shape {:?} differs from {:?}", img.shape(), s)))
            }
            _ => shape = Some(img.shape().to_vec()),
        }
        data.extend_from_slice(img.data());
        ids.push(f.file_stem().unwrap_or_default().to_string_lossy().into_owned());
    }
    let mut full = vec![files.len()];
    full.extend(shape.unwrap());
    Ok(Dataset { images: Tensor::new(full, data)?, ids, labels: None, manifest: None })
}

/// Outcome of checking a manifest directory against its files.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub count: usize,
    pub checksum: String,
}

/// Confirms that a manifest directory's count, shapes and checksum match the files on disk.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let d = read_manifest_dir(dir)?;
    let m = d.manifest.expect("manifest datasets carry their manifest");
    Ok(VerifyReport { count: m.count, checksum: m.checksum })
}
