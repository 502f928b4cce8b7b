//! Synthetic covariate shifts at five severities: noise, blur and simple
//! photometric and resampling effects.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::freq::blur;
use crate::io::dataset::{write_dataset, Dataset, ManifestInfo, Provenance};
use crate::io::write_atomic;
use crate::{Error, Result, Tensor};

pub const SUITE_FILE: &str = "suite.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Saturate,
    Pixelate,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::GaussianNoise,
        Kind::ShotNoise,
        Kind::ImpulseNoise,
        Kind::GaussianBlur,
        Kind::Contrast,
        Kind::Brightness,
        Kind::Saturate,
        Kind::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::GaussianNoise => "gaussian_noise",
            Kind::ShotNoise => "shot_noise",
            Kind::ImpulseNoise => "impulse_noise",
            Kind::GaussianBlur => "gaussian_blur",
            Kind::Contrast => "contrast",
            Kind::Brightness => "brightness",
            Kind::Saturate => "saturate",
            Kind::Pixelate => "pixelate",
        }
    }

    /// Whether the output depends on random draws.
    pub fn stochastic(self) -> bool {
        matches!(self, Kind::GaussianNoise | Kind::ShotNoise | Kind::ImpulseNoise)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Kind::ALL.iter().map(|k| k.as_str()).collect();
            Error::Input(format!("unknown corruption {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Parameter for each kind at severities 1..=5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityTables {
    /// Noise standard deviation.
    pub gaussian_noise: [f64; 5],
    /// Photon count at full intensity.
    pub shot_noise: [f64; 5],
    /// Fraction of values replaced by 0 or 1.
    pub impulse_noise: [f64; 5],
    /// Blur sigma in pixels.
    pub gaussian_blur: [f64; 5],
    /// Factor on the deviation from the image mean.
    pub contrast: [f64; 5],
    /// Additive offset.
    pub brightness: [f64; 5],
    /// Factor on the deviation from the per-pixel gray level.
    pub saturate: [f64; 5],
    /// Downscale factor.
    pub pixelate: [f64; 5],
}

impl Default for SeverityTables {
    fn default() -> Self {
        SeverityTables {
            gaussian_noise: [0.04, 0.08, 0.12, 0.18, 0.26],
            shot_noise: [500.0, 250.0, 100.0, 50.0, 25.0],
            impulse_noise: [0.01, 0.02, 0.05, 0.1, 0.15],
            gaussian_blur: [0.5, 1.0, 1.5, 2.0, 3.0],
            contrast: [0.75, 0.5, 0.4, 0.3, 0.15],
            brightness: [0.05, 0.1, 0.15, 0.2, 0.3],
            saturate: [1.3, 1.6, 2.0, 2.5, 3.0],
            pixelate: [1.25, 1.5, 2.0, 2.67, 4.0],
        }
    }
}

impl SeverityTables {
    pub fn table(&self, kind: Kind) -> [f64; 5] {
        match kind {
            Kind::GaussianNoise => self.gaussian_noise,
            Kind::ShotNoise => self.shot_noise,
            Kind::ImpulseNoise => self.impulse_noise,
            Kind::GaussianBlur => self.gaussian_blur,
            Kind::Contrast => self.contrast,
            Kind::Brightness => self.brightness,
            Kind::Saturate => self.saturate,
            Kind::Pixelate => self.pixelate,
        }
    }

    pub fn parameter(&self, kind: Kind, severity: u8) -> Result<f64> {
        check_severity(severity)?;
        Ok(self.table(kind)[severity as usize - 1])
    }

    pub fn validate(&self) -> Result<()> {
        for kind in Kind::ALL {
            for (i, &p) in self.table(kind).iter().enumerate() {
                check_parameter(kind, p).map_err(|e| Error::Config(format!("{kind} severity {}: {e}", i + 1)))?;
            }
        }
        Ok(())
    }
}

fn check_severity(severity: u8) -> Result<()> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Input(format!("severity must be 1..=5, got {severity}")));
    }
    Ok(())
}

fn check_parameter(kind: Kind, p: f64) -> std::result::Result<(), String> {
    let ok = p.is_finite()
        && match kind {
            Kind::GaussianNoise | Kind::Contrast | Kind::Saturate => p >= 0.0,
            Kind::ShotNoise => p > 0.0,
            Kind::ImpulseNoise => (0.0..=1.0).contains(&p),
            Kind::GaussianBlur => p >= 0.0,
            Kind::Brightness => true,
            Kind::Pixelate => p >= 1.0,
        };
    if ok {
        Ok(())
    } else {
        Err(format!("parameter {p} out of range"))
    }
}

fn nearest(i: usize, from: usize, to: usize) -> usize {
    (((i as f64 + 0.5) * to as f64 / from as f64) as usize).min(to - 1)
}

/// Applies one corruption with parameter `param` to an image `[C, H, W]` in `[0, 1]`.
pub fn apply(image: &Tensor, kind: Kind, param: f64, rng: &mut impl Rng) -> Result<Tensor> {
    Ok(apply_unclamped(image, kind, param, rng)?.map(|v| v.clamp(0.0, 1.0)))
}

/// [`apply`] without the final clamp to `[0, 1]`.
pub fn apply_unclamped(image: &Tensor, kind: Kind, param: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Input(format!("corruptions take one [C, H, W] image, got {s:?}")));
    }
    check_parameter(kind, param).map_err(|e| Error::Input(format!("{kind}: {e}")))?;
    let (c, h, w) = (s[0], s[1], s[2]);
    let x = image.data();
    let out = match kind {
        Kind::GaussianNoise => Tensor::from_fn(s, |i| x[i] + param * rng.sample::<f64, _>(StandardNormal)),
        Kind::ShotNoise => Tensor::from_fn(s, |i| {
            let rate = x[i].max(0.0) * param;
            if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(rng) / param
            } else {
                0.0
            }
        }),
        Kind::ImpulseNoise => Tensor::from_fn(s, |i| {
            if rng.gen::<f64>() < param {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            } else {
                x[i]
            }
        }),
        Kind::GaussianBlur if param == 0.0 => image.clone(),
        Kind::GaussianBlur => blur(image, param)?,
        Kind::Contrast => {
            let m = image.sum() / image.numel() as f64;
            // written so that a factor of 1 is exact
            image.map(|v| v * param + m * (1.0 - param))
        }
        Kind::Brightness => image.map(|v| v + param),
        Kind::Saturate => {
            let hw = h * w;
            Tensor::from_fn(s, |i| {
                let p = i % hw;
                let gray = (0..c).map(|ch| x[ch * hw + p]).sum::<f64>() / c as f64;
                x[i] * param + gray * (1.0 - param)
            })
        }
        Kind::Pixelate => {
            let sh = ((h as f64 / param).round() as usize).max(1);
            let sw = ((w as f64 / param).round() as usize).max(1);
            Tensor::from_fn(s, |i| {
                let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                // nearest small-grid cell, then that cell's nearest source pixel
                let sy = nearest(nearest(y, h, sh), sh, h);
                let sx = nearest(nearest(xx, w, sw), sw, w);
                x[ch * h * w + sy * w + sx]
            })
        }
    };
    Ok(out)
}

/// RNG for image `index` of the `(kind, severity)` copy under `seed`.
pub fn corruption_rng(seed: u64, kind: Kind, severity: u8, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(kind.as_str().as_bytes());
    h.update([severity]);
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    rng.set_stream(index);
    rng
}

/// Corrupts a batch `[N, C, H, W]` and quantizes the result to 8 bits, matching
/// how corrupted sets are stored.
pub fn corrupt_batch(images: &Tensor, kind: Kind, severity: u8, tables: &SeverityTables, seed: u64) -> Result<Tensor> {
    let param = tables.parameter(kind, severity)?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("expected [N, C, H, W] images, got {s:?}")));
    }
    let per: usize = s[1..].iter().product();
    let parts: Vec<Vec<f64>> = (0..s[0])
        .into_par_iter()
        .map(|i| {
            let img = Tensor::new(s[1..].to_vec(), images.data()[i * per..(i + 1) * per].to_vec())?;
            let mut rng = corruption_rng(seed, kind, severity, i as u64);
            Ok(apply(&img, kind, param, &mut rng)?.into_data())
        })
        .collect::<Result<_>>()?;
    let data = parts.into_iter().flatten().map(|v| (v * 255.0).round() / 255.0).collect();
    Ok(Tensor::new(s.to_vec(), data)?)
}

/// sha256 over the bit patterns of a tensor's shape and values.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    pub kind: Kind,
    pub severity: u8,
    /// Relative to the suite directory.
    pub path: PathBuf,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    /// False until every entry has been written.
    pub complete: bool,
    pub seed: u64,
    pub source_checksum: String,
    pub tables: SeverityTables,
    pub entries: Vec<SuiteEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl SuiteManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(SUITE_FILE);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&p, e.to_string()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(SUITE_FILE), &serde_json::to_vec_pretty(self).expect("suite serializes"))
    }
}

/// Options for [`build_ood_suite`].
#[derive(Debug, Clone)]
pub struct SuiteSpec {
    pub kinds: Vec<Kind>,
    pub severities: Vec<u8>,
    pub tables: SeverityTables,
    pub seed: u64,
    pub run_config: Option<serde_json::Value>,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            kinds: Kind::ALL.to_vec(),
            severities: vec![1, 2, 3, 4, 5],
            tables: SeverityTables::default(),
            seed: 0,
            run_config: None,
        }
    }
}

/// Writes one corrupted copy of `clean` per (kind, severity) under
/// `out/<kind>/<severity>/`. The suite file is marked complete only after the
/// last copy is on disk.
pub fn build_ood_suite(clean: &Dataset, out: &Path, spec: &SuiteSpec) -> Result<SuiteManifest> {
    spec.tables.validate()?;
    for &s in &spec.severities {
        check_severity(s)?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let source_checksum = match &clean.manifest {
        Some(m) if !m.checksum.is_empty() => m.checksum.clone(),
        _ => tensor_checksum(&clean.images),
    };
    let mut suite = SuiteManifest {
        complete: false,
        seed: spec.seed,
        source_checksum: source_checksum.clone(),
        tables: spec.tables.clone(),
        entries: Vec::new(),
        run_config: spec.run_config.clone(),
    };
    suite.save(out)?;
    for &kind in &spec.kinds {
        for &severity in &spec.severities {
            let images = corrupt_batch(&clean.images, kind, severity, &spec.tables, spec.seed)?;
            let rel = PathBuf::from(kind.as_str()).join(severity.to_string());
            let info = ManifestInfo {
                name: format!("{kind}-{severity}"),
                provenance: Provenance::Corruption {
                    corruption: kind.as_str().into(),
                    severity,
                    parameter: spec.tables.parameter(kind, severity)?,
                    table: spec.tables.table(kind).to_vec(),
                    seed: spec.seed,
                    source_checksum: source_checksum.clone(),
                },
                tags: vec!["ood".into(), "corruption".into()],
                bit_depth: 8,
                run_config: spec.run_config.clone(),
            };
            let m = write_dataset(&out.join(&rel), &images, &clean.ids, info)?;
            suite.entries.push(SuiteEntry { kind, severity, path: rel, checksum: m.checksum });
            log::info!("wrote {kind} severity {severity}");
        }
    }
    suite.complete = true;
    suite.save(out)?;
    Ok(suite)
}
