//! Synthetic textures for small-scale experiments.
//!
//! Each image is a smooth luminance field shared by all channels plus a
//! weaker per-channel chroma field, both Gaussian-blurred uniform noise, with
//! photon-like grain whose variance grows with brightness. The grain ties the
//! high-frequency statistics to the low-frequency content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetManifest, ManifestInfo, Provenance};
use crate::freq::blur;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    /// Blur width of the underlying noise; 0 gives white noise.
    pub smoothness: f64,
    /// Grain standard deviation at full brightness.
    pub grain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 2000, shape: [3, 16, 16], smoothness: 2.0, grain: 0.04, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.shape;
        if !(c == 1 || c == 3) || h == 0 || w == 0 {
            return Err(Error::Config(format!("synthetic shape must be [1|3, H, W], got {:?}", self.shape)));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Config(format!("smoothness must be >= 0, got {}", self.smoothness)));
        }
        if !(self.grain >= 0.0 && self.grain.is_finite()) {
            return Err(Error::Config(format!("grain must be >= 0, got {}", self.grain)));
        }
        Ok(())
    }
}

fn field(rng: &mut ChaCha8Rng, planes: usize, h: usize, w: usize, sigma: f64) -> Tensor {
    let noise = Tensor::from_fn(&[planes, h, w], |_| rng.gen::<f64>() - 0.5);
    let mut f = if sigma > 0.0 { blur(&noise, sigma).expect("valid blur") } else { noise };
    // standardize each plane so contrast does not collapse as smoothness grows
    for p in f.data_mut().chunks_mut(h * w) {
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-12);
        p.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    f
}

/// One 8-bit quantized image, in `[0, 1]`.
pub fn synth_image(cfg: &SynthConfig, index: u64) -> Tensor {
    let [c, h, w] = cfg.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let offset = rng.gen_range(-0.15..0.15);
    let lum = field(&mut rng, 1, h, w, cfg.smoothness);
    let chroma = field(&mut rng, c, h, w, cfg.smoothness);
    let normal = rand_distr::StandardNormal;
    Tensor::from_fn(&[c, h, w], |i| {
        let base = (0.5 + offset + 0.15 * (0.8 * lum.data()[i % (h * w)] + 0.6 * chroma.data()[i])).clamp(0.0, 1.0);
        let z: f64 = rng.sample(normal);
        let v = (base + cfg.grain * base.sqrt() * z).clamp(0.0, 1.0);
        (v * 255.0).round() / 255.0
    })
}

/// Generates `cfg.count` images; image `i` depends only on `(seed, i)`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let [c, h, w] = cfg.shape;
    let data: Vec<f64> = (0..cfg.count as u64).flat_map(|i| synth_image(cfg, i).into_data()).collect();
    let images = Tensor::new(vec![cfg.count, c, h, w], data)?;
    let mut d = Dataset::new(images);
    d.manifest = Some(DatasetManifest {
        name: format!("synth-{}", cfg.seed),
        shape: cfg.shape,
        count: cfg.count,
        format: "memory".into(),
        bit_depth: 8,
        checksum: String::new(),
        provenance: Provenance::Synthetic { config: cfg.clone() },
        tags: vec!["synthetic".into()],
        ids: d.ids.clone(),
        run_config: None,
    });
    Ok(d)
}

/// Manifest fields for writing a synthetic dataset to disk.
pub fn synth_info(cfg: &SynthConfig) -> ManifestInfo {
    ManifestInfo {
        name: format!("synth-{}", cfg.seed),
        provenance: Provenance::Synthetic { config: cfg.clone() },
        tags: vec!["synthetic".into()],
        bit_depth: 8,
        run_config: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_quantized() {
        let cfg = SynthConfig { count: 4, shape: [3, 8, 8], ..Default::default() };
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.images, b.images);
        assert!(a.images.data().iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
        let other = synth_dataset(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.images, other.images);
    }

    #[test]
    fn image_depends_only_on_index() {
        let cfg = SynthConfig { count: 5, shape: [1, 6, 6], ..Default::default() };
        let d = synth_dataset(&cfg).unwrap();
        assert_eq!(d.images.slice_outer(3, 1).into_data(), synth_image(&cfg, 3).into_data());
    }
}
