//! Low/high frequency split and component (de)quantization.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

/// Filter width used throughout unless configured otherwise.
pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPair {
    pub low: Tensor,
    pub high: Tensor,
    pub sigma: f64,
}

/// Truncation radius for a Gaussian of width `sigma`: `ceil(3 sigma)`, at least 1.
pub fn kernel_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Input(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if radius == 0 {
        return Err(Error::Input("gaussian radius must be at least 1".into()));
    }
    let r = radius as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Mirror an out-of-bounds index back into `0..n` without repeating the edge.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn blur_plane(src: &[f64], dst: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect(x as i64 + j as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x];
            }
            dst[y * w + x] = acc;
        }
    }
}

/// Separable Gaussian blur over the last two axes, each plane independently.
pub fn blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() < 2 || image.numel() == 0 {
        return Err(Error::Input(format!("cannot blur an empty image of shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let kernel = gaussian_kernel(sigma, kernel_radius(sigma))?;
    let mut out = Tensor::zeros(shape);
    out.data_mut()
        .par_chunks_mut(h * w)
        .zip(image.data().par_chunks(h * w))
        .for_each(|(dst, src)| blur_plane(src, dst, h, w, &kernel));
    Ok(out)
}

/// Splits `image` into a blurred low part and the residual high part.
pub fn decompose(image: &Tensor, sigma: f64) -> Result<FrequencyPair> {
    if !image.is_finite() {
        return Err(Error::Input("image contains non-finite values".into()));
    }
    let low = blur(image, sigma)?;
    let high = Tensor::new(
        image.shape().to_vec(),
        image.data().iter().zip(low.data()).map(|(x, l)| x - l).collect(),
    )?;
    Ok(FrequencyPair { low, high, sigma })
}

/// Grid used to encode a component before dequantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DequantConfig {
    pub bit_depth: u32,
    pub value_range: [f64; 2],
}

impl Default for DequantConfig {
    fn default() -> Self {
        Self::high_frequency()
    }
}

impl DequantConfig {
    /// 16-bit encoding of a signed high-frequency component.
    pub fn high_frequency() -> Self {
        DequantConfig { bit_depth: 16, value_range: [-0.5, 0.5] }
    }

    /// 16-bit encoding of values in `[0, 1]`.
    pub fn unit() -> Self {
        DequantConfig { bit_depth: 16, value_range: [0.0, 1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return Err(Error::Config(format!("bit_depth must be 8 or 16, got {}", self.bit_depth)));
        }
        let [lo, hi] = self.value_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("value_range must satisfy min < max, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bit_depth
    }

    pub fn width(&self) -> f64 {
        self.value_range[1] - self.value_range[0]
    }

    /// Width of one quantization cell.
    pub fn step(&self) -> f64 {
        self.width() / self.levels() as f64
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.value_range[0] && v <= self.value_range[1]
    }

    /// Grid level of `v`; the upper bound of the range falls into the last cell.
    /// Values outside the range saturate.
    pub fn level(&self, v: f64) -> u32 {
        let t = (v - self.value_range[0]) / self.width() * self.levels() as f64;
        if !(t > 0.0) {
            return 0;
        }
        (t.floor() as u64).min(self.levels() as u64 - 1) as u32
    }

    /// Value at `level + u` cells above the lower bound.
    pub fn decode(&self, level: u32, u: f64) -> f64 {
        self.value_range[0] + (level as f64 + u) * self.step()
    }
}

/// Range of `values` widened by `margin` times its span on each side.
pub fn fit_value_range(values: &[f64], margin: f64) -> Result<[f64; 2]> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Input("cannot fit a value range to empty or non-finite data".into()));
    }
    let pad = ((hi - lo) * margin).max(1e-6);
    Ok([lo - pad, hi + pad])
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

/// Dequantizes with noise from `noise(i)` for flat element `i`, expected in `[0, 1)`.
pub fn dequantize_with(
    component: &Tensor,
    cfg: &DequantConfig,
    mut noise: impl FnMut(usize) -> f64,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut out = Tensor::zeros(component.shape());
    for (i, (&v, o)) in component.data().iter().zip(out.data_mut()).enumerate() {
        if !cfg.contains(v) {
            return Err(Error::OutOfRange {
                index: unravel(i, component.shape()),
                value: v,
                min: cfg.value_range[0],
                max: cfg.value_range[1],
            });
        }
        *o = cfg.decode(cfg.level(v), noise(i));
    }
    Ok(out)
}

/// Snaps every value to its grid level and adds one cell of uniform noise.
pub fn dequantize(component: &Tensor, cfg: &DequantConfig, rng: &mut impl Rng) -> Result<Tensor> {
    dequantize_with(component, cfg, |_| rng.gen::<f64>())
}

/// Like [`dequantize`] but clamps out-of-range values to the range first.
pub fn dequantize_saturating(component: &Tensor, cfg: &DequantConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let [lo, hi] = cfg.value_range;
    dequantize(&component.map(|v| v.clamp(lo, hi)), cfg, rng)
}
