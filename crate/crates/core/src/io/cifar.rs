//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 32x32 red, green and blue planes.

use std::path::Path;

use crate::{Error, Result, Tensor};

pub const RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

/// Images `[N, 3, 32, 32]` in `[0, 1]` and their labels.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Tensor, Vec<u8>)> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!("size {} is not a multiple of the {RECORD_BYTES}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, SIDE, SIDE], data)?, labels))
}

pub fn read_cifar10_binary(path: &Path) -> Result<(Tensor, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, path)
}

pub fn encode_cifar10(images: &Tensor, labels: &[u8]) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1..] != [3, SIDE, SIDE] {
        return Err(Error::Input(format!("CIFAR-10 records hold [N, 3, 32, 32] images, got {s:?}")));
    }
    if labels.len() != s[0] {
        return Err(Error::Input(format!("{} labels for {} images", labels.len(), s[0])));
    }
    let mut out = Vec::with_capacity(s[0] * RECORD_BYTES);
    for (i, &label) in labels.iter().enumerate() {
        out.push(label);
        out.extend(
            images.data()[i * PIXELS..(i + 1) * PIXELS]
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar10_binary(path: &Path, images: &Tensor, labels: &[u8]) -> Result<()> {
    let bytes = encode_cifar10(images, labels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
