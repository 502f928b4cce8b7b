//! Binary PGM (P5) and PPM (P6) images.

use std::path::Path;

use crate::{Error, Result, Tensor};

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let fail = |pos: usize, what: &str| Error::format(path, format!("malformed netpbm header at byte {pos}: {what}"));
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(fail(0, "missing P5/P6 magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(fail(1, "only binary P5 and P6 are supported")),
    };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "unexpected end of header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(fail(start, ["expected width", "expected height", "expected maxval"][i]));
        }
        *field = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().unwrap();
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected a single whitespace byte before the raster")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fail(pos, "maxval must be in 1..=65535"));
    }
    Ok(Header { channels, width: width as usize, height: height as usize, maxval: maxval as u32, data_start: pos })
}

/// Decodes an image to a `[C, H, W]` tensor in `[0, 1]`, returning its maxval too.
pub fn parse_netpbm(bytes: &[u8], path: &Path) -> Result<(Tensor, u32)> {
    let h = parse_header(bytes, path)?;
    let width = if h.maxval > 255 { 2 } else { 1 };
    let count = h
        .channels
        .checked_mul(h.width)
        .and_then(|v| v.checked_mul(h.height))
        .ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    let need = count.checked_mul(width).ok_or_else(|| Error::format(path, "image dimensions overflow"))?;
    let raster = &bytes[h.data_start..];
    if raster.len() < need {
        return Err(Error::format(
            path,
            format!("raster at byte {} needs {need} bytes, file has {}", h.data_start, raster.len()),
        ));
    }
    let max = h.maxval as f64;
    let value = |i: usize| -> f64 {
        let v = if width == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64
        } else {
            raster[i] as f64
        };
        v / max
    };
    // interleaved rows to channel planes
    let (c, hw) = (h.channels, h.width * h.height);
    let img = Tensor::from_fn(&[c, h.height, h.width], |j| value((j % hw) * c + j / hw));
    Ok((img, h.maxval))
}

pub fn read_netpbm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_netpbm(&bytes, path)?.0)
}

/// Encodes a `[C, H, W]` image (C = 1 or 3) with values clamped to `[0, 1]`.
pub fn encode_netpbm(image: &Tensor, maxval: u32) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Input(format!("netpbm needs a [1|3, H, W] image, got {s:?}")));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(Error::Input(format!("maxval must be 255 or 65535, got {maxval}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let hw = h * w;
    for p in 0..hw {
        for ch in 0..c {
            let v = (image.data()[ch * hw + p].clamp(0.0, 1.0) * maxval as f64).round() as u32;
            if maxval > 255 {
                out.extend_from_slice(&(v as u16).to_be_bytes());
            } else {
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_netpbm(path: &Path, image: &Tensor, maxval: u32) -> Result<()> {
    let bytes = encode_netpbm(image, maxval)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
