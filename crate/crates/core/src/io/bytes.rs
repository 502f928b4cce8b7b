//! Little-endian helpers for the binary formats.

use std::path::{Path, PathBuf};

use crate::{Error, Result, Tensor};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    /// Length-prefixed (u32) blob.
    pub fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }
    pub fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }
    pub fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
    }
    pub fn tensor_f32(&mut self, t: &Tensor) {
        self.shape(t.shape());
        for &v in t.data() {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    pub fn tensor_f64(&mut self, t: &Tensor) {
        self.shape(t.shape());
        for &v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], path: &Path) -> Self {
        Reader { buf, pos: 0, path: path.to_path_buf() }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Refused(format!("{}: {} (offset {})", self.path.display(), detail.into(), self.pos))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    pub fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("tensor name is not UTF-8"))
    }
    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        Ok(shape)
    }

    fn checked_numel(&self, shape: &[usize], width: usize) -> Result<usize> {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.fail("tensor size overflows"))?;
        match numel.checked_mul(width) {
            Some(bytes) if bytes <= self.remaining() => Ok(numel),
            _ => Err(self.fail(format!("tensor of shape {shape:?} exceeds the file length"))),
        }
    }

    pub fn tensor_f32(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let numel = self.checked_numel(&shape, 4)?;
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    pub fn tensor_f64(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let numel = self.checked_numel(&shape, 8)?;
        let raw = self.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}
