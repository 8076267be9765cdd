//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `FACLCKPT` magic, `u32` version, `u32` header length, UTF-8 run config,
//! `u32` tensor count, then per tensor `u32` name length, name, `u64` rows,
//! `u64` cols, and `rows * cols` `f64` values.

use crate::config::RunConfig;
use crate::error::{FaclError, Result};
use crate::model::ModelParams;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"FACLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
}

pub fn encode_checkpoint(config: &RunConfig, params: &ModelParams) -> Vec<u8> {
    let header = config.to_text();
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FaclError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn text(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FaclError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(FaclError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FaclError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let header_len = r.u32()? as usize;
    let config = RunConfig::parse(&r.text(header_len)?)?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        names.push(r.text(n)?);
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|l| l.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| FaclError::Checkpoint("tensor too large".into()))?;
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(FaclError::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams {
        config: config.model.clone(),
        names,
        tensors,
    };
    params
        .validate()
        .map_err(|e| FaclError::Checkpoint(e.to_string()))?;
    Ok(Checkpoint { config, params })
}

/// `(name, rows, cols, L2 norm)` per tensor.
pub fn tensor_summary(params: &ModelParams) -> Vec<(String, usize, usize, f64)> {
    params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| (n.clone(), t.rows, t.cols, t.norm()))
        .collect()
}
