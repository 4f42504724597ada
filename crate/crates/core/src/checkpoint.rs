//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"PKEF"`, `u32` version, `u32` entry count, then per entry a `u32` name
//! length, the UTF-8 name, `u64` rows and `u64` cols, followed by every
//! entry's values as `f64` in entry order.

use std::fs;
use std::path::Path;

use crate::error::{PkefError, Result};
use crate::math::DenseMatrix;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"PKEF";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.names().iter().zip(params.values()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u64).to_le_bytes());
    }
    for value in params.values() {
        for x in value.values() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(PkefError::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(PkefError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(PkefError::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut shapes = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| PkefError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        shapes.push((name, rows, cols));
    }
    let mut params = ParamStore::new();
    for (name, rows, cols) in shapes {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| PkefError::Checkpoint(format!("shape of '{name}' overflows")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| PkefError::Checkpoint("size overflow".into()))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.contains(&name) {
            return Err(PkefError::Checkpoint(format!("duplicate parameter '{name}'")));
        }
        params.insert(name, DenseMatrix::from_vec(rows, cols, values)?);
    }
    if r.pos != bytes.len() {
        return Err(PkefError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| PkefError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| PkefError::io(path, e))?;
    decode(&bytes)
}

/// Copies `loaded` into `target`, requiring identical names and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.names() != loaded.names() {
        return Err(PkefError::Checkpoint(format!(
            "checkpoint holds {} parameters that do not match the configured model's {}",
            loaded.len(),
            target.len()
        )));
    }
    for ((name, dst), src) in target.names().to_vec().iter().zip(target.values_mut()).zip(loaded.values()) {
        if !dst.same_shape(src) {
            return Err(PkefError::Checkpoint(format!(
                "'{name}' is {}x{} in the checkpoint but {}x{} in the model",
                src.rows(),
                src.cols(),
                dst.rows(),
                dst.cols()
            )));
        }
        *dst = src.clone();
    }
    Ok(())
}
