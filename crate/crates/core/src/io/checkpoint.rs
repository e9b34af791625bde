//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DATSEGCK"
//! version    u32      1
//! sections   u32
//! per section:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, extents u64 × ndim
//!   values   f64 × prod(extents), IEEE-754 little-endian
//! ```
//!
//! Model checkpoints hold the eight parameter arrays under their names
//! followed by a `knn_k` section of shape `[1]`.

use std::io::{Read, Write};

use crate::array::Array;
use crate::backbone::ModelParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DATSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const KNN_SECTION: &str = "knn_k";
const MAX_NAME: usize = 1 << 16;

pub fn write_sections<W: Write>(sections: &[(String, Array)], w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, arr) in sections {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(arr.shape().len() as u32).to_le_bytes())?;
        for &e in arr.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in arr.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_sections<R: Read>(r: &mut R) -> Result<Vec<(String, Array)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)?;
    let mut sections = Vec::with_capacity(count.min(64) as usize);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > MAX_NAME {
            return Err(Error::Format(format!("section name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("section name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Format(format!("section '{name}' has rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| read_u64(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let total = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let total =
            total.filter(|&t| t <= 1 << 28).ok_or_else(|| Error::Format(format!("section '{name}' is too large")))?;
        let mut bytes = vec![0u8; total * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        sections.push((name, Array::new(shape, values)?));
    }
    Ok(sections)
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, w: &mut W) -> Result<()> {
    let mut sections: Vec<(String, Array)> = params.named().map(|(n, a)| (n.to_string(), a.clone())).collect();
    sections.push((KNN_SECTION.to_string(), Array::scalar(params.knn_k() as f64)));
    write_sections(&sections, w)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelParams> {
    let mut sections = read_sections(r)?;
    let (name, knn) = sections.pop().ok_or_else(|| Error::Format("checkpoint has no sections".into()))?;
    let k = knn.values().first().copied().unwrap_or(f64::NAN);
    if name != KNN_SECTION || knn.len() != 1 || !(k >= 1.0 && k.fract() == 0.0) {
        return Err(Error::Format("checkpoint lacks a valid knn_k section".into()));
    }
    ModelParams::from_named(sections, k as usize)
}
