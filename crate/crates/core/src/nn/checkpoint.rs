//! Binary named-tensor container.
//!
//! Layout, all integers little-endian: magic `SGTRCKPT`, `u32` version,
//! `u32` metadata length and UTF-8 metadata, `u32` tensor count, then per
//! tensor `u32` name length, name, `u32` rank, `u64` dims, `f64` values.

use std::io::{Read, Write};

use super::layers::ParamSet;
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 8] = b"SGTRCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(mut w: impl Write, params: &ParamSet, metadata: &str) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    w.write_all(metadata.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, limit: usize) -> Result<String, NnError> {
    let n = read_u32(r)? as usize;
    if n > limit {
        return Err(NnError::Checkpoint(format!("string of {n} bytes exceeds limit")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| NnError::Checkpoint(e.to_string()))
}

/// Returns the parameters and the metadata string.
pub fn read_checkpoint(mut r: impl Read) -> Result<(ParamSet, String), NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| NnError::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let metadata = read_string(&mut r, 1 << 24)?;
    let count = read_u32(&mut r)?;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let name = read_string(&mut r, 4096)?;
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 2 {
            return Err(NnError::Checkpoint(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(NnError::Checkpoint(format!("{name}: {n} values")));
        }
        let mut buf = vec![0u8; 8 * n];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if ps.id(&name).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate tensor {name}")));
        }
        ps.add(&name, Tensor::new(shape, data)?);
    }
    Ok((ps, metadata))
}
