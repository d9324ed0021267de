//! Binary checkpoint format.
//!
//! ```text
//! "A3D2"  version:u16
//! n:u32 height:u32 width:u32 base_channels:u32 fusion_channels:u32 fused_channels:u32
//! count:u32
//! count x { name_len:u16 name:utf8 ndim:u8 dims:u32[ndim] data:f32[prod(dims)] }
//! ```
//! All integers and floats are little-endian; tensors are written in sorted
//! name order so identical parameters always produce identical bytes. The
//! seed is not stored; loaded configs carry seed 0.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::NetworkParams;
use crate::error::{CheckpointError, Result};
use crate::ops::ParamMap;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"A3D2";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint<T: Scalar>(params: &NetworkParams<T>) -> Vec<u8> {
    let c = params.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.n, c.height, c.width, c.base_channels, c.fusion_channels, c.fused_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads only the header: magic, version and config block.
pub fn decode_header(bytes: &[u8]) -> Result<ModelConfig, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    header(&mut r)
}

fn header(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    if r.buf.len() < 4 {
        let mut found = [0u8; 4];
        found[..r.buf.len()].copy_from_slice(r.buf);
        return Err(CheckpointError::BadMagic(found));
    }
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut f = || r.u32("config block").map(|v| v as usize);
    Ok(ModelConfig {
        n: f()?,
        height: f()?,
        width: f()?,
        base_channels: f()?,
        fusion_channels: f()?,
        fused_channels: f()?,
        seed: 0,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let config = header(&mut r)?;
    let count = r.u32("tensor count")?;
    let mut tensors = ParamMap::new();
    for _ in 0..count {
        let len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("tensor dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&dims, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor `{name}`")).into());
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        ))
        .into());
    }
    NetworkParams::from_tensors(config, tensors)
}

pub fn save_checkpoint<T: Scalar>(params: &NetworkParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Rejects a checkpoint whose architecture differs from `expected`
/// (temporal window, resolution or channel widths).
pub fn ensure_compatible(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let pairs = [
        ("N", found.n, expected.n),
        ("height", found.height, expected.height),
        ("width", found.width, expected.width),
        ("base_channels", found.base_channels, expected.base_channels),
        ("fusion_channels", found.fusion_channels, expected.fusion_channels),
        ("fused_channels", found.fused_channels, expected.fused_channels),
    ];
    for (name, f, e) in pairs {
        if f != e {
            return Err(CheckpointError::ConfigMismatch(format!(
                "checkpoint has {name}={f}, run expects {name}={e}"
            ))
            .into());
        }
    }
    Ok(())
}
