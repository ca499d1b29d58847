//! `HEAD` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "HEAD" | version u32 = 1 | value width u32 (4 = f32, 8 = f64) | meta length u32
//! meta: JSON {config, dims}
//! param count u32, then per parameter (sorted by name):
//!   name length u32 | name utf-8 | trainable u8 | rank u32 | extents u32 * rank | values
//! FNV-1a 64 of every preceding byte, u64
//! ```
//!
//! Trainers write 64-bit values so a reloaded head reproduces its recorded
//! validation metrics exactly; 32-bit payloads are read as well.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::HeadConfig;
use super::model::{Head, HeadDims};
use crate::datastore::feature_file::fnv1a64;
use crate::error::{Error, FormatError, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"HEAD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueWidth {
    F32,
    F64,
}

impl ValueWidth {
    fn bytes(self) -> u32 {
        match self {
            ValueWidth::F32 => 4,
            ValueWidth::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: HeadConfig,
    dims: HeadDims,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn head_to_bytes(head: &Head, width: ValueWidth) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        config: head.config.clone(),
        dims: head.dims,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&width.bytes().to_le_bytes());
    put_u32(&mut out, meta.len());
    out.extend_from_slice(&meta);
    put_u32(&mut out, head.params.len());
    for (name, p) in head.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        out.push(p.trainable as u8);
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for &v in p.value.data() {
            match width {
                ValueWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                ValueWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn header_err(msg: impl Into<String>) -> FormatError {
    FormatError::Header(msg.into())
}

pub fn head_from_bytes(bytes: &[u8]) -> Result<Head, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    if bytes.len() < 4 + 8 {
        return Err(FormatError::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 8];
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let width = match c.u32()? {
        4 => ValueWidth::F32,
        8 => ValueWidth::F64,
        w => return Err(header_err(format!("unsupported value width {w}"))),
    };
    let meta_len = c.u32()? as usize;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| header_err(format!("metadata: {e}")))?;
    let count = c.u32()? as usize;
    let mut params = ParamSet::new();
    let mut flat = 0usize;
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| header_err("parameter name is not utf-8"))?
            .to_string();
        let trainable = match c.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(header_err(format!("bad trainable flag {b}"))),
        };
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * width.bytes() as usize)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(width.bytes() as usize) {
            let v = match width {
                ValueWidth::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                ValueWidth::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            };
            if !v.is_finite() {
                return Err(FormatError::NonFinite(flat));
            }
            data.push(v);
            flat += 1;
        }
        let tensor = Tensor::new(shape, data).map_err(|e| header_err(e.to_string()))?;
        params
            .insert(name, tensor, trainable)
            .map_err(|e| header_err(e.to_string()))?;
    }
    if c.pos != body.len() {
        return Err(FormatError::TrailingBytes(body.len() - c.pos));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(Head {
        config: meta.config,
        dims: meta.dims,
        params,
    })
}

pub fn save_head(head: &Head, path: &Path) -> Result<()> {
    let bytes = head_to_bytes(head, ValueWidth::F64)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_head(path: &Path) -> Result<Head> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    head_from_bytes(&bytes).map_err(|source| Error::FeatureFile {
        path: path.to_path_buf(),
        source,
    })
}
