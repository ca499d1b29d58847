//! The `SFMF` per-sample feature container.
//!
//! Little-endian layout:
//!
//! ```text
//! "SFMF" | version u32 = 1 | ears u32 = 2 | layers u32 | frames u32 | channels u32
//! ears * layers * frames * channels f32 values, order [ear][layer][frame][channel]
//! FNV-1a 64 of the value bytes, u64
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"SFMF";
pub const VERSION: u32 = 1;
pub const EARS: usize = 2;
pub const HEADER_LEN: usize = 24;
pub const CHECKSUM_LEN: usize = 8;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Encoder features of one sample: `[ear][layer][frame][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureTensor {
    layers: usize,
    frames: usize,
    channels: usize,
    values: Vec<f32>,
}

impl LayerFeatureTensor {
    pub fn new(layers: usize, frames: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || frames == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature dims must be positive, got L={layers} T={frames} C={channels}"
            )));
        }
        let expected = EARS * layers * frames * channels;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "L={layers} T={frames} C={channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value at flat index {i}")));
        }
        Ok(Self {
            layers,
            frames,
            channels,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn offset(&self, ear: usize, layer: usize) -> usize {
        (ear * self.layers + layer) * self.frames * self.channels
    }

    /// The `frames x channels` slab for one ear and layer.
    pub fn slab(&self, ear: usize, layer: usize) -> &[f32] {
        let off = self.offset(ear, layer);
        &self.values[off..off + self.frames * self.channels]
    }

    /// One ear/layer slab promoted to a `frames x channels` `f64` tensor.
    pub fn layer_tensor(&self, ear: usize, layer: usize) -> Tensor {
        let data = self.slab(ear, layer).iter().map(|&v| v as f64).collect();
        Tensor::matrix(self.frames, self.channels, data).expect("validated dims")
    }

    /// Same features with the two ears exchanged.
    pub fn swap_ears(&self) -> Self {
        let half = self.values.len() / 2;
        let mut values = self.values[half..].to_vec();
        values.extend_from_slice(&self.values[..half]);
        Self { values, ..*self }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4 + CHECKSUM_LEN);
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, EARS as u32, self.layers as u32, self.frames as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = fnv1a64(&out[HEADER_LEN..]);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != VERSION {
            return Err(FormatError::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let ears = word(1) as usize;
        if ears != EARS {
            return Err(FormatError::Header(format!("ears must be 2, got {ears}")));
        }
        let (layers, frames, channels) = (word(2) as usize, word(3) as usize, word(4) as usize);
        if layers == 0 || frames == 0 || channels == 0 {
            return Err(FormatError::Header(format!(
                "zero dimension in L={layers} T={frames} C={channels}"
            )));
        }
        let count = EARS
            .checked_mul(layers)
            .and_then(|v| v.checked_mul(frames))
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| FormatError::Header("declared payload overflows".into()))?;
        let payload_len = count * 4;
        let expected = HEADER_LEN + payload_len + CHECKSUM_LEN;
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes(bytes.len() - expected));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
        let stored = u64::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().expect("8 bytes"));
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        let mut values = Vec::with_capacity(count);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(FormatError::NonFinite(i));
            }
            values.push(v);
        }
        Ok(Self {
            layers,
            frames,
            channels,
            values,
        })
    }
}

/// Number of `f32` values a header with these dims declares.
pub fn declared_values(layers: usize, frames: usize, channels: usize) -> usize {
    EARS * layers * frames * channels
}

pub fn write_feature_file(t: &LayerFeatureTensor, path: &Path) -> Result<()> {
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<LayerFeatureTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LayerFeatureTensor::from_bytes(&bytes).map_err(|source| Error::FeatureFile {
        path: path.to_path_buf(),
        source,
    })
}
