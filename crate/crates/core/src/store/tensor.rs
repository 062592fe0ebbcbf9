//! In-memory embedding tensors and the TSEB v1 file format.
//!
//! Layout (all little-endian):
//!
//! | bytes   | content                 |
//! |---------|-------------------------|
//! | 0..4    | magic `TSEB`            |
//! | 4..8    | u32 version (= 1)       |
//! | 8..12   | u32 n_layers            |
//! | 12..16  | u32 n_steps             |
//! | 16..20  | u32 dim                 |
//! | 20..    | f32 payload, index order (layer, step, dim) |

use std::fs;
use std::io::Write;
use std::path::Path;

use super::StoreError;

pub const TSEB_MAGIC: [u8; 4] = *b"TSEB";
pub const TSEB_VERSION: u32 = 1;
pub const TSEB_HEADER_LEN: usize = 20;

/// A clip's embedding sequence for every captured layer, shape `(layers, steps, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTensor {
    n_layers: usize,
    n_steps: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTensor {
    pub fn new(n_layers: usize, n_steps: usize, dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if n_layers == 0 || n_steps == 0 || dim == 0 {
            return Err(StoreError::Shape(format!("all dimensions must be >= 1, got {n_layers}x{n_steps}x{dim}")));
        }
        let expected = n_layers * n_steps * dim;
        if data.len() != expected {
            return Err(StoreError::Shape(format!(
                "data length {} does not match {n_layers}x{n_steps}x{dim} = {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { index: pos });
        }
        Ok(Self { n_layers, n_steps, dim, data })
    }

    pub fn zeros(n_layers: usize, n_steps: usize, dim: usize) -> Result<Self, StoreError> {
        Self::new(n_layers, n_steps, dim, vec![0.0; n_layers * n_steps * dim])
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row-major `steps x dim` view of one layer.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let stride = self.n_steps * self.dim;
        &self.data[layer * stride..(layer + 1) * stride]
    }

    pub fn step(&self, layer: usize, step: usize) -> &[f32] {
        let start = (layer * self.n_steps + step) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Serialize to TSEB v1 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TSEB_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&TSEB_MAGIC);
        out.extend_from_slice(&TSEB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_steps as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse TSEB v1 bytes, verifying the header and every payload value.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < TSEB_HEADER_LEN {
            return Err(StoreError::TruncatedHeader { len: bytes.len() });
        }
        if bytes[0..4] != TSEB_MAGIC {
            return Err(StoreError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = word(4);
        if version != TSEB_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let (n_layers, n_steps, dim) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let expected = n_layers
            .checked_mul(n_steps)
            .and_then(|n| n.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| StoreError::Shape(format!("header {n_layers}x{n_steps}x{dim} overflows")))?;
        let payload = &bytes[TSEB_HEADER_LEN..];
        if payload.len() != expected {
            return Err(StoreError::Truncated { expected, actual: payload.len() });
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(n_layers, n_steps, dim, data)
    }
}

/// Write `tensor` to `path` in TSEB v1 format.
pub fn write_embedding(tensor: &EmbeddingTensor, path: impl AsRef<Path>) -> Result<(), StoreError> {
    if let Some(pos) = tensor.data.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite { index: pos });
    }
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    file.write_all(&tensor.to_bytes()).map_err(|e| StoreError::io(path, e))?;
    Ok(())
}

/// Read a TSEB v1 file.
pub fn read_embedding(path: impl AsRef<Path>) -> Result<EmbeddingTensor, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    EmbeddingTensor::from_bytes(&bytes)
}
