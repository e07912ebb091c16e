//! CFV binary feature files.
//!
//! Layout: `b"CFV1"` | `u32` LE dim | `u64` LE count | `count * dim` f32 LE, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vector::Embeddings;

pub const CFV_MAGIC: &[u8; 4] = b"CFV1";
const HEADER_LEN: usize = 4 + 4 + 8;

/// Feature rows exactly as stored on disk (32-bit floats).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Widens to f64 for compute, optionally L2-normalizing each row.
    pub fn to_embeddings(&self, normalize: bool) -> Embeddings {
        let mut e = Embeddings::new(self.dim, self.data.iter().map(|&x| x as f64).collect())
            .expect("dim checked on construction");
        if normalize {
            e.l2_normalize_rows();
        }
        e
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(CFV_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != CFV_MAGIC {
                return Err(Error::BadMagic {
                    path: path.to_path_buf(),
                    expected: "CFV1",
                });
            }
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        if &bytes[..4] != CFV_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "CFV1",
            });
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if dim == 0 {
            return Err(Error::ZeroDim {
                path: path.to_path_buf(),
            });
        }
        let expected = (HEADER_LEN as u64).saturating_add(count.saturating_mul(dim as u64 * 4));
        if (bytes.len() as u64) < expected {
            return Err(Error::TruncatedFile {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let body = &bytes[HEADER_LEN..expected as usize];
        let mut data = Vec::with_capacity(body.len() / 4);
        for (index, chunk) in body.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::NonFiniteValue {
                    path: path.to_path_buf(),
                    index,
                });
            }
            data.push(x);
        }
        Ok(Self { dim, data })
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    FeatureMatrix::from_bytes(&bytes, path)
}

pub fn write_feature_file(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&features.to_bytes())?;
    Ok(())
}
