//! Checkpoint container: named tensors stored as raw little-endian f64 plus a
//! JSON manifest, in one file.
//!
//! Layout: 8-byte magic, u64 little-endian manifest length, manifest JSON
//! (UTF-8), then the concatenated tensor payloads in manifest order.
//! Round-trips are bit-exact for f64 and f32 tensors (f32 widens losslessly).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::num::{real, to_f64, Real};

const MAGIC: &[u8; 8] = b"BFCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorRecord>,
    meta: serde_json::Value,
}

/// In-memory checkpoint: ordered named tensors plus free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Matrix<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Matrix<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("payload truncated for tensor {0}")]
    Truncated(String),
}

/// Write named tensors and metadata to `path`.
pub fn save_checkpoint<R: Real, P: AsRef<Path>>(
    path: P,
    tensors: &[(String, Matrix<R>)],
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorRecord {
                name: name.clone(),
                shape: [m.rows, m.cols],
            })
            .collect(),
        meta,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for (_, m) in tensors {
        for &x in &m.data {
            file.write_all(&to_f64(x).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint, CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in manifest.tensors {
        let n = rec.shape[0] * rec.shape[1];
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            file.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Truncated(rec.name.clone()))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((rec.name, Matrix::from_vec(rec.shape[0], rec.shape[1], data)));
    }
    Ok(Checkpoint {
        tensors,
        meta: manifest.meta,
    })
}

/// Narrow a loaded f64 tensor back to the working scalar.
pub fn matrix_to_scalar<R: Real>(m: &Matrix<f64>) -> Matrix<R> {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&x| real::<R>(x)).collect(),
    }
}
