//! Checkpoint file format.
//!
//! Layout: magic bytes "SLNS", version as little-endian u32 (currently 1),
//! a length-prefixed UTF-8 JSON header (model config plus training
//! metadata), then every weight tensor in stack order as rank (u32 LE),
//! extents (u32 LE each), and raw little-endian f32 values. Round-trips
//! are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SLNS";
pub const VERSION: u32 = 1;

/// Provenance of a trained model, stored alongside the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: u32,
    pub final_val_loss: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
}

pub fn save_checkpoint(model: &Model<f32>, meta: &TrainingMeta, path: &Path) -> Result<()> {
    let header = serde_json::to_string(&Header {
        config: model.config().clone(),
        meta: meta.clone(),
    })
    .expect("config serializes");

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for tensor in model.params() {
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            bytes.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &value in tensor.data() {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedCheckpoint {
                path: self.path.to_path_buf(),
                detail: format!("ran out of bytes reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, TrainingMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };

    if r.take(4, "magic").map(|m| m != MAGIC).unwrap_or(true) {
        return Err(Error::NotACheckpoint {
            path: path.to_path_buf(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail: format!("header: {e}"),
    })?;

    let mut model: Model<f32> = build_model(&header.config)?;
    let expected: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut tensors = Vec::with_capacity(expected.len());
    for want in &expected {
        let rank = r.u32("tensor rank")? as usize;
        if rank != want.len() {
            return Err(Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                detail: format!("tensor rank {rank}, expected {}", want.len()),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor extent")? as usize);
        }
        if &shape != want {
            return Err(Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                detail: format!("tensor shape {shape:?}, expected {want:?}"),
            });
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    model.restore(&tensors)?;
    Ok((model, header.meta))
}
