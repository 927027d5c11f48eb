//! Activation batches on disk: raw little-endian f32 plus a JSON sidecar at
//! `<path>.json` holding `{"count": N, "shape": [C, H, W]}`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpaqError};
use crate::inference::Activation;
use crate::model::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchHeader {
    pub count: usize,
    pub shape: Shape3,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".json");
    PathBuf::from(s)
}

pub fn batch_to_bytes(batch: &[Activation]) -> Result<(BatchHeader, Vec<u8>)> {
    let shape = batch.first().map_or([0, 0, 0], Activation::shape);
    if let Some(index) = batch.iter().position(|a| a.shape() != shape) {
        return Err(UpaqError::InputShape {
            index,
            expected: shape,
            got: batch[index].shape(),
        });
    }
    let bytes = batch
        .iter()
        .flat_map(|a| &a.data)
        .flat_map(|v| v.to_le_bytes())
        .collect();
    Ok((
        BatchHeader {
            count: batch.len(),
            shape,
        },
        bytes,
    ))
}

pub fn batch_from_bytes(header: &BatchHeader, bytes: &[u8]) -> Result<Vec<Activation>> {
    let per: usize = header.shape.iter().product();
    let expected = header
        .count
        .checked_mul(per)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| UpaqError::Format("batch header overflows".into()))?;
    if bytes.len() != expected {
        return Err(UpaqError::Format(format!(
            "batch holds {} bytes, header describes {expected}",
            bytes.len()
        )));
    }
    let [c, h, w] = header.shape;
    bytes
        .chunks_exact(4 * per.max(1))
        .take(header.count)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Activation::new(c, h, w, data)
        })
        .collect()
}

pub fn write_batch(path: impl AsRef<Path>, batch: &[Activation]) -> Result<()> {
    let path = path.as_ref();
    let (header, bytes) = batch_to_bytes(batch)?;
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec(&header)?)?;
    Ok(())
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<Activation>> {
    let path = path.as_ref();
    let header: BatchHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    batch_from_bytes(&header, &fs::read(path)?)
}
