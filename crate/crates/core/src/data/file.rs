//! External dataset file:
//!
//! ```text
//! magic "PFLD" | u32 N | u32 C | u32 H | u32 W | u32 K
//! N*C*H*W little-endian f32 pixels | N little-endian u16 labels
//! ```

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"PFLD";

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(24 + data.images.len() * 4 + data.len() * 2);
    out.extend_from_slice(DATASET_MAGIC);
    for d in data.images.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(data.classes as u32).to_le_bytes());
    for v in data.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &data.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("not a PFLD dataset file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w, k) = (word(0), word(1), word(2), word(3), word(4));
    let pixels = n * c * h * w;
    if bytes.len() != 24 + pixels * 4 + n * 2 {
        return Err(Error::Format(format!("file length {} does not match its header", bytes.len())));
    }
    let body = &bytes[24..];
    let images: Vec<f32> = body[..pixels * 4].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let labels: Vec<usize> =
        body[pixels * 4..].chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()) as usize).collect();
    Dataset::new(Tensor::new(vec![n, c, h, w], images)?, labels, k)
}
