use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A constant-valued rectangle stamped onto every channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub value: f32,
}

impl PatchSpec {
    pub fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.top + self.height > h || self.left + self.width > w {
            return Err(Error::invalid(format!("patch {self:?} does not fit in a {h}x{w} image")));
        }
        Ok(())
    }
}

/// Returns a copy of one `C x H x W` image with the patch applied.
pub fn stamp_patch(image: &[f32], shape: &[usize], spec: &PatchSpec) -> Result<Vec<f32>> {
    let &[c, h, w] = shape else {
        return Err(Error::shape(format!("expected (C, H, W), got {shape:?}")));
    };
    if image.len() != c * h * w {
        return Err(Error::shape("image length does not match its shape"));
    }
    spec.check(h, w)?;
    let mut out = image.to_vec();
    for ch in 0..c {
        for y in spec.top..spec.top + spec.height {
            for x in spec.left..spec.left + spec.width {
                out[(ch * h + y) * w + x] = spec.value;
            }
        }
    }
    Ok(out)
}

pub fn stamp_patch_batch(batch: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    let shape = &batch.shape()[1..];
    let mut data = Vec::with_capacity(batch.len());
    for i in 0..batch.batch() {
        data.extend(stamp_patch(batch.item(i), shape, spec)?);
    }
    Tensor::new(batch.shape().to_vec(), data)
}
