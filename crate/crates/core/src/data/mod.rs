//! Datasets, non-IID partitioning, and the fixed-patch trigger.

mod file;
mod partition;
mod patch;
mod shapeset;

pub use file::{read_dataset, write_dataset, DATASET_MAGIC};
pub use partition::{dirichlet_partition, label_count_std, mean_label_count_std, split_train_test, PartitionPlan};
pub use patch::{stamp_patch, stamp_patch_batch, PatchSpec};
pub use shapeset::{generate_shapeset, template, template_with_contrast, ShapeSetSpec, TEMPLATE_COUNT};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(format!("images must be N x C x H x W, got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::shape(format!("{} images but {} labels", images.batch(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape `(C, H, W)`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers a batch by sample index.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images.gather(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}
