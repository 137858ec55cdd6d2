//! Datasets, checkpoints and metrics files.

pub mod checkpoint;
pub mod idx;
pub mod metrics;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images `[N, C, H, W]` scaled to `[0, 1]` with labels in `[0, classes)`.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dimension("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class labels",
                index: bad,
                bound: classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        Ok(Batch {
            indices: indices.to_vec(),
            images: self.images.gather_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// First `n` samples (all if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Dataset::new(
            self.images.slice_outer(0, n)?,
            self.labels[..n].to_vec(),
            self.classes,
            self.split,
        )
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
        }
    }
}
