//! Paired-domain data supply: procedural synthetic glyph pairs, the IDX
//! reader for MNIST-family files, the noisy-background compositor, and
//! dataset import/export.

mod disk;
mod idx;
mod synth;

pub use disk::{load_domain_dir, write_domain_dir};
pub use idx::{load_idx, parse_idx_image_header, parse_idx_label_header, to_idx_bytes};
pub use synth::{composite_background, gen_synthetic_pair, resize_nearest, SyntheticPair};

use crate::error::{CdlmError, Result};
use crate::num::Scalar;

/// Which generator produced a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    SyntheticGlyphs,
    IdxFiles,
    Composited,
}

/// Recipe for one paired-domain dataset.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::SyntheticGlyphs,
            classes: 8,
            height: 16,
            width: 16,
            train_per_domain: 2000,
            test_per_domain: 500,
            seed: 1,
        }
    }
}

/// One batch of images, NCHW in [0, 1], with labels present only where the
/// protocol allows them.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch<T> {
    pub images: Vec<T>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Option<Vec<u8>>,
}

impl<T: Scalar> DomainBatch<T> {
    pub fn new(
        images: Vec<T>,
        n: usize,
        channels: usize,
        height: usize,
        width: usize,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        if images.len() != n * channels * height * width {
            return Err(CdlmError::ShapeMismatch {
                op: "domain_batch",
                lhs: vec![n, channels, height, width],
                rhs: vec![images.len()],
            });
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(CdlmError::Usage(format!(
                    "label count {} does not match image count {n}",
                    l.len()
                )));
            }
        }
        if images
            .iter()
            .any(|&p| p < T::zero() || p > T::one())
        {
            return Err(CdlmError::Domain {
                op: "domain_batch",
                detail: "pixels must lie in [0, 1]".into(),
            });
        }
        Ok(DomainBatch {
            images,
            n,
            channels,
            height,
            width,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[T] {
        let len = self.image_len();
        &self.images[i * len..(i + 1) * len]
    }

    /// Gather a sub-batch by index (labels follow when present).
    pub fn select(&self, indices: &[usize]) -> DomainBatch<T> {
        let len = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        DomainBatch {
            images,
            n: indices.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Replicate a grayscale batch to `c` identical channels.
    pub fn replicate_channels(&self, c: usize) -> Result<DomainBatch<T>> {
        if self.channels != 1 {
            return Err(CdlmError::Usage(
                "replicate_channels expects grayscale input".into(),
            ));
        }
        let plane = self.height * self.width;
        let mut images = Vec::with_capacity(self.n * c * plane);
        for i in 0..self.n {
            let src = self.image(i);
            for _ in 0..c {
                images.extend_from_slice(src);
            }
        }
        Ok(DomainBatch {
            images,
            n: self.n,
            channels: c,
            height: self.height,
            width: self.width,
            labels: self.labels.clone(),
        })
    }

    /// Convert the element type (used to lift f32 data onto f64 graphs).
    pub fn cast<U: Scalar>(&self) -> DomainBatch<U> {
        DomainBatch {
            images: self
                .images
                .iter()
                .map(|&v| U::from_f64_c(v.to_f64_c()))
                .collect(),
            n: self.n,
            channels: self.channels,
            height: self.height,
            width: self.width,
            labels: self.labels.clone(),
        }
    }
}

/// Label-stripped view handed to the adaptation trainer: constructing one is
/// the only way to feed target data into training, so target labels are
/// unreachable there by type.
#[derive(Clone, Debug)]
pub struct Unlabeled<T>(DomainBatch<T>);

impl<T: Scalar> Unlabeled<T> {
    pub fn new(mut batch: DomainBatch<T>) -> Self {
        batch.labels = None;
        Unlabeled(batch)
    }

    pub fn batch(&self) -> &DomainBatch<T> {
        &self.0
    }
}
