//! Paired image/mask samples and batching.

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::{Shape, Tensor};

/// One training or evaluation pair: an image in `[0,1]` and its binary mask.
#[derive(Debug, Clone)]
pub struct SegmentationSample {
    /// `1 x C x S x S`, values scaled to `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub source_id: String,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f32>, mask: Mask, source_id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 {
            return Err(Error::DimMismatch {
                op: "sample",
                dimension: "batch",
                expected: 1,
                got: s.n,
            });
        }
        if (s.h, s.w) != mask.dims() {
            return Err(Error::ShapeMismatch {
                op: "sample",
                lhs: format!("{}x{}", s.h, s.w),
                rhs: format!("{:?}", mask.dims()),
            });
        }
        Ok(SegmentationSample {
            image,
            mask,
            source_id: source_id.into(),
        })
    }
}

/// Stack samples into `(images N x C x S x S, masks N x 1 x S x S)`.
pub fn batch_samples(samples: &[&SegmentationSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Train {
        reason: "cannot batch zero samples".to_string(),
    })?;
    let s = first.image.shape();
    let n = samples.len();
    let mut images = Vec::with_capacity(n * s.c * s.h * s.w);
    let mut masks = Vec::with_capacity(n * s.h * s.w);
    for sample in samples {
        if sample.image.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: s.to_string(),
                rhs: sample.image.shape().to_string(),
            });
        }
        images.extend_from_slice(sample.image.data());
        masks.extend(sample.mask.data().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
    }
    Ok((
        Tensor::new(Shape::new(n, s.c, s.h, s.w), images)?,
        Tensor::new(Shape::new(n, 1, s.h, s.w), masks)?,
    ))
}
