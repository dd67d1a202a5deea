//! Binary masks, confusion counts and the overlap metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Dense binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::DataLength {
                op: "mask",
                shape: format!("{h}x{w}"),
                expected: h * w,
                got: data.len(),
            });
        }
        Ok(Mask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Mask {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    /// Binarize a logit map at probability 0.5 (logit >= 0).
    pub fn from_logits<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::DimMismatch {
                op: "mask from logits",
                dimension: "batch/channel",
                expected: 1,
                got: s.n.max(s.c),
            });
        }
        Mask::new(s.h, s.w, t.data().iter().map(|v| *v >= T::zero()).collect())
    }

    /// Interpret a `{0,1}` tensor as a mask; any other value is an error.
    pub fn from_binary_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let mut data = Vec::with_capacity(s.h * s.w);
        for (i, &v) in t.data().iter().enumerate() {
            if v == T::one() {
                data.push(true);
            } else if v == T::zero() {
                data.push(false);
            } else {
                return Err(Error::NonBinaryMask {
                    value: v.as_f64(),
                    index: i,
                });
            }
        }
        if s.n != 1 || s.c != 1 {
            return Err(Error::DimMismatch {
                op: "mask from tensor",
                dimension: "batch/channel",
                expected: 1,
                got: s.n.max(s.c),
            });
        }
        Mask::new(s.h, s.w, data)
    }

    /// `{0,1}` float tensor of shape `1 x 1 x h x w` (loss target form).
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(crate::tensor::Shape::new(1, 1, self.h, self.w), |i| {
            if self.data[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn positives(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }
}

/// Pixel confusion counts between a prediction and the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch {
                op: "confusion counts",
                lhs: format!("{}x{}", pred.h, pred.w),
                rhs: format!("{}x{}", gt.h, gt.w),
            });
        }
        let mut c = ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            false_neg: 0,
            true_neg: 0,
        };
        for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
            match (p, g) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, true) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Dice / IoU / precision / recall derived from confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl SampleMetrics {
    /// Empty-union convention: with no positives anywhere all four metrics
    /// are 1; a one-sided empty denominator scores 0.
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let (tp, fp, fn_) = (c.true_pos as f64, c.false_pos as f64, c.false_neg as f64);
        let union = tp + fp + fn_;
        let (dice, iou) = if union == 0.0 {
            (1.0, 1.0)
        } else {
            (2.0 * tp / (2.0 * tp + fp + fn_), tp / union)
        };
        let precision = if tp + fp == 0.0 {
            if fn_ == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp / (tp + fp)
        };
        let recall = if tp + fn_ == 0.0 {
            if fp == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp / (tp + fn_)
        };
        SampleMetrics {
            dice,
            iou,
            precision,
            recall,
        }
    }
}

/// One evaluated sample in a report.
#[derive(Debug, Clone, Serialize)]
pub struct SampleReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: SampleMetrics,
}

/// Per-sample metrics plus their arithmetic mean.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleReport>,
    pub mean: SampleMetrics,
}

/// Counts and metrics for one prediction/ground-truth pair.
pub fn compute_metrics(pred: &Mask, gt: &Mask) -> Result<(ConfusionCounts, SampleMetrics)> {
    let counts = ConfusionCounts::from_masks(pred, gt)?;
    Ok((counts, SampleMetrics::from_counts(&counts)))
}

/// Aggregate a set of evaluated samples into a report (mean of per-sample
/// metric values).
pub fn aggregate_report(per_sample: Vec<SampleReport>) -> MetricsReport {
    let n = per_sample.len().max(1) as f64;
    let mut mean = SampleMetrics {
        dice: 0.0,
        iou: 0.0,
        precision: 0.0,
        recall: 0.0,
    };
    for s in &per_sample {
        mean.dice += s.metrics.dice;
        mean.iou += s.metrics.iou;
        mean.precision += s.metrics.precision;
        mean.recall += s.metrics.recall;
    }
    mean.dice /= n;
    mean.iou /= n;
    mean.precision /= n;
    mean.recall /= n;
    MetricsReport { per_sample, mean }
}
