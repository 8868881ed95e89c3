//! Per-class IoU and mean IoU from accumulated pixel confusion counts.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Running |C|×|C| confusion matrix; rows are ground truth, columns are
/// prediction. Counts are integers, so accumulation order never matters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsAccumulator {
    num_classes: usize,
    confusion: Vec<u64>,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        MetricsAccumulator {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Total valid pixels seen so far.
    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.num_classes + pred]
    }

    /// Tally one prediction/ground-truth pair of masks, skipping pixels the
    /// `valid` mask rules out.
    pub fn accumulate(
        &mut self,
        pred: &Array2<u8>,
        y: &Array2<u8>,
        valid: Option<&Array2<bool>>,
    ) -> Result<()> {
        if pred.dim() != y.dim() {
            return Err(Error::InvalidInput(format!(
                "prediction is {:?} but ground truth is {:?}",
                pred.dim(),
                y.dim()
            )));
        }
        if let Some(v) = valid
            && v.dim() != y.dim()
        {
            return Err(Error::InvalidInput(format!(
                "valid mask is {:?} but ground truth is {:?}",
                v.dim(),
                y.dim()
            )));
        }
        let valid_iter: Box<dyn Iterator<Item = bool>> = match valid {
            Some(v) => Box::new(v.iter().copied()),
            None => Box::new(std::iter::repeat(true)),
        };
        for ((&p, &t), ok) in pred.iter().zip(y.iter()).zip(valid_iter) {
            if !ok {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.num_classes || t >= self.num_classes {
                return Err(Error::InvalidInput(format!(
                    "label {} out of range for {} classes",
                    p.max(t),
                    self.num_classes
                )));
            }
            self.confusion[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Add another accumulator's counts into this one (shard merge).
    pub fn merge(&mut self, other: &MetricsAccumulator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::InvalidInput(format!(
                "cannot merge accumulators over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU = TP / (TP + FP + FN). Classes whose union is empty
    /// (never predicted, never present) have no defined IoU and come back as
    /// `None`.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let nc = self.num_classes;
        (0..nc)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..nc).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fn_: u64 = (0..nc).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let union = tp + fp + fn_;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU. With `strict_mean` false (the usual protocol), zero-union
    /// classes are left out of the mean; with it true they score 0.
    pub fn miou(&self, strict_mean: bool) -> Result<f64> {
        let ious = self.iou_per_class();
        if ious.iter().all(Option::is_none) {
            return Err(Error::InvalidInput(
                "empty evaluation: every class has zero union".into(),
            ));
        }
        let (sum, n) = ious.iter().fold((0.0, 0usize), |(s, n), iou| match iou {
            Some(v) => (s + v, n + 1),
            None if strict_mean => (s, n + 1),
            None => (s, n),
        });
        Ok(sum / n as f64)
    }
}

/// Per-pixel argmax over the class axis of a `[|C|, H, W]` logit tensor; ties
/// break toward the lowest class id, so predictions are deterministic.
pub fn argmax_predictions(logits: &Array3<f64>) -> Array2<u8> {
    let (nc, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0usize;
        let mut best_v = logits[(0, i, j)];
        for c in 1..nc {
            let v = logits[(c, i, j)];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best as u8
    })
}
