//! Confusion-matrix accumulation and mean IoU.

use std::fmt;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{LabelMap, IGNORE_LABEL};

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.dim().0
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Tally `pred` against `truth`, skipping ignored truth pixels.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        let c = self.num_classes();
        if pred.dims() != truth.dims() {
            return Err(Error::shape(
                "ConfusionMatrix::accumulate",
                format!("{:?}", truth.dims()),
                format!("{:?}", pred.dims()),
            ));
        }
        for (&p, &t) in pred.data().iter().zip(truth.data().iter()) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= c || p == IGNORE_LABEL || p as usize >= c {
                return Err(Error::validation(
                    "ConfusionMatrix::accumulate",
                    format!("class out of range: truth {t}, pred {p}, C={c}"),
                ));
            }
            self.counts[[t as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Merge another matrix by elementwise addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    /// Mean IoU and per-class IoU. Classes whose union is empty are excluded
    /// from the mean and reported as `None`; an all-empty matrix is an error.
    pub fn miou(&self) -> Result<MiouReport> {
        let c = self.num_classes();
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut evaluated = 0usize;
        for k in 0..c {
            let diag = self.counts[[k, k]];
            let row: u64 = self.counts.row(k).sum();
            let col: u64 = self.counts.column(k).sum();
            let union = row + col - diag;
            if union == 0 {
                per_class.push(None);
            } else {
                let iou = diag as f64 / union as f64;
                per_class.push(Some(iou));
                sum += iou;
                evaluated += 1;
            }
        }
        if evaluated == 0 {
            return Err(Error::validation(
                "ConfusionMatrix::miou",
                "no class has any evaluated pixel",
            ));
        }
        Ok(MiouReport {
            mean: sum / evaluated as f64,
            per_class,
        })
    }
}

/// Evaluation result: mean IoU plus the per-class breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
}

impl fmt::Display for MiouReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  IoU")?;
        for (k, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(f, "{k:>5}  {v:.4}")?,
                None => writeln!(f, "{k:>5}  (no pixels)")?,
            }
        }
        write!(f, "mIoU   {:.4}", self.mean)
    }
}
