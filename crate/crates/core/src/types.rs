//! Shared tensorial and configuration types.
//!
//! Tensors are channels-last throughout: images are `B×H×W×3`, label maps
//! `B×H×W`, logits `B×h×w×C` and features `B×h×w×D`. All types validate their
//! invariants at construction and are immutable afterwards.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label value for pixels excluded from losses and metrics.
///
/// Matches the 255 convention of common segmentation datasets; class indices
/// therefore live in `0..=254`.
pub const IGNORE_LABEL: u8 = 255;

/// Batch of RGB images, values in `[0, 1]`, shape `B×H×W×3`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Array4<f64>,
}

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (b, h, w, c) = data.dim();
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::validation(
                "ImageBatch",
                format!("empty dimension in {b}x{h}x{w}x{c}"),
            ));
        }
        if c != 3 {
            return Err(Error::shape("ImageBatch", "channel dim 3", format!("{c}")));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::validation(
                "ImageBatch",
                "values must be finite and within [0, 1]",
            ));
        }
        Ok(ImageBatch { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    /// (batch, height, width)
    pub fn dims(&self) -> (usize, usize, usize) {
        let (b, h, w, _) = self.data.dim();
        (b, h, w)
    }
}

/// Integer class map, shape `B×H×W`, values in `0..C` plus [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array3<u8>,
}

impl LabelMap {
    pub fn new(data: Array3<u8>, num_classes: usize) -> Result<Self> {
        validate_labels(&data, num_classes)?;
        Ok(LabelMap { data })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<u8> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

fn validate_labels(data: &Array3<u8>, num_classes: usize) -> Result<()> {
    if num_classes >= IGNORE_LABEL as usize {
        return Err(Error::validation(
            "LabelMap",
            format!("num_classes {num_classes} collides with the ignore sentinel"),
        ));
    }
    for &v in data.iter() {
        if v != IGNORE_LABEL && v as usize >= num_classes {
            return Err(Error::validation(
                "LabelMap",
                format!("label value {v} out of range for {num_classes} classes"),
            ));
        }
    }
    Ok(())
}

/// Per-class scores, shape `B×h×w×C`. `h, w` may be subsampled relative to
/// the image resolution.
#[derive(Debug, Clone)]
pub struct LogitsMap {
    data: Array4<f64>,
}

impl LogitsMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("LogitsMap", "non-finite value"));
        }
        Ok(LogitsMap { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().3
    }
}

/// Classifier-input feature map, shape `B×h×w×D`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Array4<f64>,
}

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("FeatureMap", "non-finite value"));
        }
        Ok(FeatureMap { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    pub fn feature_dim(&self) -> usize {
        self.data.dim().3
    }
}

/// Expand a label map into one-hot channels; ignored pixels become the
/// all-zero vector.
pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Result<Array4<f64>> {
    let (b, h, w) = labels.dims();
    validate_labels(labels.data(), num_classes)?;
    let mut out = Array4::<f64>::zeros((b, h, w, num_classes));
    for ((bi, y, x), &v) in labels.data().indexed_iter() {
        if v != IGNORE_LABEL {
            out[[bi, y, x, v as usize]] = 1.0;
        }
    }
    Ok(out)
}

/// Every scalar the training loop consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// EMA rate for teacher updates, in `[0, 1]`; 1 freezes the teachers.
    pub gamma: f64,
    /// Weight of the teacher-consistency loss.
    pub alpha: f64,
    /// Weight of the student-consistency loss.
    pub beta: f64,
    /// Final feature-augmentation strength; ramped linearly over training.
    pub lambda0: f64,
    /// Confidence threshold for teacher pseudo-labels; `None` disables it.
    pub tau: Option<f64>,
    /// Extend the confidence threshold to the student-consistency loss.
    pub tau_on_ss: bool,
    pub lr0: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters_max: usize,
    /// Training crop `(height, width)`.
    pub crop: (usize, usize),
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.4,
            alpha: 1.5,
            beta: 1.0,
            lambda0: 1.0,
            tau: None,
            tau_on_ss: false,
            lr0: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            iters_max: 1000,
            crop: (64, 64),
            batch_labeled: 4,
            batch_unlabeled: 4,
            num_classes: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Check every range constraint, reporting the offending field.
    pub fn validate(self) -> Result<Self> {
        fn check(ok: bool, field: &'static str, message: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, message.to_string()))
            }
        }
        check(
            self.gamma.is_finite() && (0.0..=1.0).contains(&self.gamma),
            "gamma",
            "must be within [0, 1]",
        )?;
        check(self.alpha.is_finite() && self.alpha >= 0.0, "alpha", "must be >= 0")?;
        check(self.beta.is_finite() && self.beta >= 0.0, "beta", "must be >= 0")?;
        check(
            self.lambda0.is_finite() && self.lambda0 >= 0.0,
            "lambda0",
            "must be >= 0",
        )?;
        if let Some(tau) = self.tau {
            check(
                tau.is_finite() && (0.0..=1.0).contains(&tau),
                "tau",
                "must be within [0, 1] when enabled",
            )?;
        }
        check(self.lr0.is_finite() && self.lr0 > 0.0, "lr0", "must be positive")?;
        check(
            self.lr_power.is_finite() && self.lr_power > 0.0,
            "lr_power",
            "must be positive",
        )?;
        check(
            self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum),
            "momentum",
            "must be within [0, 1)",
        )?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay",
            "must be >= 0",
        )?;
        check(self.iters_max >= 1, "iters_max", "must be >= 1")?;
        check(self.crop.0 >= 1 && self.crop.1 >= 1, "crop", "must be >= 1")?;
        check(self.batch_labeled >= 1, "batch_labeled", "must be >= 1")?;
        check(self.batch_unlabeled >= 1, "batch_unlabeled", "must be >= 1")?;
        check(
            self.num_classes >= 2 && self.num_classes < IGNORE_LABEL as usize,
            "num_classes",
            "must be in [2, 254]",
        )?;
        Ok(self)
    }
}
