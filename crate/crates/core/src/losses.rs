//! Objective terms: supervised cross-entropy, the two consistency losses,
//! pseudo-label extraction, and the polynomial learning-rate schedule.
//!
//! Every reduction is a mean over the pixels that survive masking, and
//! empty reductions yield zero with a flag instead of NaN. The consistency
//! terms consume already-augmented logits; which augmentation target each
//! term uses is the trainer's contract.

use ndarray::{Array3, Array4, ArrayView1};

use crate::error::{Error, Result};
use crate::isda::{isda_loss, AugmentedLogits};
use crate::types::{LabelMap, LogitsMap, TrainConfig, IGNORE_LABEL};

/// Per-pixel argmax labels plus the confidence gate.
#[derive(Debug, Clone)]
pub struct PseudoLabelResult {
    pub labels: LabelMap,
    pub valid: Array3<bool>,
}

impl PseudoLabelResult {
    pub fn valid_fraction(&self) -> f64 {
        let total = self.valid.len();
        if total == 0 {
            return 1.0;
        }
        self.valid.iter().filter(|&&v| v).count() as f64 / total as f64
    }
}

fn stable_max_softmax(z: ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    for j in 1..z.len() {
        // strict comparison keeps the lowest index on ties
        if z[j] > z[best] {
            best = j;
        }
    }
    let m = z[best];
    let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    (best, 1.0 / denom)
}

/// Hard labels from logits. `tau = None` marks every pixel valid;
/// otherwise a pixel is valid when its max softmax probability reaches
/// `tau`. The result is plain data, carrying no gradient relation to `p`.
pub fn pseudo_label(p: &LogitsMap, tau: Option<f64>) -> Result<PseudoLabelResult> {
    let (b, h, w, c) = p.data().dim();
    if c >= IGNORE_LABEL as usize {
        return Err(Error::validation(
            "pseudo_label",
            format!("{c} classes collide with the ignore sentinel"),
        ));
    }
    let mut labels = Array3::zeros((b, h, w));
    let mut valid = Array3::from_elem((b, h, w), true);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let z = p.data().slice(ndarray::s![bi, y, x, ..]);
                let (argmax, pmax) = stable_max_softmax(z);
                labels[[bi, y, x]] = argmax as u8;
                if let Some(t) = tau {
                    valid[[bi, y, x]] = pmax >= t;
                }
            }
        }
    }
    Ok(PseudoLabelResult {
        labels: LabelMap::new(labels, c)?,
        valid,
    })
}

/// Mean cross-entropy over non-IGNORE (and mask-allowed) pixels.
/// Returns `(loss, empty)`.
pub fn masked_cross_entropy(
    logits: &LogitsMap,
    target: &LabelMap,
    valid: Option<&Array3<bool>>,
) -> Result<(f64, bool)> {
    let aug = AugmentedLogits {
        data: logits.data().clone(),
        lambda_used: 0.0,
    };
    isda_loss(&aug, target, valid)
}

/// Cross-entropy with its gradient w.r.t. the logits.
pub fn masked_cross_entropy_with_grad(
    logits: &LogitsMap,
    target: &LabelMap,
    valid: Option<&Array3<bool>>,
) -> Result<(f64, bool, Array4<f64>)> {
    let (b, h, w, c) = logits.data().dim();
    if target.dims() != (b, h, w) {
        return Err(Error::shape(
            "masked_cross_entropy",
            format!("target {:?}", (b, h, w)),
            format!("{:?}", target.dims()),
        ));
    }
    let mut grad = Array4::zeros((b, h, w, c));
    let mut total = 0.0;
    let mut count = 0usize;
    for ((bi, y, x), &label) in target.data().indexed_iter() {
        if label == IGNORE_LABEL || valid.is_some_and(|v| !v[[bi, y, x]]) {
            continue;
        }
        if label as usize >= c {
            return Err(Error::validation(
                "masked_cross_entropy",
                format!("target class {label} outside {c} channels"),
            ));
        }
        let z = logits.data().slice(ndarray::s![bi, y, x, ..]);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + denom.ln();
        total += lse - z[label as usize];
        count += 1;
        for j in 0..c {
            grad[[bi, y, x, j]] =
                (z[j] - lse).exp() - if j == label as usize { 1.0 } else { 0.0 };
        }
    }
    if count == 0 {
        grad.fill(0.0);
        return Ok((0.0, true, grad));
    }
    let inv = 1.0 / count as f64;
    grad.mapv_inplace(|v| v * inv);
    Ok((total / count as f64, false, grad))
}

/// Supervised term: both students' mean cross-entropy against the ground
/// truth, summed. Logits must already be at label resolution.
pub fn supervised_loss(
    p_s1_l: &LogitsMap,
    p_s2_l: &LogitsMap,
    y_l: &LabelMap,
) -> Result<(f64, bool)> {
    let (l1, e1) = masked_cross_entropy(p_s1_l, y_l, None)?;
    let (l2, e2) = masked_cross_entropy(p_s2_l, y_l, None)?;
    Ok((l1 + l2, e1 && e2))
}

/// Teacher-to-student consistency with the mandatory cross pairing:
/// student 1 learns from teacher 2's pseudo-labels and student 2 from
/// teacher 1's, each masked by that teacher's confidence gate.
pub fn consistency_st_loss(
    p_s1_u: &AugmentedLogits,
    p_s2_u: &AugmentedLogits,
    t1_result: &PseudoLabelResult,
    t2_result: &PseudoLabelResult,
) -> Result<f64> {
    let (l1, _) = isda_loss(p_s1_u, &t2_result.labels, Some(&t2_result.valid))?;
    let (l2, _) = isda_loss(p_s2_u, &t1_result.labels, Some(&t1_result.valid))?;
    Ok(l1 + l2)
}

/// Student-to-student consistency: each student against the other's
/// detached argmax labels, no confidence gate unless the caller supplies
/// pre-gated label results.
pub fn consistency_ss_loss(
    p_s1_u: &AugmentedLogits,
    p_s2_u: &AugmentedLogits,
    s1_result: &PseudoLabelResult,
    s2_result: &PseudoLabelResult,
) -> Result<f64> {
    let (l1, _) = isda_loss(p_s1_u, &s2_result.labels, Some(&s2_result.valid))?;
    let (l2, _) = isda_loss(p_s2_u, &s1_result.labels, Some(&s1_result.valid))?;
    Ok(l1 + l2)
}

/// Polynomial decay: `lr0 * (1 - step/iters_max)^power`, zero beyond the
/// final step.
pub fn poly_lr(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.iters_max as u64 {
        return 0.0;
    }
    let frac = 1.0 - step as f64 / cfg.iters_max as f64;
    cfg.lr0 * frac.powf(cfg.lr_power)
}
