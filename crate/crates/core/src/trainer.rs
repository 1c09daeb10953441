//! The mutual-distillation training step.
//!
//! Two branches train jointly. Per step: both teachers take an EMA step
//! toward their students; weak views feed the teachers and the labeled
//! loss, strong views plus CutMix feed the students; teacher pseudo-labels
//! supervise the opposite student, and each student also learns from the
//! other student's detached argmax. Both consistency terms run on
//! feature-augmented logits. One SGD step with momentum, weight decay, and
//! poly learning rate updates each student; teachers never see gradients.
//!
//! Every random choice inside a step is drawn from a named stream keyed by
//! `(seed, stream, step)`, so resuming at step `n` replays identically.

use ndarray::{Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::augment::{
    apply_cutmix_images, apply_cutmix_logits, resize_label_map_nearest, roll_batch,
    sample_cutmix_mask, strong_augment, weak_augment, AugmentParams,
};
use crate::error::{Error, Result};
use crate::isda::{
    isda_term_with_grads, update_statistics, ClassFeatureStatistics, CovarianceMode,
};
use crate::losses::{
    masked_cross_entropy_with_grad, poly_lr, pseudo_label, PseudoLabelResult,
};
use crate::model::{
    classifier_pullback, init_model, upsample_logits, upsample_logits_backward, ArchConfig,
    SegModelParams, TrainForward, OUTPUT_STRIDE,
};
use crate::rng::{stream_rng, Stream};
use crate::types::{ImageBatch, LabelMap, LogitsMap, TrainConfig, IGNORE_LABEL};

/// One student with its mean teacher and optimizer state. The teacher is
/// only ever written by [`ema_update`].
#[derive(Debug, Clone)]
pub struct BranchState {
    pub student: SegModelParams,
    pub teacher: SegModelParams,
    pub momentum: SegModelParams,
}

impl BranchState {
    /// Teacher starts as a bitwise copy of the student, momentum at zero.
    pub fn from_student(student: SegModelParams) -> Self {
        let teacher = student.clone();
        let momentum = student.zeros_like();
        BranchState {
            student,
            teacher,
            momentum,
        }
    }
}

/// `t <- gamma t + (1 - gamma) s` over every stored tensor, running
/// statistics included.
pub fn ema_update(teacher: &mut SegModelParams, student: &SegModelParams, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::validation("ema_update", "gamma must lie in [0, 1]"));
    }
    let s_slices = student.param_slices();
    let mut t_slices = teacher.param_slices_mut();
    if s_slices.len() != t_slices.len() {
        return Err(Error::shape(
            "ema_update",
            format!("{} tensors", s_slices.len()),
            format!("{}", t_slices.len()),
        ));
    }
    for ((sk, s), (tk, t)) in s_slices.iter().zip(t_slices.iter_mut()) {
        if sk != tk || s.len() != t.len() {
            return Err(Error::shape(
                "ema_update",
                format!("{sk:?} x {}", s.len()),
                format!("{tk:?} x {}", t.len()),
            ));
        }
        for (tv, sv) in t.iter_mut().zip(s.iter()) {
            *tv = gamma * *tv + (1.0 - gamma) * *sv;
        }
    }
    Ok(())
}

/// SGD with momentum: `buf <- mu buf + (g + wd p)`, `p <- p - lr buf`.
/// Weight decay skips normalization parameters and the classifier bias;
/// running statistics are not touched at all.
pub fn sgd_step(
    student: &mut SegModelParams,
    momentum: &mut SegModelParams,
    grads: &SegModelParams,
    lr: f64,
    mu: f64,
    weight_decay: f64,
) -> Result<()> {
    let g_slices = grads.param_slices();
    let mut m_slices = momentum.param_slices_mut();
    let mut p_slices = student.param_slices_mut();
    if g_slices.len() != p_slices.len() || m_slices.len() != p_slices.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} tensors", p_slices.len()),
            format!("{} / {}", g_slices.len(), m_slices.len()),
        ));
    }
    for (((pk, p), (_, m)), (_, g)) in p_slices
        .iter_mut()
        .zip(m_slices.iter_mut())
        .zip(g_slices.iter())
    {
        if !pk.trainable() {
            continue;
        }
        let wd = if pk.weight_decayed() { weight_decay } else { 0.0 };
        for ((pv, mv), gv) in p.iter_mut().zip(m.iter_mut()).zip(g.iter()) {
            let g_eff = gv + wd * *pv;
            *mv = mu * *mv + g_eff;
            *pv -= lr * *mv;
        }
    }
    Ok(())
}

/// `into += scale * from` over every tensor.
pub fn add_scaled(into: &mut SegModelParams, from: &SegModelParams, scale: f64) -> Result<()> {
    let f_slices = from.param_slices();
    let mut i_slices = into.param_slices_mut();
    if f_slices.len() != i_slices.len() {
        return Err(Error::shape(
            "add_scaled",
            format!("{} tensors", i_slices.len()),
            format!("{}", f_slices.len()),
        ));
    }
    for ((_, a), (_, b)) in i_slices.iter_mut().zip(f_slices.iter()) {
        for (x, y) in a.iter_mut().zip(b.iter()) {
            *x += scale * y;
        }
    }
    Ok(())
}

/// Per-step scalar record, serialized as one line of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub sup: f64,
    pub st: f64,
    pub ss: f64,
    pub total: f64,
    pub lr: f64,
    pub lambda: f64,
    pub valid_fraction: [f64; 2],
}

/// A labeled example: image in `[0,1]` and its label map with IGNORE
/// allowed. Items of one batch may have different spatial sizes; cropping
/// makes the views uniform.
pub type LabeledItem<'a> = (ArrayView3<'a, f64>, ArrayView2<'a, u8>);

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub aug_params: AugmentParams,
    pub branch1: BranchState,
    pub branch2: BranchState,
    pub stats: ClassFeatureStatistics,
    pub step: u64,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        arch: ArchConfig,
        aug_params: AugmentParams,
        cov_mode: CovarianceMode,
    ) -> Result<Self> {
        let cfg = cfg.validate()?;
        let arch = arch.validate()?;
        if arch.num_classes != cfg.num_classes {
            return Err(Error::config(
                "num_classes",
                format!(
                    "architecture has {} classes but the training config says {}",
                    arch.num_classes, cfg.num_classes
                ),
            ));
        }
        if cfg.crop.0 % 8 != 0 || cfg.crop.1 % 8 != 0 {
            return Err(Error::config("crop", "crop sides must be multiples of 8"));
        }
        let mut r1 = stream_rng(cfg.seed, Stream::InitStudent1, 0);
        let mut r2 = stream_rng(cfg.seed, Stream::InitStudent2, 0);
        let s1 = init_model(&arch, &mut r1)?;
        let s2 = init_model(&arch, &mut r2)?;
        let stats = ClassFeatureStatistics::new(arch.num_classes, arch.feature_dim, cov_mode)?;
        Ok(Trainer {
            cfg,
            aug_params,
            branch1: BranchState::from_student(s1),
            branch2: BranchState::from_student(s2),
            stats,
            step: 0,
        })
    }

    /// Reassemble a trainer from checkpointed parts.
    pub fn from_parts(
        cfg: TrainConfig,
        aug_params: AugmentParams,
        branch1: BranchState,
        branch2: BranchState,
        stats: ClassFeatureStatistics,
        step: u64,
    ) -> Result<Self> {
        let cfg = cfg.validate()?;
        Ok(Trainer {
            cfg,
            aug_params,
            branch1,
            branch2,
            stats,
            step,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.branch1.student.arch
    }

    fn stack_labeled(
        &self,
        labeled: &[LabeledItem],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(ImageBatch, LabelMap)> {
        let crop = self.cfg.crop;
        let n = labeled.len();
        let mut xs = Array4::zeros((n, crop.0, crop.1, 3));
        let mut ys = Array3::from_elem((n, crop.0, crop.1), IGNORE_LABEL);
        for (i, (img, lab)) in labeled.iter().enumerate() {
            let b = ImageBatch::new(img.to_owned().insert_axis(Axis(0)))?;
            let l = LabelMap::new(lab.to_owned().insert_axis(Axis(0)), self.cfg.num_classes)?;
            let (xa, ya, _) = weak_augment(&b, Some(&l), crop, &self.aug_params, rng)?;
            xs.index_axis_mut(Axis(0), i)
                .assign(&xa.data().index_axis(Axis(0), 0));
            ys.index_axis_mut(Axis(0), i)
                .assign(&ya.unwrap().data().index_axis(Axis(0), 0));
        }
        Ok((ImageBatch::new(xs)?, LabelMap::new(ys, self.cfg.num_classes)?))
    }

    fn stack_unlabeled(
        &self,
        unlabeled: &[ArrayView3<f64>],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<ImageBatch> {
        let crop = self.cfg.crop;
        let n = unlabeled.len();
        let mut xs = Array4::zeros((n, crop.0, crop.1, 3));
        for (i, img) in unlabeled.iter().enumerate() {
            let b = ImageBatch::new(img.to_owned().insert_axis(Axis(0)))?;
            let (xa, _, _) = weak_augment(&b, None, crop, &self.aug_params, rng)?;
            xs.index_axis_mut(Axis(0), i)
                .assign(&xa.data().index_axis(Axis(0), 0));
        }
        ImageBatch::new(xs)
    }

    /// One full optimization step. On a non-finite total loss the step
    /// aborts with parameters (teachers included) restored untouched.
    pub fn train_step(
        &mut self,
        labeled: &[LabeledItem],
        unlabeled: &[ArrayView3<f64>],
    ) -> Result<StepReport> {
        if labeled.is_empty() {
            return Err(Error::validation("train_step", "need at least one labeled item"));
        }
        let cfg = self.cfg.clone();
        let step = self.step;
        let use_unlabeled = (cfg.alpha != 0.0 || cfg.beta != 0.0) && !unlabeled.is_empty();
        let use_st = cfg.alpha != 0.0 && use_unlabeled;
        let use_ss = cfg.beta != 0.0 && use_unlabeled;
        let lambda = cfg.lambda0 * (step.min(cfg.iters_max as u64) as f64 / cfg.iters_max as f64);

        // teachers move first; keep copies so an aborted step leaves no trace
        let teacher1_before = self.branch1.teacher.clone();
        let teacher2_before = self.branch2.teacher.clone();
        ema_update(&mut self.branch1.teacher, &self.branch1.student, cfg.gamma)?;
        ema_update(&mut self.branch2.teacher, &self.branch2.student, cfg.gamma)?;

        let abort = |trainer: &mut Trainer, sup: f64, st: f64, ss: f64| {
            trainer.branch1.teacher = teacher1_before.clone();
            trainer.branch2.teacher = teacher2_before.clone();
            Error::NonFiniteLoss { step, sup, st, ss }
        };

        // views
        let mut rng_wl = stream_rng(cfg.seed, Stream::AugWeakLabeled, step);
        let (x_l, y_l) = self.stack_labeled(labeled, &mut rng_wl)?;

        let unl = if use_unlabeled {
            let mut rng_wu = stream_rng(cfg.seed, Stream::AugWeakUnlabeled, step);
            let weak_u = self.stack_unlabeled(unlabeled, &mut rng_wu)?;
            let mut rng_s = stream_rng(cfg.seed, Stream::AugStrong, step);
            let strong_u = strong_augment(&weak_u, &self.aug_params, &mut rng_s)?;
            let mut rng_cm = stream_rng(cfg.seed, Stream::CutMix, step);
            let mask = sample_cutmix_mask(
                unlabeled.len(),
                cfg.crop.0,
                cfg.crop.1,
                &mut rng_cm,
            )?;
            let strong_rolled = ImageBatch::new(roll_batch(strong_u.data()))?;
            let mixed = apply_cutmix_images(&strong_u, &strong_rolled, &mask)?;
            Some((weak_u, strong_u, mask, mixed))
        } else {
            None
        };

        // teacher pseudo-labels from weak views, logits mixed with the same
        // mask as the student inputs, crossed between branches
        let teacher_pl = if use_st {
            let (weak_u, _, mask, _) = unl.as_ref().unwrap();
            let t1_out = self.branch1.teacher.forward_eval(weak_u)?;
            let t2_out = self.branch2.teacher.forward_eval(weak_u)?;
            let mix = |p: &LogitsMap| -> Result<LogitsMap> {
                let rolled = LogitsMap::new(roll_batch(p.data()))?;
                apply_cutmix_logits(p, &rolled, mask)
            };
            let t1_res = pseudo_label(&mix(&t1_out.logits)?, cfg.tau)?;
            let t2_res = pseudo_label(&mix(&t2_out.logits)?, cfg.tau)?;
            Some((t1_res, t2_res))
        } else {
            None
        };

        // grad-bearing student forwards
        let fwd1_l = self.branch1.student.forward_train(&x_l)?;
        let fwd2_l = self.branch2.student.forward_train(&x_l)?;
        let unl_fwd = if use_unlabeled {
            let (_, _, _, mixed) = unl.as_ref().unwrap();
            Some((
                self.branch1.student.forward_train(mixed)?,
                self.branch2.student.forward_train(mixed)?,
            ))
        } else {
            None
        };

        // detached reference forwards on the unmixed strong views give the
        // student-to-student pseudo-labels, mixed with the same mask
        let student_pl = if use_ss {
            let (_, strong_u, mask, _) = unl.as_ref().unwrap();
            let ref1 = self.branch1.student.forward_train(strong_u)?;
            let ref2 = self.branch2.student.forward_train(strong_u)?;
            let tau_ss = if cfg.tau_on_ss { cfg.tau } else { None };
            let mix_pl = |p: &LogitsMap| -> Result<PseudoLabelResult> {
                let rolled = LogitsMap::new(roll_batch(p.data()))?;
                pseudo_label(&apply_cutmix_logits(p, &rolled, mask)?, tau_ss)
            };
            Some((mix_pl(&ref1.output.logits)?, mix_pl(&ref2.output.logits)?))
        } else {
            None
        };

        // consistency terms on augmented logits
        let st_terms = if use_st {
            let (t1_res, t2_res) = teacher_pl.as_ref().unwrap();
            let (fwd1_u, fwd2_u) = unl_fwd.as_ref().unwrap();
            let term1 = isda_term_with_grads(
                &fwd1_u.output.features,
                &self.branch1.student.classifier_w,
                &self.branch1.student.classifier_b,
                &t2_res.labels,
                Some(&t2_res.valid),
                &self.stats,
                lambda,
            )?;
            let term2 = isda_term_with_grads(
                &fwd2_u.output.features,
                &self.branch2.student.classifier_w,
                &self.branch2.student.classifier_b,
                &t1_res.labels,
                Some(&t1_res.valid),
                &self.stats,
                lambda,
            )?;
            Some((term1, term2))
        } else {
            None
        };
        let ss_terms = if use_ss {
            let (ref1_pl, ref2_pl) = student_pl.as_ref().unwrap();
            let (fwd1_u, fwd2_u) = unl_fwd.as_ref().unwrap();
            let term1 = isda_term_with_grads(
                &fwd1_u.output.features,
                &self.branch1.student.classifier_w,
                &self.branch1.student.classifier_b,
                &ref2_pl.labels,
                Some(&ref2_pl.valid),
                &self.stats,
                lambda,
            )?;
            let term2 = isda_term_with_grads(
                &fwd2_u.output.features,
                &self.branch2.student.classifier_w,
                &self.branch2.student.classifier_b,
                &ref1_pl.labels,
                Some(&ref1_pl.valid),
                &self.stats,
                lambda,
            )?;
            Some((term1, term2))
        } else {
            None
        };

        // supervised term at full label resolution
        let up1 = upsample_logits(&fwd1_l.output.logits, cfg.crop.0, cfg.crop.1)?;
        let up2 = upsample_logits(&fwd2_l.output.logits, cfg.crop.0, cfg.crop.1)?;
        let (sup1, _, d_up1) = masked_cross_entropy_with_grad(&up1, &y_l, None)?;
        let (sup2, _, d_up2) = masked_cross_entropy_with_grad(&up2, &y_l, None)?;
        let sup = sup1 + sup2;
        let st = st_terms.as_ref().map_or(0.0, |(a, b)| a.loss + b.loss);
        let ss = ss_terms.as_ref().map_or(0.0, |(a, b)| a.loss + b.loss);
        let total = sup + cfg.alpha * st + cfg.beta * ss;
        if !total.is_finite() {
            return Err(abort(self, sup, st, ss));
        }

        // backward both branches
        let h_feat = cfg.crop.0 / OUTPUT_STRIDE;
        let w_feat = cfg.crop.1 / OUTPUT_STRIDE;
        let branch_grads = |student: &SegModelParams,
                            fwd_l: &TrainForward,
                            d_up: &Array4<f64>,
                            fwd_u: Option<&TrainForward>,
                            st_term: Option<&crate::isda::IsdaTermGrads>,
                            ss_term: Option<&crate::isda::IsdaTermGrads>|
         -> Result<SegModelParams> {
            let d_logits_l = upsample_logits_backward(&d_up.view(), h_feat, w_feat);
            let (d_f_l, mut d_w, mut d_b) =
                classifier_pullback(&student.classifier_w, &fwd_l.output.features, &d_logits_l.view());
            let mut grads = student.backward_features(&fwd_l.cache, &d_f_l.view())?;
            if let Some(fwd_u) = fwd_u {
                let dim = fwd_u.output.features.data().dim();
                let mut d_f_u = Array4::zeros(dim);
                if let Some(t) = st_term {
                    d_f_u += &(&t.grad_f * cfg.alpha);
                    d_w += &(&t.grad_w * cfg.alpha);
                    d_b += &(&t.grad_b * cfg.alpha);
                }
                if let Some(t) = ss_term {
                    d_f_u += &(&t.grad_f * cfg.beta);
                    d_w += &(&t.grad_w * cfg.beta);
                    d_b += &(&t.grad_b * cfg.beta);
                }
                let g_u = student.backward_features(&fwd_u.cache, &d_f_u.view())?;
                add_scaled(&mut grads, &g_u, 1.0)?;
            }
            grads.classifier_w = d_w;
            grads.classifier_b = d_b;
            Ok(grads)
        };

        let grads1 = branch_grads(
            &self.branch1.student,
            &fwd1_l,
            &d_up1,
            unl_fwd.as_ref().map(|(a, _)| a),
            st_terms.as_ref().map(|(a, _)| a),
            ss_terms.as_ref().map(|(a, _)| a),
        )?;
        let grads2 = branch_grads(
            &self.branch2.student,
            &fwd2_l,
            &d_up2,
            unl_fwd.as_ref().map(|(_, b)| b),
            st_terms.as_ref().map(|(_, b)| b),
            ss_terms.as_ref().map(|(_, b)| b),
        )?;

        let lr = poly_lr(step, &cfg);
        sgd_step(
            &mut self.branch1.student,
            &mut self.branch1.momentum,
            &grads1,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        sgd_step(
            &mut self.branch2.student,
            &mut self.branch2.momentum,
            &grads2,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;

        // running statistics track the labeled batch only; strong/CutMix
        // activations would skew the eval-mode normalization the teachers
        // and the held-out evaluation rely on
        self.branch1.student.apply_bn_updates(&fwd1_l.bn_stats)?;
        self.branch2.student.apply_bn_updates(&fwd2_l.bn_stats)?;

        // class statistics: ground truth on student 1's labeled features,
        // each student's own argmax on its unlabeled features
        let y_l_small = resize_label_map_nearest(&y_l, h_feat, w_feat)?;
        update_statistics(&mut self.stats, &fwd1_l.output.features, &y_l_small)?;
        if let Some((fwd1_u, fwd2_u)) = unl_fwd.as_ref() {
            let own1 = pseudo_label(&fwd1_u.output.logits, None)?;
            update_statistics(&mut self.stats, &fwd1_u.output.features, &own1.labels)?;
            let own2 = pseudo_label(&fwd2_u.output.logits, None)?;
            update_statistics(&mut self.stats, &fwd2_u.output.features, &own2.labels)?;
        }

        let valid_fraction = match teacher_pl.as_ref() {
            Some((t1_res, t2_res)) => [t2_res.valid_fraction(), t1_res.valid_fraction()],
            None => [1.0, 1.0],
        };
        let report = StepReport {
            step,
            sup,
            st,
            ss,
            total,
            lr,
            lambda,
            valid_fraction,
        };
        self.step += 1;
        Ok(report)
    }
}
