//! Encoder-decoder segmentation network with an exposed linear classifier.
//!
//! Three stride-2 convolution blocks encode at 1/8 resolution; one decoder
//! block (nearest 2x upsample, 3x3 conv, batch norm, relu) brings features
//! back to 1/4 resolution where the pointwise classifier produces logits.
//! The `(features, classifier_w, classifier_b)` decomposition is public
//! because the feature-space augmentation loss differentiates through it
//! directly.
//!
//! All math is f64. Backward passes are hand-written per layer; the batch
//! statistics recorded during a training forward are applied to running
//! statistics only when the caller says so, which lets one optimization
//! step run several forwards while updating the running estimates once.

pub mod layers;

use ndarray::{Array1, Array2, Array4, ArrayView4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::{FeatureMap, ImageBatch, LogitsMap};
use layers::{
    bn_backward, bn_forward_eval, bn_forward_train, classifier_forward, conv3x3_backward,
    conv3x3_forward, relu_backward, relu_forward, upsample_bilinear, upsample_bilinear_backward,
    upsample_nearest2x, upsample_nearest2x_backward, BnBatchStats, BnCache, ConvCache,
};

/// Input sizes must be divisible by this so every stage lands on whole pixels.
pub const INPUT_DIVISOR: usize = 8;
/// Features and logits live at input resolution divided by this.
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub widths: [usize; 3],
    pub feature_dim: usize,
    pub num_classes: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: [16, 32, 64],
            feature_dim: 32,
            num_classes: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(self) -> Result<Self> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("widths", "channel widths must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if self.num_classes < 2 || self.num_classes >= 255 {
            return Err(Error::config("num_classes", "need 2 ..= 254 classes"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum", "must lie in (0, 1]"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNormParams {
    fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub weight: Array4<f64>,
    pub bn: BatchNormParams,
}

/// Which logical parameter a flat slice belongs to; drives the optimizer's
/// weight-decay exclusions and distinguishes trained parameters from
/// running statistics (which only EMA and checkpointing touch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    ClassifierWeight,
    ClassifierBias,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn weight_decayed(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::ClassifierWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModelParams {
    pub arch: ArchConfig,
    pub blocks: Vec<ConvBlockParams>,
    pub decoder: ConvBlockParams,
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array1<f64>,
}

/// He-normal initialization for the convolutions, `N(0, 1/sqrt(D))` for the
/// classifier weights, zero classifier bias. Draw order is fixed so equal
/// seeds give bitwise-equal models.
pub fn init_model(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<SegModelParams> {
    let arch = arch.clone().validate()?;
    let mut blocks = Vec::with_capacity(3);
    let mut c_in = 3;
    for &c_out in arch.widths.iter() {
        blocks.push(ConvBlockParams {
            weight: conv_init(c_out, c_in, rng),
            bn: BatchNormParams::identity(c_out),
        });
        c_in = c_out;
    }
    let decoder = ConvBlockParams {
        weight: conv_init(arch.feature_dim, arch.widths[2], rng),
        bn: BatchNormParams::identity(arch.feature_dim),
    };
    let cls = Normal::new(0.0, (1.0 / arch.feature_dim as f64).sqrt()).unwrap();
    let classifier_w =
        Array2::from_shape_fn((arch.num_classes, arch.feature_dim), |_| cls.sample(rng));
    let classifier_b = Array1::zeros(arch.num_classes);
    Ok(SegModelParams {
        arch,
        blocks,
        decoder,
        classifier_w,
        classifier_b,
    })
}

fn conv_init(c_out: usize, c_in: usize, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let he = Normal::new(0.0, (2.0 / (c_in * 9) as f64).sqrt()).unwrap();
    Array4::from_shape_fn((c_out, c_in, 3, 3), |_| he.sample(rng))
}

impl SegModelParams {
    /// Flat views of every stored tensor in a fixed order. EMA, the
    /// optimizer, and the checkpoint all walk this list.
    pub fn param_slices(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::new();
        for block in self.blocks.iter().chain(std::iter::once(&self.decoder)) {
            out.push((ParamKind::ConvWeight, block.weight.as_slice().unwrap()));
            out.push((ParamKind::BnGamma, block.bn.gamma.as_slice().unwrap()));
            out.push((ParamKind::BnBeta, block.bn.beta.as_slice().unwrap()));
            out.push((
                ParamKind::BnRunningMean,
                block.bn.running_mean.as_slice().unwrap(),
            ));
            out.push((
                ParamKind::BnRunningVar,
                block.bn.running_var.as_slice().unwrap(),
            ));
        }
        out.push((
            ParamKind::ClassifierWeight,
            self.classifier_w.as_slice().unwrap(),
        ));
        out.push((
            ParamKind::ClassifierBias,
            self.classifier_b.as_slice().unwrap(),
        ));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = Vec::new();
        for block in self
            .blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.decoder))
        {
            out.push((
                ParamKind::ConvWeight,
                block.weight.as_slice_mut().unwrap(),
            ));
            out.push((ParamKind::BnGamma, block.bn.gamma.as_slice_mut().unwrap()));
            out.push((ParamKind::BnBeta, block.bn.beta.as_slice_mut().unwrap()));
            out.push((
                ParamKind::BnRunningMean,
                block.bn.running_mean.as_slice_mut().unwrap(),
            ));
            out.push((
                ParamKind::BnRunningVar,
                block.bn.running_var.as_slice_mut().unwrap(),
            ));
        }
        out.push((
            ParamKind::ClassifierWeight,
            self.classifier_w.as_slice_mut().unwrap(),
        ));
        out.push((
            ParamKind::ClassifierBias,
            self.classifier_b.as_slice_mut().unwrap(),
        ));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|(_, s)| s.len()).sum()
    }

    /// Same shapes, every value zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> SegModelParams {
        let mut out = self.clone();
        for (_, slice) in out.param_slices_mut() {
            slice.fill(0.0);
        }
        out
    }

    /// All-zero container with the shapes the architecture dictates.
    /// Checkpoint loading fills it in place.
    pub fn zeros(arch: &ArchConfig) -> Result<SegModelParams> {
        let arch = arch.clone().validate()?;
        let zero_bn = |channels: usize| BatchNormParams {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::zeros(channels),
        };
        let mut blocks = Vec::with_capacity(3);
        let mut c_in = 3;
        for &c_out in arch.widths.iter() {
            blocks.push(ConvBlockParams {
                weight: Array4::zeros((c_out, c_in, 3, 3)),
                bn: zero_bn(c_out),
            });
            c_in = c_out;
        }
        let decoder = ConvBlockParams {
            weight: Array4::zeros((arch.feature_dim, arch.widths[2], 3, 3)),
            bn: zero_bn(arch.feature_dim),
        };
        let classifier_w = Array2::zeros((arch.num_classes, arch.feature_dim));
        let classifier_b = Array1::zeros(arch.num_classes);
        Ok(SegModelParams {
            arch,
            blocks,
            decoder,
            classifier_w,
            classifier_b,
        })
    }

    /// Fold recorded batch statistics into the running estimates, with the
    /// sample variance correction on the variance term.
    pub fn apply_bn_updates(&mut self, stats: &[BnBatchStats]) -> Result<()> {
        if stats.len() != self.blocks.len() + 1 {
            return Err(Error::shape(
                "apply_bn_updates",
                format!("{} stat groups", self.blocks.len() + 1),
                format!("{}", stats.len()),
            ));
        }
        let m = self.arch.bn_momentum;
        for (block, st) in self
            .blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.decoder))
            .zip(stats.iter())
        {
            let correction = if st.n > 1 {
                st.n as f64 / (st.n - 1) as f64
            } else {
                1.0
            };
            for c in 0..block.bn.running_mean.len() {
                block.bn.running_mean[c] = (1.0 - m) * block.bn.running_mean[c] + m * st.mean[c];
                block.bn.running_var[c] =
                    (1.0 - m) * block.bn.running_var[c] + m * st.var_biased[c] * correction;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &ImageBatch) -> Result<(usize, usize, usize)> {
        let (b, h, w) = x.dims();
        if h % INPUT_DIVISOR != 0 || w % INPUT_DIVISOR != 0 || h == 0 || w == 0 {
            return Err(Error::validation(
                "model input",
                format!("spatial size {h}x{w} must be a positive multiple of {INPUT_DIVISOR}"),
            ));
        }
        Ok((b, h, w))
    }

    /// Training-mode forward: batch statistics normalize, and are returned
    /// for the caller to fold into running statistics at its chosen time.
    pub fn forward_train(&self, x: &ImageBatch) -> Result<TrainForward> {
        let (_, h, w) = self.check_input(x)?;
        let mut cur = nhwc_to_nchw(&x.data().view());
        let mut block_caches = Vec::with_capacity(3);
        let mut bn_stats = Vec::with_capacity(4);
        for block in &self.blocks {
            let (conv_out, conv) = conv3x3_forward(&cur, &block.weight, 2);
            let (bn_out, bn, st) =
                bn_forward_train(&conv_out, &block.bn.gamma, &block.bn.beta, self.arch.bn_eps);
            let out = relu_forward(&bn_out);
            block_caches.push(BlockCache {
                conv,
                bn,
                relu_out: out.clone(),
            });
            bn_stats.push(st);
            cur = out;
        }
        let upsampled = upsample_nearest2x(&cur);
        let (conv_out, conv) = conv3x3_forward(&upsampled, &self.decoder.weight, 1);
        let (bn_out, bn, st) = bn_forward_train(
            &conv_out,
            &self.decoder.bn.gamma,
            &self.decoder.bn.beta,
            self.arch.bn_eps,
        );
        let features_nchw = relu_forward(&bn_out);
        bn_stats.push(st);
        let decoder_cache = BlockCache {
            conv,
            bn,
            relu_out: features_nchw.clone(),
        };
        let logits_nchw = classifier_forward(&features_nchw, &self.classifier_w, &self.classifier_b);
        debug_assert_eq!(features_nchw.dim().2, h / OUTPUT_STRIDE);
        debug_assert_eq!(features_nchw.dim().3, w / OUTPUT_STRIDE);
        Ok(TrainForward {
            output: ModelOutput {
                features: FeatureMap::new(nchw_to_nhwc(&features_nchw.view()))?,
                logits: LogitsMap::new(nchw_to_nhwc(&logits_nchw.view()))?,
            },
            cache: ForwardCache {
                blocks: block_caches,
                decoder: decoder_cache,
                features_nchw,
            },
            bn_stats,
        })
    }

    /// Evaluation-mode forward: running statistics, no caches, pure in
    /// `(params, x)`.
    pub fn forward_eval(&self, x: &ImageBatch) -> Result<ModelOutput> {
        self.check_input(x)?;
        let mut cur = nhwc_to_nchw(&x.data().view());
        for block in &self.blocks {
            let (conv_out, _) = conv3x3_forward(&cur, &block.weight, 2);
            let bn_out = bn_forward_eval(
                &conv_out,
                &block.bn.gamma,
                &block.bn.beta,
                &block.bn.running_mean,
                &block.bn.running_var,
                self.arch.bn_eps,
            );
            cur = relu_forward(&bn_out);
        }
        let upsampled = upsample_nearest2x(&cur);
        let (conv_out, _) = conv3x3_forward(&upsampled, &self.decoder.weight, 1);
        let bn_out = bn_forward_eval(
            &conv_out,
            &self.decoder.bn.gamma,
            &self.decoder.bn.beta,
            &self.decoder.bn.running_mean,
            &self.decoder.bn.running_var,
            self.arch.bn_eps,
        );
        let features_nchw = relu_forward(&bn_out);
        let logits_nchw = classifier_forward(&features_nchw, &self.classifier_w, &self.classifier_b);
        Ok(ModelOutput {
            features: FeatureMap::new(nchw_to_nhwc(&features_nchw.view()))?,
            logits: LogitsMap::new(nchw_to_nhwc(&logits_nchw.view()))?,
        })
    }

    /// Backpropagate a gradient w.r.t. the feature map through decoder and
    /// encoder. Classifier gradients are accumulated separately by the loss
    /// code (they include augmentation terms), so they stay zero here.
    pub fn backward_features(
        &self,
        cache: &ForwardCache,
        d_features: &ArrayView4<f64>,
    ) -> Result<SegModelParams> {
        let mut grads = self.zeros_like();
        let d_feat_nchw = nhwc_to_nchw(d_features);
        if d_feat_nchw.dim() != cache.features_nchw.dim() {
            return Err(Error::shape(
                "backward_features",
                format!("{:?}", cache.features_nchw.dim()),
                format!("{:?}", d_feat_nchw.dim()),
            ));
        }
        let d_relu = relu_backward(&d_feat_nchw, &cache.decoder.relu_out);
        let (d_bn, d_gamma, d_beta) = bn_backward(&d_relu, &self.decoder.bn.gamma, &cache.decoder.bn);
        grads.decoder.bn.gamma = d_gamma;
        grads.decoder.bn.beta = d_beta;
        let (d_up, d_w) = conv3x3_backward(&d_bn, &self.decoder.weight, &cache.decoder.conv);
        grads.decoder.weight = d_w;
        let mut d_cur = upsample_nearest2x_backward(&d_up);
        for i in (0..self.blocks.len()).rev() {
            let d_relu = relu_backward(&d_cur, &cache.blocks[i].relu_out);
            let (d_bn, d_gamma, d_beta) =
                bn_backward(&d_relu, &self.blocks[i].bn.gamma, &cache.blocks[i].bn);
            grads.blocks[i].bn.gamma = d_gamma;
            grads.blocks[i].bn.beta = d_beta;
            let (dx, d_w) = conv3x3_backward(&d_bn, &self.blocks[i].weight, &cache.blocks[i].conv);
            grads.blocks[i].weight = d_w;
            d_cur = dx;
        }
        Ok(grads)
    }
}

pub struct ModelOutput {
    pub features: FeatureMap,
    pub logits: LogitsMap,
}

pub struct BlockCache {
    conv: ConvCache,
    bn: BnCache,
    relu_out: Array4<f64>,
}

pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    decoder: BlockCache,
    features_nchw: Array4<f64>,
}

pub struct TrainForward {
    pub output: ModelOutput,
    pub cache: ForwardCache,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Gradients of the pointwise classifier: returns
/// `(d_features, d_w, d_bias)` for an upstream logits gradient. Feature
/// tensors are channels-last here, like the public maps.
pub fn classifier_pullback(
    w: &Array2<f64>,
    features: &FeatureMap,
    d_logits: &ArrayView4<f64>,
) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
    let f_nchw = nhwc_to_nchw(&features.data().view());
    let d_nchw = nhwc_to_nchw(d_logits);
    let (d_f, d_w, d_b) = layers::classifier_backward(&d_nchw, &f_nchw, w);
    (nchw_to_nhwc(&d_f.view()), d_w, d_b)
}

/// Bilinear resize of logits up to label resolution.
pub fn upsample_logits(p: &LogitsMap, out_h: usize, out_w: usize) -> Result<LogitsMap> {
    let (_, h, w, _) = p.data().dim();
    if out_h < h || out_w < w {
        return Err(Error::validation(
            "upsample_logits",
            format!("target {out_h}x{out_w} smaller than source {h}x{w}"),
        ));
    }
    let nchw = nhwc_to_nchw(&p.data().view());
    let up = upsample_bilinear(&nchw, out_h, out_w);
    LogitsMap::new(nchw_to_nhwc(&up.view()))
}

/// Adjoint of [`upsample_logits`]: pull a full-resolution logits gradient
/// back to the stride-4 grid.
pub fn upsample_logits_backward(d_up: &ArrayView4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let nchw = nhwc_to_nchw(d_up);
    let dx = upsample_bilinear_backward(&nchw, in_h, in_w);
    nchw_to_nhwc(&dx.view())
}

pub(crate) fn nhwc_to_nchw(x: &ArrayView4<f64>) -> Array4<f64> {
    x.view()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
}

pub(crate) fn nchw_to_nhwc(x: &ArrayView4<f64>) -> Array4<f64> {
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
}
