//! Weak and strong image augmentation and the CutMix mask algebra.
//!
//! Weak augmentation is geometric only (flip, scale, crop) and is shared
//! pixel-for-pixel between the teacher and student views of an image. Strong
//! augmentation adds exactly one photometric operator on top of a weak view;
//! CutMix is applied separately by the trainer so that the same mask can mix
//! student inputs and the logits that supervise them.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{ImageBatch, LabelMap, LogitsMap, IGNORE_LABEL};

/// Tunable ranges for the augmentation operators. The photometric ranges are
/// conventional semi-supervised settings; all of them can be overridden.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub scale_range: (f64, f64),
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub hue_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
    pub solarize_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            scale_range: (0.5, 2.0),
            brightness_range: (0.6, 1.4),
            contrast_range: (0.6, 1.4),
            saturation_range: (0.6, 1.4),
            hue_range: (-0.1, 0.1),
            blur_sigma_range: (0.1, 2.0),
            solarize_range: (0.5, 1.0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

/// Nearest-neighbor source index under center-aligned sampling.
pub fn nn_source_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let src = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    src.min(src_len - 1)
}

fn bilinear_coords(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let src = src.clamp(0.0, (src_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, src - i0 as f64)
}

fn resize_image_bilinear(img: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    if out_h == h && out_w == w {
        return img.to_owned();
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let (y0, y1, fy) = bilinear_coords(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = bilinear_coords(x, w, out_w);
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn resize_labels_nearest(labels: ArrayView2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = labels.dim();
    if out_h == h && out_w == w {
        return labels.to_owned();
    }
    let mut out = Array2::zeros((out_h, out_w));
    for y in 0..out_h {
        let sy = nn_source_index(y, h, out_h);
        for x in 0..out_w {
            out[[y, x]] = labels[[sy, nn_source_index(x, w, out_w)]];
        }
    }
    out
}

/// One image's geometric transform: scale, then flip, then pad bottom/right
/// to at least the crop size, then crop. Replayable on images and labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometrySpec {
    pub scaled_h: usize,
    pub scaled_w: usize,
    pub flip: bool,
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl GeometrySpec {
    pub fn identity(h: usize, w: usize) -> Self {
        GeometrySpec {
            scaled_h: h,
            scaled_w: w,
            flip: false,
            crop_top: 0,
            crop_left: 0,
            crop_h: h,
            crop_w: w,
        }
    }

    /// Draw a geometry for an `h0 x w0` image: flip with probability 1/2,
    /// uniform scale, crop corner uniform over the padded extent.
    pub fn sample(
        h0: usize,
        w0: usize,
        crop: (usize, usize),
        params: &AugmentParams,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let flip = rng.random::<f64>() < 0.5;
        let scale = uniform(rng, params.scale_range);
        let scaled_h = ((h0 as f64 * scale).round() as usize).max(1);
        let scaled_w = ((w0 as f64 * scale).round() as usize).max(1);
        let padded_h = scaled_h.max(crop.0);
        let padded_w = scaled_w.max(crop.1);
        let crop_top = rng.random_range(0..=padded_h - crop.0);
        let crop_left = rng.random_range(0..=padded_w - crop.1);
        GeometrySpec {
            scaled_h,
            scaled_w,
            flip,
            crop_top,
            crop_left,
            crop_h: crop.0,
            crop_w: crop.1,
        }
    }

    pub fn apply_to_image(&self, img: ArrayView3<f64>) -> Array3<f64> {
        let scaled = resize_image_bilinear(img, self.scaled_h, self.scaled_w);
        let c = img.dim().2;
        let mut out = Array3::zeros((self.crop_h, self.crop_w, c));
        for y in 0..self.crop_h {
            let py = self.crop_top + y;
            if py >= self.scaled_h {
                continue; // bottom padding, stays 0
            }
            for x in 0..self.crop_w {
                let px = self.crop_left + x;
                if px >= self.scaled_w {
                    continue;
                }
                let sx = if self.flip { self.scaled_w - 1 - px } else { px };
                for ch in 0..c {
                    out[[y, x, ch]] = scaled[[py, sx, ch]];
                }
            }
        }
        out
    }

    pub fn apply_to_labels(&self, labels: ArrayView2<u8>) -> Array2<u8> {
        let scaled = resize_labels_nearest(labels, self.scaled_h, self.scaled_w);
        let mut out = Array2::from_elem((self.crop_h, self.crop_w), IGNORE_LABEL);
        for y in 0..self.crop_h {
            let py = self.crop_top + y;
            if py >= self.scaled_h {
                continue;
            }
            for x in 0..self.crop_w {
                let px = self.crop_left + x;
                if px >= self.scaled_w {
                    continue;
                }
                let sx = if self.flip { self.scaled_w - 1 - px } else { px };
                out[[y, x]] = scaled[[py, sx]];
            }
        }
        out
    }
}

/// Geometric augmentation of a batch, one independent draw per image. The
/// same transform is applied to the labels when present; padding pixels are
/// ignored in the label map.
pub fn weak_augment(
    x: &ImageBatch,
    y: Option<&LabelMap>,
    crop: (usize, usize),
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageBatch, Option<LabelMap>, Vec<GeometrySpec>)> {
    let (b, h0, w0) = x.dims();
    if let Some(labels) = y {
        if labels.dims() != (b, h0, w0) {
            return Err(Error::shape(
                "weak_augment",
                format!("labels {b}x{h0}x{w0}"),
                format!("{:?}", labels.dims()),
            ));
        }
    }
    let mut out = Array4::zeros((b, crop.0, crop.1, 3));
    let mut out_labels = y.map(|_| Array3::from_elem((b, crop.0, crop.1), IGNORE_LABEL));
    let mut geoms = Vec::with_capacity(b);
    for i in 0..b {
        let geom = GeometrySpec::sample(h0, w0, crop, params, rng);
        let img = geom.apply_to_image(x.data().index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), i).assign(&img);
        if let (Some(labels), Some(out_l)) = (y, out_labels.as_mut()) {
            let l = geom.apply_to_labels(labels.data().index_axis(Axis(0), i));
            out_l.index_axis_mut(Axis(0), i).assign(&l);
        }
        geoms.push(geom);
    }
    let out_labels = match out_labels {
        Some(l) => Some(LabelMap::new(l, IGNORE_LABEL as usize - 1)?),
        None => None,
    };
    Ok((ImageBatch::new(out)?, out_labels, geoms))
}

/// The five photometric operators of strong augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhotometricOp {
    ColorJitter,
    GaussianBlur,
    Grayscale,
    Equalize,
    Solarize,
}

pub const PHOTOMETRIC_OPS: [PhotometricOp; 5] = [
    PhotometricOp::ColorJitter,
    PhotometricOp::GaussianBlur,
    PhotometricOp::Grayscale,
    PhotometricOp::Equalize,
    PhotometricOp::Solarize,
];

/// Apply exactly one photometric operator, drawn uniformly, per image.
/// Geometry is untouched; CutMix is the trainer's responsibility.
pub fn strong_augment(x: &ImageBatch, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Result<ImageBatch> {
    let (b, h, w) = x.dims();
    let mut out = Array4::zeros((b, h, w, 3));
    for i in 0..b {
        let op = PHOTOMETRIC_OPS[rng.random_range(0..PHOTOMETRIC_OPS.len())];
        let img = apply_photometric(x.data().index_axis(Axis(0), i), op, params, rng);
        out.index_axis_mut(Axis(0), i).assign(&img);
    }
    ImageBatch::new(out)
}

/// Apply one named operator to a single image, drawing its parameters.
pub fn apply_photometric(
    img: ArrayView3<f64>,
    op: PhotometricOp,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let mut out = match op {
        PhotometricOp::ColorJitter => color_jitter(img, params, rng),
        PhotometricOp::GaussianBlur => gaussian_blur(img, uniform(rng, params.blur_sigma_range)),
        PhotometricOp::Grayscale => grayscale(img),
        PhotometricOp::Equalize => equalize(img),
        PhotometricOp::Solarize => solarize(img, uniform(rng, params.solarize_range)),
    };
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma_at(img: &ArrayView3<f64>, y: usize, x: usize) -> f64 {
    LUMA[0] * img[[y, x, 0]] + LUMA[1] * img[[y, x, 1]] + LUMA[2] * img[[y, x, 2]]
}

fn color_jitter(img: ArrayView3<f64>, params: &AugmentParams, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let brightness = uniform(rng, params.brightness_range);
    let contrast = uniform(rng, params.contrast_range);
    let saturation = uniform(rng, params.saturation_range);
    let hue = uniform(rng, params.hue_range);

    let (h, w, _) = img.dim();
    let mut out = img.to_owned();
    out.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));

    let mean_luma = {
        let view = out.view();
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += luma_at(&view, y, x);
            }
        }
        acc / (h * w) as f64
    };
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = out[[y, x, c]];
                out[[y, x, c]] = (mean_luma + (v - mean_luma) * contrast).clamp(0.0, 1.0);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let g = {
                let view = out.view();
                luma_at(&view, y, x)
            };
            for c in 0..3 {
                let v = out[[y, x, c]];
                out[[y, x, c]] = (g + (v - g) * saturation).clamp(0.0, 1.0);
            }
        }
    }
    if hue != 0.0 {
        for y in 0..h {
            for x in 0..w {
                let (hh, ss, vv) = rgb_to_hsv(out[[y, x, 0]], out[[y, x, 1]], out[[y, x, 2]]);
                let (r, g, b) = hsv_to_rgb((hh + hue).rem_euclid(1.0), ss, vv);
                out[[y, x, 0]] = r;
                out[[y, x, 1]] = g;
                out[[y, x, 2]] = b;
            }
        }
    }
    out
}

fn gaussian_blur(img: ArrayView3<f64>, sigma: f64) -> Array3<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        kernel.push((-0.5 * (d / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w, c) = img.dim();
    // horizontal then vertical pass, edge replicate
    let mut tmp = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x + i).saturating_sub(radius).min(w - 1);
                    acc += k * img[[y, sx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y + i).saturating_sub(radius).min(h - 1);
                    acc += k * tmp[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

fn grayscale(img: ArrayView3<f64>) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let g = luma_at(&img, y, x);
            for c in 0..3 {
                out[[y, x, c]] = g;
            }
        }
    }
    out
}

fn equalize(img: ArrayView3<f64>) -> Array3<f64> {
    let (h, w, _) = img.dim();
    let n = (h * w) as f64;
    let mut out = img.to_owned();
    for c in 0..3 {
        let mut hist = [0u64; 256];
        for y in 0..h {
            for x in 0..w {
                hist[(img[[y, x, c]] * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
            }
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for i in 0..256 {
            acc += hist[i];
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        let denom = n - cdf_min as f64;
        if denom <= 0.0 {
            continue; // constant channel, nothing to spread
        }
        for y in 0..h {
            for x in 0..w {
                let bin = (img[[y, x, c]] * 255.0).round().clamp(0.0, 255.0) as usize;
                out[[y, x, c]] = (cdf[bin] - cdf_min) as f64 / denom;
            }
        }
    }
    out
}

fn solarize(img: ArrayView3<f64>, threshold: f64) -> Array3<f64> {
    img.mapv(|v| if v > threshold { 1.0 - v } else { v })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// One rectangle per batch item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Binary mixing mask: 1 inside each item's rectangle, 0 outside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CutMixMask {
    mask: Array3<u8>,
    boxes: Vec<CutMixBox>,
}

impl CutMixMask {
    pub fn from_boxes(b: usize, h: usize, w: usize, boxes: Vec<CutMixBox>) -> Result<Self> {
        if boxes.len() != b {
            return Err(Error::shape(
                "CutMixMask",
                format!("{b} boxes"),
                format!("{}", boxes.len()),
            ));
        }
        let mut mask = Array3::zeros((b, h, w));
        for (i, bx) in boxes.iter().enumerate() {
            if bx.top + bx.height > h || bx.left + bx.width > w {
                return Err(Error::validation(
                    "CutMixMask",
                    format!("box {bx:?} exceeds {h}x{w}"),
                ));
            }
            for y in bx.top..bx.top + bx.height {
                for x in bx.left..bx.left + bx.width {
                    mask[[i, y, x]] = 1;
                }
            }
        }
        Ok(CutMixMask { mask, boxes })
    }

    pub fn mask(&self) -> &Array3<u8> {
        &self.mask
    }

    pub fn boxes(&self) -> &[CutMixBox] {
        &self.boxes
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.mask.dim()
    }

    /// Nearest-neighbor downsample. The image of a rectangle under the
    /// center-aligned source map is again a rectangle, so the box invariant
    /// survives exactly.
    pub fn downsample(&self, out_h: usize, out_w: usize) -> Result<CutMixMask> {
        let (b, h, w) = self.dims();
        let row_src: Vec<usize> = (0..out_h).map(|y| nn_source_index(y, h, out_h)).collect();
        let col_src: Vec<usize> = (0..out_w).map(|x| nn_source_index(x, w, out_w)).collect();
        let boxes = self
            .boxes
            .iter()
            .map(|bx| {
                let rows: Vec<usize> = (0..out_h)
                    .filter(|&y| (bx.top..bx.top + bx.height).contains(&row_src[y]))
                    .collect();
                let cols: Vec<usize> = (0..out_w)
                    .filter(|&x| (bx.left..bx.left + bx.width).contains(&col_src[x]))
                    .collect();
                match (rows.first(), cols.first()) {
                    (Some(&top), Some(&left)) => CutMixBox {
                        top,
                        left,
                        height: rows.len(),
                        width: cols.len(),
                    },
                    _ => CutMixBox {
                        top: 0,
                        left: 0,
                        height: 0,
                        width: 0,
                    },
                }
            })
            .collect();
        CutMixMask::from_boxes(b, out_h, out_w, boxes)
    }
}

/// Draw one rectangle per item with area fraction uniform on `[0, 1]`
/// (Beta(1,1)), placed uniformly, fully inside the image.
pub fn sample_cutmix_mask(b: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<CutMixMask> {
    let fractions: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    sample_cutmix_mask_with_fractions(h, w, &fractions, rng)
}

/// Same as [`sample_cutmix_mask`] with the area fractions pinned (tests use
/// this to force empty and full rectangles).
pub fn sample_cutmix_mask_with_fractions(
    h: usize,
    w: usize,
    fractions: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<CutMixMask> {
    if h < 2 || w < 2 {
        return Err(Error::validation(
            "sample_cutmix_mask",
            format!("image {h}x{w} too small"),
        ));
    }
    let boxes = fractions
        .iter()
        .map(|&frac| {
            let side = frac.clamp(0.0, 1.0).sqrt();
            let height = ((h as f64 * side).round() as usize).min(h);
            let width = ((w as f64 * side).round() as usize).min(w);
            let top = rng.random_range(0..=h - height);
            let left = rng.random_range(0..=w - width);
            CutMixBox {
                top,
                left,
                height,
                width,
            }
        })
        .collect();
    CutMixMask::from_boxes(fractions.len(), h, w, boxes)
}

/// `out = x_i` where the mask is 0, `x_j` where it is 1; pure pixel selection.
pub fn apply_cutmix_images(x_i: &ImageBatch, x_j: &ImageBatch, m: &CutMixMask) -> Result<ImageBatch> {
    let mixed = select_by_mask(x_i.data(), x_j.data(), m, "apply_cutmix_images")?;
    ImageBatch::new(mixed)
}

/// Mix logits with the mask, nearest-downsampled when the logits are
/// subsampled relative to the mask.
pub fn apply_cutmix_logits(p_i: &LogitsMap, p_j: &LogitsMap, m: &CutMixMask) -> Result<LogitsMap> {
    let (_, h, w, _) = p_i.data().dim();
    let (_, mh, mw) = m.dims();
    let mixed = if (mh, mw) == (h, w) {
        select_by_mask(p_i.data(), p_j.data(), m, "apply_cutmix_logits")?
    } else {
        let ds = m.downsample(h, w)?;
        select_by_mask(p_i.data(), p_j.data(), &ds, "apply_cutmix_logits")?
    };
    LogitsMap::new(mixed)
}

fn select_by_mask(
    a: &Array4<f64>,
    b: &Array4<f64>,
    m: &CutMixMask,
    context: &'static str,
) -> Result<Array4<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let (bn, h, w, c) = a.dim();
    if m.dims() != (bn, h, w) {
        return Err(Error::shape(
            context,
            format!("mask {:?}", (bn, h, w)),
            format!("{:?}", m.dims()),
        ));
    }
    let mut out = a.clone();
    for ((i, y, x), &mv) in m.mask().indexed_iter() {
        if mv == 1 {
            for ch in 0..c {
                out[[i, y, x, ch]] = b[[i, y, x, ch]];
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize of a label batch, preserving hard class ids.
pub fn resize_label_map_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (b, _, _) = labels.dims();
    let mut out = Array3::zeros((b, out_h, out_w));
    for i in 0..b {
        let resized = resize_labels_nearest(labels.data().index_axis(Axis(0), i), out_h, out_w);
        out.index_axis_mut(Axis(0), i).assign(&resized);
    }
    LabelMap::new(out, IGNORE_LABEL as usize - 1)
}

/// Roll a batch along axis 0 by one: item `i` becomes item `(i+1) mod B`.
/// CutMix pairs each image with its circular successor in the batch.
pub fn roll_batch(x: &Array4<f64>) -> Array4<f64> {
    let b = x.dim().0;
    let mut out = x.clone();
    for i in 0..b {
        out.index_axis_mut(Axis(0), i)
            .assign(&x.index_axis(Axis(0), (i + 1) % b));
    }
    out
}

/// A weak/strong view pair sharing one geometric transform.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub weak_view: ImageBatch,
    pub strong_view: ImageBatch,
    pub geometry: Vec<GeometrySpec>,
}

impl AugmentedPair {
    /// Build both views of `x`: weak is geometric only, strong adds one
    /// photometric operator on top of the identical geometry.
    pub fn build(
        x: &ImageBatch,
        crop: (usize, usize),
        params: &AugmentParams,
        rng_weak: &mut ChaCha8Rng,
        rng_strong: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (weak_view, _, geometry) = weak_augment(x, None, crop, params, rng_weak)?;
        let strong_view = strong_augment(&weak_view, params, rng_strong)?;
        Ok(AugmentedPair {
            weak_view,
            strong_view,
            geometry,
        })
    }

    /// Replay the stored geometry on a label map.
    pub fn apply_geometry_to_labels(&self, labels: &LabelMap) -> Result<LabelMap> {
        let (b, _, _) = labels.dims();
        if b != self.geometry.len() {
            return Err(Error::shape(
                "AugmentedPair::apply_geometry_to_labels",
                format!("{} items", self.geometry.len()),
                format!("{b}"),
            ));
        }
        let (ch, cw) = (self.geometry[0].crop_h, self.geometry[0].crop_w);
        let mut out = Array3::from_elem((b, ch, cw), IGNORE_LABEL);
        for (i, geom) in self.geometry.iter().enumerate() {
            let l = geom.apply_to_labels(labels.data().index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&l);
        }
        LabelMap::new(out, IGNORE_LABEL as usize - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::Array4;

    fn rng(step: u64) -> ChaCha8Rng {
        stream_rng(42, Stream::AugStrong, step)
    }

    fn random_image(b: usize, h: usize, w: usize, seed: u64) -> ImageBatch {
        let mut r = stream_rng(seed, Stream::AugWeakLabeled, 0);
        let data = Array4::from_shape_fn((b, h, w, 3), |_| r.random::<f64>());
        ImageBatch::new(data).unwrap()
    }

    #[test]
    fn identity_geometry_is_pixelwise_identity() {
        let x = random_image(1, 8, 8, 1);
        let geom = GeometrySpec::identity(8, 8);
        let out = geom.apply_to_image(x.data().index_axis(Axis(0), 0));
        assert_eq!(out, x.data().index_axis(Axis(0), 0).to_owned());
    }

    #[test]
    fn flip_is_an_involution() {
        let x = random_image(1, 8, 8, 2);
        let geom = GeometrySpec {
            flip: true,
            ..GeometrySpec::identity(8, 8)
        };
        let once = geom.apply_to_image(x.data().index_axis(Axis(0), 0));
        let twice = geom.apply_to_image(once.view());
        assert_eq!(twice, x.data().index_axis(Axis(0), 0).to_owned());
    }

    #[test]
    fn weak_augment_label_classes_are_subset() {
        let x = random_image(1, 8, 8, 3);
        let labels = LabelMap::new(
            Array3::from_shape_fn((1, 8, 8), |(_, y, _)| if y < 4 { 0u8 } else { 2u8 }),
            3,
        )
        .unwrap();
        for step in 0..32 {
            let mut r = rng(step);
            let (_, out_labels, _) =
                weak_augment(&x, Some(&labels), (6, 6), &AugmentParams::default(), &mut r).unwrap();
            for &v in out_labels.unwrap().data().iter() {
                assert!(v == 0 || v == 2 || v == IGNORE_LABEL, "unexpected class {v}");
            }
        }
    }

    #[test]
    fn weak_augment_geometry_replays_exactly() {
        let x = random_image(2, 10, 12, 4);
        let mut r = rng(9);
        let (weak, _, geoms) =
            weak_augment(&x, None, (8, 8), &AugmentParams::default(), &mut r).unwrap();
        for (i, geom) in geoms.iter().enumerate() {
            let replay = geom.apply_to_image(x.data().index_axis(Axis(0), i));
            assert_eq!(replay, weak.data().index_axis(Axis(0), i).to_owned());
        }
    }

    #[test]
    fn grayscale_fixes_gray_images() {
        let gray = ImageBatch::new(Array4::from_elem((1, 4, 4, 3), 0.37)).unwrap();
        let out = grayscale(gray.data().index_axis(Axis(0), 0));
        for (v, o) in gray.data().iter().zip(out.iter()) {
            assert!((v - o).abs() < 1e-12);
        }
    }

    #[test]
    fn solarize_threshold_one_is_identity() {
        let x = random_image(1, 4, 4, 5);
        let out = solarize(x.data().index_axis(Axis(0), 0), 1.0);
        assert_eq!(out, x.data().index_axis(Axis(0), 0).to_owned());
    }

    #[test]
    fn all_operators_preserve_shape_and_range() {
        let x = random_image(1, 8, 8, 6);
        for (k, op) in PHOTOMETRIC_OPS.iter().enumerate() {
            let mut r = rng(20 + k as u64);
            let out = apply_photometric(
                x.data().index_axis(Axis(0), 0),
                *op,
                &AugmentParams::default(),
                &mut r,
            );
            assert_eq!(out.dim(), (8, 8, 3));
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?} left range");
        }
    }

    #[test]
    fn forced_fraction_zero_and_one() {
        let mut r = rng(30);
        let empty = sample_cutmix_mask_with_fractions(8, 8, &[0.0], &mut r).unwrap();
        assert_eq!(empty.mask().sum(), 0);
        let full = sample_cutmix_mask_with_fractions(8, 8, &[1.0], &mut r).unwrap();
        assert_eq!(full.mask().sum() as usize, 64);
    }

    #[test]
    fn mask_sum_matches_box_area() {
        for step in 0..16 {
            let mut r = rng(40 + step);
            let m = sample_cutmix_mask(3, 9, 7, &mut r).unwrap();
            for (i, bx) in m.boxes().iter().enumerate() {
                let count: usize = m
                    .mask()
                    .index_axis(Axis(0), i)
                    .iter()
                    .filter(|&&v| v == 1)
                    .count();
                assert_eq!(count, bx.height * bx.width);
            }
        }
    }

    #[test]
    fn cutmix_images_edge_masks() {
        let a = random_image(2, 6, 6, 7);
        let b = random_image(2, 6, 6, 8);
        let mut r = rng(50);
        let zeros = sample_cutmix_mask_with_fractions(6, 6, &[0.0, 0.0], &mut r).unwrap();
        assert_eq!(
            apply_cutmix_images(&a, &b, &zeros).unwrap().data(),
            a.data()
        );
        let ones = sample_cutmix_mask_with_fractions(6, 6, &[1.0, 1.0], &mut r).unwrap();
        assert_eq!(apply_cutmix_images(&a, &b, &ones).unwrap().data(), b.data());
    }

    #[test]
    fn cutmix_pixels_come_from_exactly_one_source() {
        let a = random_image(2, 6, 6, 9);
        let b = random_image(2, 6, 6, 10);
        let mut r = rng(60);
        let m = sample_cutmix_mask(2, 6, 6, &mut r).unwrap();
        let mixed = apply_cutmix_images(&a, &b, &m).unwrap();
        for ((i, y, x), &mv) in m.mask().indexed_iter() {
            for c in 0..3 {
                let v = mixed.data()[[i, y, x, c]];
                let expect = if mv == 1 {
                    b.data()[[i, y, x, c]]
                } else {
                    a.data()[[i, y, x, c]]
                };
                assert_eq!(v, expect);
            }
        }
    }

    #[test]
    fn cutmix_on_equal_inputs_is_identity() {
        let a = random_image(1, 6, 6, 11);
        for step in 0..8 {
            let mut r = rng(70 + step);
            let m = sample_cutmix_mask(1, 6, 6, &mut r).unwrap();
            let mixed = apply_cutmix_images(&a, &a, &m).unwrap();
            assert_eq!(mixed.data(), a.data());
        }
    }

    #[test]
    fn downsampled_mask_matches_nn_map() {
        let mut r = rng(80);
        let m = sample_cutmix_mask(2, 8, 8, &mut r).unwrap();
        let ds = m.downsample(4, 4).unwrap();
        for ((i, y, x), &v) in ds.mask().indexed_iter() {
            let sy = nn_source_index(y, 8, 4);
            let sx = nn_source_index(x, 8, 4);
            assert_eq!(v, m.mask()[[i, sy, sx]]);
        }
    }

    #[test]
    fn mixed_logits_argmax_follows_mask() {
        let mut r = rng(90);
        let p_i = LogitsMap::new(Array4::from_shape_fn((1, 4, 4, 3), |_| r.random::<f64>())).unwrap();
        let p_j = LogitsMap::new(Array4::from_shape_fn((1, 4, 4, 3), |_| r.random::<f64>())).unwrap();
        let m = sample_cutmix_mask(1, 4, 4, &mut r).unwrap();
        let mixed = apply_cutmix_logits(&p_i, &p_j, &m).unwrap();
        let argmax = |p: &LogitsMap, y: usize, x: usize| -> usize {
            let mut best = 0;
            for c in 1..3 {
                if p.data()[[0, y, x, c]] > p.data()[[0, y, x, best]] {
                    best = c;
                }
            }
            best
        };
        for y in 0..4 {
            for x in 0..4 {
                let source = if m.mask()[[0, y, x]] == 1 { &p_j } else { &p_i };
                assert_eq!(argmax(&mixed, y, x), argmax(source, y, x));
            }
        }
    }

    #[test]
    fn augmented_pair_shares_geometry() {
        let x = random_image(2, 10, 10, 12);
        let mut rw = rng(100);
        let mut rs = rng(101);
        let pair = AugmentedPair::build(&x, (8, 8), &AugmentParams::default(), &mut rw, &mut rs).unwrap();
        for (i, geom) in pair.geometry.iter().enumerate() {
            let replay = geom.apply_to_image(x.data().index_axis(Axis(0), i));
            assert_eq!(replay, pair.weak_view.data().index_axis(Axis(0), i).to_owned());
        }
    }
}
