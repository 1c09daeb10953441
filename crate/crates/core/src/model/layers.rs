//! NCHW layer primitives in f64 with explicit backward passes.
//!
//! Convolutions go through im2col + GEMM so the heavy work lands in
//! matrix multiplies. Batch norm keeps population batch variance in the
//! cache and leaves running-statistics bookkeeping to the caller.

use ndarray::{Array1, Array2, Array4, Axis};

/// im2col for a k x k kernel: row `(c*k + ky)*k + kx`, column
/// `(b*h_out + y)*w_out + x`. Out-of-bounds taps read as zero padding.
pub fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, b * h_out * w_out));
    for bi in 0..b {
        for y in 0..h_out {
            for xo in 0..w_out {
                let col = (bi * h_out + y) * w_out + xo;
                for ci in 0..c {
                    for ky in 0..k {
                        let sy = (y * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = (xo * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[[(ci * k + ky) * k + kx, col]] =
                                x[[bi, ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input-shaped
/// gradient.
pub fn col2im(
    d_cols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = dims;
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array4::zeros(dims);
    for bi in 0..b {
        for y in 0..h_out {
            for xo in 0..w_out {
                let col = (bi * h_out + y) * w_out + xo;
                for ci in 0..c {
                    for ky in 0..k {
                        let sy = (y * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = (xo * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[bi, ci, sy as usize, sx as usize]] +=
                                d_cols[[(ci * k + ky) * k + kx, col]];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub struct ConvCache {
    pub cols: Array2<f64>,
    pub in_dims: (usize, usize, usize, usize),
    pub stride: usize,
}

/// 3x3 convolution, padding 1, no bias.
pub fn conv3x3_forward(x: &Array4<f64>, weight: &Array4<f64>, stride: usize) -> (Array4<f64>, ConvCache) {
    let (b, _, h, w) = x.dim();
    let c_out = weight.dim().0;
    let c_in = weight.dim().1;
    let h_out = (h + 2 - 3) / stride + 1;
    let w_out = (w + 2 - 3) / stride + 1;
    let cols = im2col(x, 3, stride, 1);
    let w_mat = weight.to_shape((c_out, c_in * 9)).unwrap();
    let out_mat = w_mat.dot(&cols);
    let out = out_mat
        .into_shape_with_order((c_out, b, h_out, w_out))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned();
    (
        out,
        ConvCache {
            cols,
            in_dims: x.dim(),
            stride,
        },
    )
}

/// Returns `(dx, d_weight)`.
pub fn conv3x3_backward(
    d_out: &Array4<f64>,
    weight: &Array4<f64>,
    cache: &ConvCache,
) -> (Array4<f64>, Array4<f64>) {
    let (b, c_out, h_out, w_out) = d_out.dim();
    let c_in = weight.dim().1;
    let d_out_mat = d_out
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((c_out, b * h_out * w_out))
        .unwrap()
        .to_owned();
    let d_w = d_out_mat
        .dot(&cache.cols.t())
        .into_shape_with_order((c_out, c_in, 3, 3))
        .unwrap();
    let w_mat = weight.to_shape((c_out, c_in * 9)).unwrap();
    let d_cols = w_mat.t().dot(&d_out_mat);
    let dx = col2im(&d_cols, cache.in_dims, 3, cache.stride, 1);
    (dx, d_w)
}

pub struct BnCache {
    pub xhat: Array4<f64>,
    pub invstd: Array1<f64>,
}

/// Per-channel batch mean and population variance, with the element count
/// the running-statistics update needs.
pub struct BnBatchStats {
    pub mean: Array1<f64>,
    pub var_biased: Array1<f64>,
    pub n: usize,
}

pub fn bn_forward_train(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array4<f64>, BnCache, BnBatchStats) {
    let (b, c, h, w) = x.dim();
    let n = b * h * w;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ci in 0..c {
        let ch = x.index_axis(Axis(1), ci);
        let m = ch.sum() / n as f64;
        mean[ci] = m;
        var[ci] = ch.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    }
    let invstd = var.mapv(|v: f64| 1.0 / (v + eps).sqrt());
    let mut xhat = x.clone();
    let mut out = Array4::zeros(x.dim());
    for ci in 0..c {
        let m = mean[ci];
        let is = invstd[ci];
        let (g, bt) = (gamma[ci], beta[ci]);
        let mut xh = xhat.index_axis_mut(Axis(1), ci);
        xh.mapv_inplace(|v| (v - m) * is);
        out.index_axis_mut(Axis(1), ci).assign(&xh.mapv(|v| g * v + bt));
    }
    (
        out,
        BnCache { xhat, invstd },
        BnBatchStats {
            mean,
            var_biased: var,
            n,
        },
    )
}

pub fn bn_forward_eval(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    eps: f64,
) -> Array4<f64> {
    let c = x.dim().1;
    let mut out = x.clone();
    for ci in 0..c {
        let m = running_mean[ci];
        let is = 1.0 / (running_var[ci] + eps).sqrt();
        let (g, bt) = (gamma[ci], beta[ci]);
        out.index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| g * (v - m) * is + bt);
    }
    out
}

/// Train-mode backward. Returns `(dx, d_gamma, d_beta)` with the batch
/// statistics treated as functions of the input.
pub fn bn_backward(
    dy: &Array4<f64>,
    gamma: &Array1<f64>,
    cache: &BnCache,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = dy.dim();
    let n = (b * h * w) as f64;
    let mut dx = Array4::zeros(dy.dim());
    let mut d_gamma = Array1::zeros(c);
    let mut d_beta = Array1::zeros(c);
    for ci in 0..c {
        let dy_c = dy.index_axis(Axis(1), ci);
        let xh = cache.xhat.index_axis(Axis(1), ci);
        let sum_dy = dy_c.sum();
        let sum_dy_xh = dy_c.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f64>();
        d_beta[ci] = sum_dy;
        d_gamma[ci] = sum_dy_xh;
        let scale = gamma[ci] * cache.invstd[ci] / n;
        let mut dx_c = dx.index_axis_mut(Axis(1), ci);
        for ((d, &dyv), &xhv) in dx_c.iter_mut().zip(dy_c.iter()).zip(xh.iter()) {
            *d = scale * (n * dyv - sum_dy - xhv * sum_dy_xh);
        }
    }
    (dx, d_gamma, d_beta)
}

pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `y` is the relu output; its sign carries the mask.
pub fn relu_backward(dy: &Array4<f64>, y: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn upsample_nearest2x(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[[bi, ci, y, xo]] = x[[bi, ci, y / 2, xo / 2]];
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2x_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((b, c, h2 / 2, w2 / 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h2 {
                for xo in 0..w2 {
                    dx[[bi, ci, y / 2, xo / 2]] += dy[[bi, ci, y, xo]];
                }
            }
        }
    }
    dx
}

/// Per-axis source taps for center-aligned bilinear resampling.
fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|dst| {
            let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
            let s = s.clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(src_len - 1), s - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Array4<f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let mut out = Array4::zeros((b, c, out_h, out_w));
    for bi in 0..b {
        for ci in 0..c {
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (xo, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = x[[bi, ci, y0, x0]] * (1.0 - fx) + x[[bi, ci, y0, x1]] * fx;
                    let bot = x[[bi, ci, y1, x0]] * (1.0 - fx) + x[[bi, ci, y1, x1]] * fx;
                    out[[bi, ci, y, xo]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`] onto an `in_h x in_w` grid.
pub fn upsample_bilinear_backward(dy: &Array4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (b, c, out_h, out_w) = dy.dim();
    let ys = bilinear_taps(in_h, out_h);
    let xs = bilinear_taps(in_w, out_w);
    let mut dx = Array4::zeros((b, c, in_h, in_w));
    for bi in 0..b {
        for ci in 0..c {
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (xo, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = dy[[bi, ci, y, xo]];
                    dx[[bi, ci, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                    dx[[bi, ci, y0, x1]] += g * (1.0 - fy) * fx;
                    dx[[bi, ci, y1, x0]] += g * fy * (1.0 - fx);
                    dx[[bi, ci, y1, x1]] += g * fy * fx;
                }
            }
        }
    }
    dx
}

/// Pointwise affine classifier: `logits[b,c,y,x] = w[c]·f[b,:,y,x] + bias[c]`.
pub fn classifier_forward(f: &Array4<f64>, w: &Array2<f64>, bias: &Array1<f64>) -> Array4<f64> {
    let (b, d, h, wd) = f.dim();
    let c = w.dim().0;
    let f_mat = f
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((d, b * h * wd))
        .unwrap()
        .to_owned();
    let mut out_mat = w.dot(&f_mat);
    for (mut row, &bv) in out_mat.rows_mut().into_iter().zip(bias.iter()) {
        row.mapv_inplace(|v| v + bv);
    }
    out_mat
        .into_shape_with_order((c, b, h, wd))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
}

/// Returns `(d_f, d_w, d_bias)`.
pub fn classifier_backward(
    d_logits: &Array4<f64>,
    f: &Array4<f64>,
    w: &Array2<f64>,
) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
    let (b, d, h, wd) = f.dim();
    let c = w.dim().0;
    let f_mat = f
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((d, b * h * wd))
        .unwrap()
        .to_owned();
    let d_out_mat = d_logits
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((c, b * h * wd))
        .unwrap()
        .to_owned();
    let d_w = d_out_mat.dot(&f_mat.t());
    let d_bias = d_out_mat.sum_axis(Axis(1));
    let d_f = w
        .t()
        .dot(&d_out_mat)
        .into_shape_with_order((d, b, h, wd))
        .unwrap()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned();
    (d_f, d_w, d_bias)
}
