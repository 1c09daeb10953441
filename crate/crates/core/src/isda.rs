//! Implicit feature-space augmentation.
//!
//! Instead of sampling perturbed features, the classifier loss is replaced
//! by its closed-form upper bound over Gaussian feature noise with
//! class-conditional covariance: channel `j` of a pixel with target class
//! `y` becomes `w_j·f + b_j + (lambda/2)(w_j-w_y)' Cov_y (w_j-w_y)`, and
//! the target channel keeps its plain value. The covariance comes from
//! streaming per-class (Welford) statistics over observed features.
//!
//! `mc_isda_loss` is a test-only Monte-Carlo oracle for the bound.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::types::{FeatureMap, LabelMap, IGNORE_LABEL};

/// Largest feature dimension the full-covariance mode accepts.
pub const FULL_COVARIANCE_MAX_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    Diagonal,
    Full,
}

/// Streaming per-class feature statistics: observation counts, means, and
/// second central moments, merged exactly across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureStatistics {
    mode: CovarianceMode,
    counts: Array1<u64>,
    means: Array2<f64>,
    m2_diag: Array2<f64>,
    m2_full: Option<Array3<f64>>,
}

impl ClassFeatureStatistics {
    pub fn new(num_classes: usize, feature_dim: usize, mode: CovarianceMode) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::validation(
                "ClassFeatureStatistics",
                "need at least one class and one feature dimension",
            ));
        }
        if mode == CovarianceMode::Full && feature_dim > FULL_COVARIANCE_MAX_DIM {
            return Err(Error::config(
                "covariance",
                format!("full covariance is limited to D <= {FULL_COVARIANCE_MAX_DIM}"),
            ));
        }
        Ok(ClassFeatureStatistics {
            mode,
            counts: Array1::zeros(num_classes),
            means: Array2::zeros((num_classes, feature_dim)),
            m2_diag: Array2::zeros((num_classes, feature_dim)),
            m2_full: (mode == CovarianceMode::Full)
                .then(|| Array3::zeros((num_classes, feature_dim, feature_dim))),
        })
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.dim().1
    }

    pub fn counts(&self) -> &Array1<u64> {
        &self.counts
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn m2_diag(&self) -> &Array2<f64> {
        &self.m2_diag
    }

    pub fn m2_full(&self) -> Option<&Array3<f64>> {
        self.m2_full.as_ref()
    }

    /// Restore from checkpointed raw moments.
    pub fn from_raw(
        mode: CovarianceMode,
        counts: Array1<u64>,
        means: Array2<f64>,
        m2_diag: Array2<f64>,
        m2_full: Option<Array3<f64>>,
    ) -> Result<Self> {
        let c = counts.len();
        let d = means.dim().1;
        if means.dim().0 != c || m2_diag.dim() != (c, d) {
            return Err(Error::validation("ClassFeatureStatistics", "moment shape mismatch"));
        }
        match (mode, &m2_full) {
            (CovarianceMode::Full, Some(full)) if full.dim() == (c, d, d) => {}
            (CovarianceMode::Diagonal, None) => {}
            _ => {
                return Err(Error::validation(
                    "ClassFeatureStatistics",
                    "covariance mode does not match stored moments",
                ));
            }
        }
        Ok(ClassFeatureStatistics {
            mode,
            counts,
            means,
            m2_diag,
            m2_full,
        })
    }

    fn observe(&mut self, class: usize, f: ArrayView1<f64>) {
        self.counts[class] += 1;
        let n = self.counts[class] as f64;
        let d = self.feature_dim();
        let mut delta = Array1::zeros(d);
        for k in 0..d {
            delta[k] = f[k] - self.means[[class, k]];
            self.means[[class, k]] += delta[k] / n;
        }
        for k in 0..d {
            let delta2 = f[k] - self.means[[class, k]];
            self.m2_diag[[class, k]] += delta[k] * delta2;
        }
        if let Some(full) = self.m2_full.as_mut() {
            // outer-product Welford update: M2 += delta (f - new_mean)'
            for a in 0..d {
                for bq in 0..d {
                    full[[class, a, bq]] += delta[a] * (f[bq] - self.means[[class, bq]]);
                }
            }
        }
    }

    /// Population covariance diagonal of one class; zero for classes never
    /// observed, so unseen classes degrade to unaugmented logits.
    pub fn cov_diag(&self, class: usize) -> Array1<f64> {
        let n = self.counts[class];
        if n == 0 {
            return Array1::zeros(self.feature_dim());
        }
        self.m2_diag.row(class).mapv(|v| (v / n as f64).max(0.0))
    }

    /// Full population covariance matrix (full mode only).
    pub fn cov_full(&self, class: usize) -> Result<Array2<f64>> {
        let full = self.m2_full.as_ref().ok_or_else(|| {
            Error::validation("cov_full", "statistics were built in diagonal mode")
        })?;
        let d = self.feature_dim();
        let n = self.counts[class];
        if n == 0 {
            return Ok(Array2::zeros((d, d)));
        }
        let mut cov = full
            .index_axis(ndarray::Axis(0), class)
            .mapv(|v| v / n as f64);
        // exact symmetry despite accumulated rounding
        for a in 0..d {
            for bq in 0..a {
                let s = 0.5 * (cov[[a, bq]] + cov[[bq, a]]);
                cov[[a, bq]] = s;
                cov[[bq, a]] = s;
            }
        }
        Ok(cov)
    }

    /// Exact merge of two disjoint observation streams.
    pub fn merge(&mut self, other: &ClassFeatureStatistics) -> Result<()> {
        if self.mode != other.mode
            || self.num_classes() != other.num_classes()
            || self.feature_dim() != other.feature_dim()
        {
            return Err(Error::validation("merge", "statistics shapes or modes differ"));
        }
        let d = self.feature_dim();
        for c in 0..self.num_classes() {
            let n = self.counts[c] as f64;
            let m = other.counts[c] as f64;
            if m == 0.0 {
                continue;
            }
            if n == 0.0 {
                self.counts[c] = other.counts[c];
                self.means.row_mut(c).assign(&other.means.row(c));
                self.m2_diag.row_mut(c).assign(&other.m2_diag.row(c));
                if let (Some(full), Some(of)) = (self.m2_full.as_mut(), other.m2_full.as_ref()) {
                    full.index_axis_mut(ndarray::Axis(0), c)
                        .assign(&of.index_axis(ndarray::Axis(0), c));
                }
                continue;
            }
            let total = n + m;
            let delta: Array1<f64> = &other.means.row(c) - &self.means.row(c);
            for k in 0..d {
                self.m2_diag[[c, k]] += other.m2_diag[[c, k]] + delta[k] * delta[k] * n * m / total;
                self.means[[c, k]] += delta[k] * m / total;
            }
            if let (Some(full), Some(of)) = (self.m2_full.as_mut(), other.m2_full.as_ref()) {
                for a in 0..d {
                    for bq in 0..d {
                        full[[c, a, bq]] +=
                            of[[c, a, bq]] + delta[a] * delta[bq] * n * m / total;
                    }
                }
            }
            self.counts[c] = (total) as u64;
        }
        Ok(())
    }
}

/// Fold a batch of per-pixel features into the statistics. Labels must be
/// at feature resolution; IGNORE pixels are skipped.
pub fn update_statistics(
    stats: &mut ClassFeatureStatistics,
    f: &FeatureMap,
    labels: &LabelMap,
) -> Result<()> {
    let (b, h, w, d) = f.data().dim();
    if labels.dims() != (b, h, w) {
        return Err(Error::shape(
            "update_statistics",
            format!("labels {:?}", (b, h, w)),
            format!("{:?}", labels.dims()),
        ));
    }
    if d != stats.feature_dim() {
        return Err(Error::shape(
            "update_statistics",
            format!("feature dim {}", stats.feature_dim()),
            format!("{d}"),
        ));
    }
    for ((bi, y, x), &label) in labels.data().indexed_iter() {
        if label == IGNORE_LABEL {
            continue;
        }
        let class = label as usize;
        if class >= stats.num_classes() {
            return Err(Error::validation(
                "update_statistics",
                format!("class {class} outside {} classes", stats.num_classes()),
            ));
        }
        let pixel = f
            .data()
            .slice(ndarray::s![bi, y, x, ..]);
        stats.observe(class, pixel);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AugmentedLogits {
    pub data: Array4<f64>,
    pub lambda_used: f64,
}

/// `quad[y][j] = (w_j - w_y)' Cov_y (w_j - w_y)`, zero on the diagonal.
fn quadratic_table(w: &Array2<f64>, stats: &ClassFeatureStatistics) -> Result<Array2<f64>> {
    let c = w.dim().0;
    let d = w.dim().1;
    let mut quad = Array2::zeros((c, c));
    for y in 0..c.min(stats.num_classes()) {
        match stats.mode() {
            CovarianceMode::Diagonal => {
                let cov = stats.cov_diag(y);
                for j in 0..c {
                    if j == y {
                        continue;
                    }
                    let mut acc = 0.0;
                    for k in 0..d {
                        let diff = w[[j, k]] - w[[y, k]];
                        acc += diff * diff * cov[k];
                    }
                    quad[[y, j]] = acc;
                }
            }
            CovarianceMode::Full => {
                let cov = stats.cov_full(y)?;
                for j in 0..c {
                    if j == y {
                        continue;
                    }
                    let diff: Array1<f64> = &w.row(j) - &w.row(y);
                    quad[[y, j]] = diff.dot(&cov.dot(&diff));
                }
            }
        }
    }
    Ok(quad)
}

/// Closed-form augmented logits: per pixel with target class `y`, every
/// non-target channel `j` is raised by `(lambda/2) quad[y][j]`; the target
/// channel and IGNORE pixels keep plain logits.
pub fn augment_logits(
    f: &FeatureMap,
    w: &Array2<f64>,
    b: &Array1<f64>,
    target: &LabelMap,
    stats: &ClassFeatureStatistics,
    lambda: f64,
) -> Result<AugmentedLogits> {
    if lambda < 0.0 {
        return Err(Error::validation("augment_logits", "lambda must be nonnegative"));
    }
    let (bn, h, wd, d) = f.data().dim();
    let c = w.dim().0;
    if w.dim().1 != d || b.len() != c {
        return Err(Error::shape(
            "augment_logits",
            format!("classifier {c}x{d}"),
            format!("{:?} / {}", w.dim(), b.len()),
        ));
    }
    if target.dims() != (bn, h, wd) {
        return Err(Error::shape(
            "augment_logits",
            format!("target {:?}", (bn, h, wd)),
            format!("{:?}", target.dims()),
        ));
    }
    let quad = quadratic_table(w, stats)?;
    let mut data = Array4::zeros((bn, h, wd, c));
    for bi in 0..bn {
        for y in 0..h {
            for x in 0..wd {
                let pix = f.data().slice(ndarray::s![bi, y, x, ..]);
                let label = target.data()[[bi, y, x]];
                for j in 0..c {
                    let mut z = b[j];
                    for k in 0..d {
                        z += w[[j, k]] * pix[k];
                    }
                    if label != IGNORE_LABEL && (label as usize) < c && j != label as usize {
                        z += 0.5 * lambda * quad[[label as usize, j]];
                    }
                    data[[bi, y, x, j]] = z;
                }
            }
        }
    }
    Ok(AugmentedLogits {
        data,
        lambda_used: lambda,
    })
}

/// Stable `log(sum(exp(z)))`.
fn log_sum_exp(z: ArrayView1<f64>) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of the augmented logits over pixels that are both
/// non-IGNORE and allowed by `valid`. Returns `(loss, empty)` where the
/// flag marks a zero-pixel reduction (loss 0, no gradient).
pub fn isda_loss(
    aug: &AugmentedLogits,
    target: &LabelMap,
    valid: Option<&Array3<bool>>,
) -> Result<(f64, bool)> {
    let (bn, h, w, c) = aug.data.dim();
    if target.dims() != (bn, h, w) {
        return Err(Error::shape(
            "isda_loss",
            format!("target {:?}", (bn, h, w)),
            format!("{:?}", target.dims()),
        ));
    }
    if let Some(v) = valid {
        if v.dim() != (bn, h, w) {
            return Err(Error::shape(
                "isda_loss",
                format!("valid {:?}", (bn, h, w)),
                format!("{:?}", v.dim()),
            ));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((bi, y, x), &label) in target.data().indexed_iter() {
        if label == IGNORE_LABEL || valid.is_some_and(|v| !v[[bi, y, x]]) {
            continue;
        }
        if label as usize >= c {
            return Err(Error::validation(
                "isda_loss",
                format!("target class {label} outside {c} channels"),
            ));
        }
        let z = aug.data.slice(ndarray::s![bi, y, x, ..]);
        total += log_sum_exp(z) - z[label as usize];
        count += 1;
    }
    if count == 0 {
        Ok((0.0, true))
    } else {
        Ok((total / count as f64, false))
    }
}

/// One augmented loss term with its exact gradients.
#[derive(Debug, Clone)]
pub struct IsdaTermGrads {
    pub loss: f64,
    pub empty: bool,
    pub grad_f: Array4<f64>,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
}

/// Loss and analytic gradients w.r.t. features and classifier. The
/// covariance statistics are data, not differentiated through; the
/// quadratic term still contributes `w` gradients on both its rows.
pub fn isda_term_with_grads(
    f: &FeatureMap,
    w: &Array2<f64>,
    b: &Array1<f64>,
    target: &LabelMap,
    valid: Option<&Array3<bool>>,
    stats: &ClassFeatureStatistics,
    lambda: f64,
) -> Result<IsdaTermGrads> {
    let aug = augment_logits(f, w, b, target, stats, lambda)?;
    let (loss, empty) = isda_loss(&aug, target, valid)?;
    let (bn, h, wd, d) = f.data().dim();
    let c = w.dim().0;
    let mut grad_f = Array4::zeros((bn, h, wd, d));
    let mut grad_w = Array2::zeros((c, d));
    let mut grad_b = Array1::zeros(c);
    if empty {
        return Ok(IsdaTermGrads {
            loss,
            empty,
            grad_f,
            grad_w,
            grad_b,
        });
    }
    let mut count = 0usize;
    for ((bi, y, x), &label) in target.data().indexed_iter() {
        if label != IGNORE_LABEL && !valid.is_some_and(|v| !v[[bi, y, x]]) {
            count += 1;
        }
    }
    let inv_count = 1.0 / count as f64;

    // cov_y (w_j - w_y) per (y, j), scaled by lambda, reused for both the
    // w_j and w_y gradient rows
    let mut cov_diff = Array3::zeros((c, c, d));
    for y in 0..c.min(stats.num_classes()) {
        match stats.mode() {
            CovarianceMode::Diagonal => {
                let cov = stats.cov_diag(y);
                for j in 0..c {
                    if j == y {
                        continue;
                    }
                    for k in 0..d {
                        cov_diff[[y, j, k]] = lambda * cov[k] * (w[[j, k]] - w[[y, k]]);
                    }
                }
            }
            CovarianceMode::Full => {
                let cov = stats.cov_full(y)?;
                for j in 0..c {
                    if j == y {
                        continue;
                    }
                    let diff: Array1<f64> = &w.row(j) - &w.row(y);
                    let cv = cov.dot(&diff);
                    for k in 0..d {
                        cov_diff[[y, j, k]] = lambda * cv[k];
                    }
                }
            }
        }
    }

    for ((bi, y, x), &label) in target.data().indexed_iter() {
        if label == IGNORE_LABEL || valid.is_some_and(|v| !v[[bi, y, x]]) {
            continue;
        }
        let yc = label as usize;
        let z = aug.data.slice(ndarray::s![bi, y, x, ..]);
        let lse = log_sum_exp(z);
        let pix = f.data().slice(ndarray::s![bi, y, x, ..]);
        for j in 0..c {
            let g = (((z[j] - lse).exp()) - if j == yc { 1.0 } else { 0.0 }) * inv_count;
            grad_b[j] += g;
            for k in 0..d {
                grad_f[[bi, y, x, k]] += g * w[[j, k]];
                grad_w[[j, k]] += g * pix[k];
            }
            if j != yc {
                for k in 0..d {
                    grad_w[[j, k]] += g * cov_diff[[yc, j, k]];
                    grad_w[[yc, k]] -= g * cov_diff[[yc, j, k]];
                }
            }
        }
    }
    Ok(IsdaTermGrads {
        loss,
        empty,
        grad_f,
        grad_w,
        grad_b,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, eigenvectors)` with eigenvectors in columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let d = a.dim().0;
    if a.dim().1 != d {
        return Err(Error::shape("symmetric_eigen", "square matrix", format!("{:?}", a.dim())));
    }
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(d);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..d {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = cos * mkp - sin * mkq;
                    m[[k, q]] = sin * mkp + cos * mkq;
                }
                for k in 0..d {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = cos * mpk - sin * mqk;
                    m[[q, k]] = sin * mpk + cos * mqk;
                }
                for k in 0..d {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = cos * vkp - sin * vkq;
                    v[[k, q]] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    Ok((Array1::from_shape_fn(d, |i| m[[i, i]]), v))
}

/// Monte-Carlo oracle for a single pixel: draw `m` features from the
/// class-conditional Gaussian `N(f, lambda * Cov_y)` and average the plain
/// cross-entropy. Returns `(estimate, std_error)`; `std_error` is the
/// sample standard deviation over `sqrt(m)` (infinite for `m = 1`, which
/// carries no spread information).
pub fn mc_isda_loss(
    f: ArrayView1<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    y: usize,
    stats: &ClassFeatureStatistics,
    lambda: f64,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let d = f.len();
    let c = w.dim().0;
    if m == 0 {
        return Err(Error::validation("mc_isda_loss", "need at least one sample"));
    }
    if y >= c {
        return Err(Error::validation("mc_isda_loss", "target class out of range"));
    }
    // scale rows: sample = f + sqrt(lambda) * L eps with L L' = Cov_y
    let scale: Array2<f64> = match stats.mode() {
        CovarianceMode::Diagonal => {
            let cov = stats.cov_diag(y);
            Array2::from_diag(&cov.mapv(|v| (lambda * v).sqrt()))
        }
        CovarianceMode::Full => {
            let cov = stats.cov_full(y)?;
            let (vals, vecs) = symmetric_eigen(&cov)?;
            let mut l = Array2::zeros((d, d));
            for col in 0..d {
                let s = (lambda * vals[col].max(0.0)).sqrt();
                for row in 0..d {
                    l[[row, col]] = vecs[[row, col]] * s;
                }
            }
            l
        }
    };
    // variance accumulated around the first sample, so identical samples
    // (the lambda = 0 case) give an exactly zero standard error
    let mut shift = 0.0;
    let mut sum_d = 0.0;
    let mut sum_d2 = 0.0;
    let mut eps = Array1::zeros(d);
    for i in 0..m {
        for e in eps.iter_mut() {
            *e = rng.sample::<f64, _>(StandardNormal);
        }
        let noise = scale.dot(&eps);
        let mut z = Array1::zeros(c);
        for j in 0..c {
            let mut acc = b[j];
            for k in 0..d {
                acc += w[[j, k]] * (f[k] + noise[k]);
            }
            z[j] = acc;
        }
        let ce = log_sum_exp(z.view()) - z[y];
        if i == 0 {
            shift = ce;
        }
        sum_d += ce - shift;
        sum_d2 += (ce - shift) * (ce - shift);
    }
    let mf = m as f64;
    let mean = shift + sum_d / mf;
    let std_error = if m > 1 {
        let var = ((sum_d2 - sum_d * sum_d / mf) / (mf - 1.0)).max(0.0);
        (var / mf).sqrt()
    } else {
        f64::INFINITY
    };
    Ok((mean, std_error))
}
