//! Datasets, labeled/unlabeled splits, and a synthetic scene generator.
//!
//! A dataset is an immutable list of items plus a split manifest tagging
//! each item labeled or unlabeled. Partitioning follows the 1/n protocol:
//! shuffle once with a seeded stream, take the first ceil(N/n) items as
//! the labeled set, leave the rest unlabeled. Manifests round-trip through
//! plain text so a split can be pinned and shared.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::types::IGNORE_LABEL;

/// One image with an optional label map. Pixels are stored as 8-bit; use
/// [`DatasetItem::image_f64`] for the `[0, 1]` view the trainer expects.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: String,
    /// `(H, W, 3)` RGB.
    pub image: Array3<u8>,
    /// `(H, W)` class indices with 255 = ignore, when present.
    pub labels: Option<Array2<u8>>,
}

impl DatasetItem {
    pub fn image_f64(&self) -> Array3<f64> {
        self.image.mapv(|v| f64::from(v) / 255.0)
    }
}

/// Whether a manifest entry contributes its label during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub id: String,
    pub labeled: bool,
}

#[derive(Debug, Clone)]
pub struct SegDataset {
    pub class_count: usize,
    pub items: Vec<DatasetItem>,
    /// Aligned with `items`.
    pub manifest: Vec<SplitEntry>,
}

impl SegDataset {
    /// Builds a dataset whose manifest marks exactly the items that carry
    /// labels as labeled.
    pub fn new(items: Vec<DatasetItem>, class_count: usize) -> Result<Self> {
        let manifest = items
            .iter()
            .map(|it| SplitEntry {
                id: it.id.clone(),
                labeled: it.labels.is_some(),
            })
            .collect();
        let ds = SegDataset {
            class_count,
            items,
            manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count >= usize::from(IGNORE_LABEL) {
            return Err(Error::Dataset(format!(
                "class_count {} out of range",
                self.class_count
            )));
        }
        if self.items.len() != self.manifest.len() {
            return Err(Error::Dataset(format!(
                "{} items but {} manifest entries",
                self.items.len(),
                self.manifest.len()
            )));
        }
        let mut seen = HashSet::new();
        for (item, entry) in self.items.iter().zip(&self.manifest) {
            if item.id != entry.id {
                return Err(Error::Dataset(format!(
                    "manifest entry `{}` does not match item `{}`",
                    entry.id, item.id
                )));
            }
            if !seen.insert(&item.id) {
                return Err(Error::Dataset(format!("duplicate item id `{}`", item.id)));
            }
            let (h, w, _) = item.image.dim();
            if let Some(labels) = &item.labels {
                if labels.dim() != (h, w) {
                    return Err(Error::Dataset(format!(
                        "item `{}`: label map {:?} does not match image ({h}, {w})",
                        item.id,
                        labels.dim()
                    )));
                }
                for &v in labels.iter() {
                    if v != IGNORE_LABEL && usize::from(v) >= self.class_count {
                        return Err(Error::Dataset(format!(
                            "item `{}`: label value {v} outside {} classes",
                            item.id, self.class_count
                        )));
                    }
                }
            } else if entry.labeled {
                return Err(Error::Dataset(format!(
                    "item `{}` is tagged labeled but has no label map",
                    item.id
                )));
            }
        }
        Ok(())
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.manifest
            .iter()
            .enumerate()
            .filter(|(_, e)| e.labeled)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        self.manifest
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.labeled)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Reorders a dataset into the 1/n split: seeded shuffle, first
/// ceil(N/n) items labeled, remainder unlabeled.
pub fn make_partition(dataset: &SegDataset, n: usize, seed: u64) -> Result<SegDataset> {
    let count = dataset.items.len();
    if n == 0 {
        return Err(Error::Dataset("denominator must be at least 1".into()));
    }
    if n > count {
        return Err(Error::Dataset(format!(
            "denominator {n} exceeds dataset size {count}"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = stream_rng(seed, Stream::Partition, 0);
    order.shuffle(&mut rng);
    let labeled = count.div_ceil(n);
    let mut items = Vec::with_capacity(count);
    let mut manifest = Vec::with_capacity(count);
    for (pos, &idx) in order.iter().enumerate() {
        let item = dataset.items[idx].clone();
        let tag = pos < labeled;
        if tag && item.labels.is_none() {
            return Err(Error::Dataset(format!(
                "item `{}` selected for the labeled split has no label map",
                item.id
            )));
        }
        manifest.push(SplitEntry {
            id: item.id.clone(),
            labeled: tag,
        });
        items.push(item);
    }
    let ds = SegDataset {
        class_count: dataset.class_count,
        items,
        manifest,
    };
    ds.validate()?;
    Ok(ds)
}

/// One `id<TAB>labeled|unlabeled` line per entry.
pub fn write_manifest(dataset: &SegDataset, path: &Path) -> Result<()> {
    let mut text = String::new();
    for entry in &dataset.manifest {
        text.push_str(&entry.id);
        text.push('\t');
        text.push_str(if entry.labeled { "labeled" } else { "unlabeled" });
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SplitEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, tag) = line.split_once('\t').ok_or_else(|| Error::DatasetFile {
            path: path.to_path_buf(),
            message: format!("line {}: expected `id<TAB>tag`", lineno + 1),
        })?;
        let labeled = match tag {
            "labeled" => true,
            "unlabeled" => false,
            other => {
                return Err(Error::DatasetFile {
                    path: path.to_path_buf(),
                    message: format!("line {}: unknown tag `{other}`", lineno + 1),
                })
            }
        };
        entries.push(SplitEntry {
            id: id.to_string(),
            labeled,
        });
    }
    Ok(entries)
}

/// Reorders and retags a dataset to match a manifest. The manifest must
/// mention every item exactly once.
pub fn apply_manifest(dataset: &SegDataset, manifest: &[SplitEntry]) -> Result<SegDataset> {
    if manifest.len() != dataset.items.len() {
        return Err(Error::Dataset(format!(
            "manifest has {} entries for {} items",
            manifest.len(),
            dataset.items.len()
        )));
    }
    let by_id: std::collections::HashMap<&str, usize> = dataset
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.id.as_str(), i))
        .collect();
    let mut items = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let &idx = by_id.get(entry.id.as_str()).ok_or_else(|| {
            Error::Dataset(format!("manifest names unknown item `{}`", entry.id))
        })?;
        items.push(dataset.items[idx].clone());
    }
    let ds = SegDataset {
        class_count: dataset.class_count,
        items,
        manifest: manifest.to_vec(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Scene recipe for the synthetic corpus: colored shapes over a textured
/// background, later shapes occluding earlier ones, with pixel-exact labels.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub height: usize,
    pub width: usize,
    /// Class 0 is the background.
    pub class_count: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Per-channel Gaussian pixel noise, in `[0, 1]` units.
    pub noise_std: f64,
    /// Per-shape color jitter around the class base color. Overlapping
    /// color distributions keep the task from being solvable per-pixel.
    pub color_jitter_std: f64,
    /// Base RGB per class; when absent an evenly spaced palette is used.
    pub class_colors: Option<Vec<[f64; 3]>>,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            height: 64,
            width: 64,
            class_count: 4,
            shapes_min: 1,
            shapes_max: 4,
            noise_std: 0.02,
            color_jitter_std: 0.08,
            class_colors: None,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count >= usize::from(IGNORE_LABEL) {
            return Err(Error::config("class_count", "need background plus at least one object class"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("canvas", "canvas must be at least 16x16"));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::config("shapes", "shapes_min exceeds shapes_max"));
        }
        if !(self.noise_std >= 0.0) || !(self.color_jitter_std >= 0.0) {
            return Err(Error::config("noise", "noise levels must be non-negative"));
        }
        if let Some(colors) = &self.class_colors {
            if colors.len() != self.class_count {
                return Err(Error::config(
                    "class_colors",
                    format!("{} colors for {} classes", colors.len(), self.class_count),
                ));
            }
        }
        Ok(())
    }

    /// Background is muted gray; object classes get evenly spaced hues.
    pub fn base_color(&self, class: usize) -> [f64; 3] {
        if let Some(colors) = &self.class_colors {
            return colors[class];
        }
        if class == 0 {
            return [0.35, 0.35, 0.38];
        }
        let hue = (class - 1) as f64 / (self.class_count - 1) as f64;
        let (r, g, b) = hsv_to_rgb(hue, 0.65, 0.8);
        [r, g, b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rect {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
    Triangle {
        v: [(f64, f64); 3],
    },
}

impl Shape {
    /// Membership test at pixel centers; rect bounds are half-open.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match self {
            Shape::Rect { top, left, h, w } => {
                y >= *top && y < top + h && x >= *left && x < left + w
            }
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Triangle { v } => {
                let p = (y as f64, x as f64);
                let d1 = cross(v[0], v[1], p);
                let d2 = cross(v[1], v[2], p);
                let d3 = cross(v[2], v[0], p);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let clamp_y = |v: f64| (v.max(0.0) as usize).min(h.saturating_sub(1));
        let clamp_x = |v: f64| (v.max(0.0) as usize).min(w.saturating_sub(1));
        match self {
            Shape::Rect {
                top,
                left,
                h: rh,
                w: rw,
            } => (
                (*top).min(h),
                (top + rh).min(h),
                (*left).min(w),
                (left + rw).min(w),
            ),
            Shape::Ellipse { cy, cx, ry, rx } => (
                clamp_y((cy - ry).floor()),
                clamp_y((cy + ry).ceil()) + 1,
                clamp_x((cx - rx).floor()),
                clamp_x((cx + rx).ceil()) + 1,
            ),
            Shape::Triangle { v } => {
                let ys: Vec<f64> = v.iter().map(|p| p.0).collect();
                let xs: Vec<f64> = v.iter().map(|p| p.1).collect();
                let min = |s: &[f64]| s.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = |s: &[f64]| s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (
                    clamp_y(min(&ys).floor()),
                    clamp_y(max(&ys).ceil()) + 1,
                    clamp_x(min(&xs).floor()),
                    clamp_x(max(&xs).ceil()) + 1,
                )
            }
        }
    }
}

fn cross(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Overwrites pixels and labels inside the shape; overlapping earlier
/// shapes are occluded because painting happens in draw order.
pub fn paint_shape(
    image: &mut Array3<f64>,
    labels: &mut Array2<u8>,
    shape: &Shape,
    class: u8,
    color: [f64; 3],
) {
    let (h, w, _) = image.dim();
    let (y0, y1, x0, x1) = shape.bounds(h, w);
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            if shape.contains(y, x) {
                for c in 0..3 {
                    image[[y, x, c]] = color[c];
                }
                labels[[y, x]] = class;
            }
        }
    }
}

/// Generates `count` scenes. Item `i` depends only on `(cfg.seed, i)`, so
/// regeneration with the same config is bitwise identical.
pub fn generate_synthetic(cfg: &SyntheticSceneConfig, count: usize) -> Result<SegDataset> {
    cfg.validate()?;
    let mut items = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = stream_rng(cfg.seed, Stream::Synth, index as u64);
        let (h, w) = (cfg.height, cfg.width);
        let mut image = Array3::<f64>::zeros((h, w, 3));
        let mut labels = Array2::<u8>::zeros((h, w));

        // textured background: low-frequency brightness ripple over the base color
        let fy = rng.random_range(1.0..4.0);
        let fx = rng.random_range(1.0..4.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let bg = cfg.base_color(0);
        for y in 0..h {
            for x in 0..w {
                let t = 1.0
                    + 0.12
                        * (std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                            + phase)
                            .sin();
                for c in 0..3 {
                    image[[y, x, c]] = (bg[c] * t).clamp(0.0, 1.0);
                }
            }
        }

        let shape_count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
        let min_side = (h.min(w) / 8).max(3);
        let max_side = (h.min(w) / 2).max(min_side + 1);
        for _ in 0..shape_count {
            let kind = rng.random_range(0..3u32);
            let class = rng.random_range(1..cfg.class_count as u32) as u8;
            let shape = match kind {
                0 => {
                    let sh = rng.random_range(min_side..=max_side);
                    let sw = rng.random_range(min_side..=max_side);
                    let top = rng.random_range(0..=h - sh);
                    let left = rng.random_range(0..=w - sw);
                    Shape::Rect {
                        top,
                        left,
                        h: sh,
                        w: sw,
                    }
                }
                1 => {
                    let ry = rng.random_range(min_side as f64 / 2.0..=max_side as f64 / 2.0);
                    let rx = rng.random_range(min_side as f64 / 2.0..=max_side as f64 / 2.0);
                    let cy = rng.random_range(ry..=(h - 1) as f64 - ry);
                    let cx = rng.random_range(rx..=(w - 1) as f64 - rx);
                    Shape::Ellipse { cy, cx, ry, rx }
                }
                _ => {
                    let mut v = [(0.0, 0.0); 3];
                    for p in &mut v {
                        *p = (
                            rng.random::<f64>() * (h - 1) as f64,
                            rng.random::<f64>() * (w - 1) as f64,
                        );
                    }
                    Shape::Triangle { v }
                }
            };
            let base = cfg.base_color(usize::from(class));
            let mut color = [0.0; 3];
            for c in 0..3 {
                let jitter = if cfg.color_jitter_std > 0.0 {
                    let normal = Normal::new(0.0, cfg.color_jitter_std)
                        .map_err(|e| Error::Dataset(e.to_string()))?;
                    normal.sample(&mut rng)
                } else {
                    0.0
                };
                color[c] = (base[c] + jitter).clamp(0.0, 1.0);
            }
            paint_shape(&mut image, &mut labels, &shape, class, color);
        }

        if cfg.noise_std > 0.0 {
            let normal =
                Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Dataset(e.to_string()))?;
            for v in image.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }

        let image_u8 = image.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        items.push(DatasetItem {
            id: format!("synth-{index:05}"),
            image: image_u8,
            labels: Some(labels),
        });
    }
    SegDataset::new(items, cfg.class_count)
}

fn decode_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw();
    Array3::from_shape_vec((h as usize, w as usize, 3), data)
        .map_err(|e| Error::DatasetFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn decode_labels(path: &Path, class_count: usize) -> Result<Array2<u8>> {
    let img = image::open(path)?;
    let luma = match img {
        image::DynamicImage::ImageLuma8(l) => l,
        other => {
            return Err(Error::DatasetFile {
                path: path.to_path_buf(),
                message: format!(
                    "label files must be single-channel 8-bit, got {:?}",
                    other.color()
                ),
            })
        }
    };
    let (w, h) = luma.dimensions();
    let labels = Array2::from_shape_vec((h as usize, w as usize), luma.into_raw()).map_err(|e| {
        Error::DatasetFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })?;
    for &v in labels.iter() {
        if v != IGNORE_LABEL && usize::from(v) >= class_count {
            return Err(Error::DatasetFile {
                path: path.to_path_buf(),
                message: format!("label value {v} outside {class_count} classes"),
            });
        }
    }
    Ok(labels)
}

/// Pairs `images_dir/x.png` with `labels_dir/x.png` by stem; images
/// without a label file become unlabeled items. Items are ordered by file
/// name so loading is deterministic.
pub fn load_folder_dataset(
    images_dir: &Path,
    labels_dir: &Path,
    class_count: usize,
) -> Result<SegDataset> {
    let mut names: Vec<PathBuf> = fs::read_dir(images_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    names.sort();
    let mut items = Vec::with_capacity(names.len());
    for path in names {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::DatasetFile {
                path: path.clone(),
                message: "file name is not valid UTF-8".into(),
            })?
            .to_string();
        let image = decode_rgb(&path)?;
        let label_path = labels_dir.join(format!("{stem}.png"));
        let labels = if label_path.is_file() {
            let l = decode_labels(&label_path, class_count)?;
            let (h, w, _) = image.dim();
            if l.dim() != (h, w) {
                return Err(Error::DatasetFile {
                    path: label_path,
                    message: format!("label map {:?} does not match image ({h}, {w})", l.dim()),
                });
            }
            Some(l)
        } else {
            None
        };
        items.push(DatasetItem {
            id: stem,
            image,
            labels,
        });
    }
    SegDataset::new(items, class_count)
}

/// Writes `images/` and `labels/` PNG trees plus `manifest.txt` under `dir`.
pub fn save_dataset(dataset: &SegDataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    let labels_dir = dir.join("labels");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&labels_dir)?;
    for item in &dataset.items {
        let (h, w, _) = item.image.dim();
        let flat: Vec<u8> = item.image.iter().cloned().collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, flat)
            .ok_or_else(|| Error::Dataset(format!("item `{}`: bad image buffer", item.id)))?;
        img.save(images_dir.join(format!("{}.png", item.id)))?;
        if let Some(labels) = &item.labels {
            let flat: Vec<u8> = labels.iter().cloned().collect();
            let img = image::GrayImage::from_raw(w as u32, h as u32, flat)
                .ok_or_else(|| Error::Dataset(format!("item `{}`: bad label buffer", item.id)))?;
            img.save(labels_dir.join(format!("{}.png", item.id)))?;
        }
    }
    write_manifest(dataset, &dir.join("manifest.txt"))
}

/// With-replacement batch of indices from `pool`, keyed by `(seed, stream,
/// step)` so sampling is stateless and resume-safe.
pub fn sample_batch(
    pool: &[usize],
    batch: usize,
    seed: u64,
    stream: Stream,
    step: u64,
) -> Result<Vec<usize>> {
    if pool.is_empty() && batch > 0 {
        return Err(Error::Dataset("cannot sample from an empty pool".into()));
    }
    let mut rng = stream_rng(seed, stream, step);
    Ok((0..batch)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_dataset(n: usize, with_labels: bool) -> SegDataset {
        let items = (0..n)
            .map(|i| DatasetItem {
                id: format!("item-{i:03}"),
                image: Array3::from_elem((16, 16, 3), (i * 10) as u8),
                labels: with_labels.then(|| Array2::from_elem((16, 16), (i % 3) as u8)),
            })
            .collect();
        SegDataset::new(items, 3).unwrap()
    }

    #[test]
    fn partition_counts_match_ceiling() {
        let ds = tiny_dataset(16, true);
        let p = make_partition(&ds, 8, 1).unwrap();
        assert_eq!(p.labeled_indices().len(), 2);
        assert_eq!(p.unlabeled_indices().len(), 14);
        let p = make_partition(&ds, 16, 1).unwrap();
        assert_eq!(p.labeled_indices().len(), 1);
        let p = make_partition(&ds, 1, 1).unwrap();
        assert_eq!(p.labeled_indices().len(), 16);
        assert!(p.unlabeled_indices().is_empty());
        let p = make_partition(&ds, 3, 1).unwrap();
        assert_eq!(p.labeled_indices().len(), 6);
    }

    #[test]
    fn partition_is_disjoint_and_complete() {
        let ds = tiny_dataset(13, true);
        let p = make_partition(&ds, 4, 9).unwrap();
        let labeled: HashSet<_> = p.labeled_indices().into_iter().collect();
        let unlabeled: HashSet<_> = p.unlabeled_indices().into_iter().collect();
        assert!(labeled.is_disjoint(&unlabeled));
        assert_eq!(labeled.len() + unlabeled.len(), 13);
        let ids: HashSet<_> = p.items.iter().map(|i| i.id.clone()).collect();
        let orig: HashSet<_> = ds.items.iter().map(|i| i.id.clone()).collect();
        assert_eq!(ids, orig);
    }

    #[test]
    fn partition_is_deterministic_and_seed_sensitive() {
        let ds = tiny_dataset(20, true);
        let a = make_partition(&ds, 5, 7).unwrap();
        let b = make_partition(&ds, 5, 7).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let c = make_partition(&ds, 5, 8).unwrap();
        assert_ne!(a.manifest, c.manifest);
    }

    #[test]
    fn partition_rejects_oversized_denominator() {
        let ds = tiny_dataset(4, true);
        assert!(make_partition(&ds, 5, 0).is_err());
        assert!(make_partition(&ds, 0, 0).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let ds = tiny_dataset(6, true);
        let p = make_partition(&ds, 3, 2).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        write_manifest(&p, &path).unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries, p.manifest);
        let restored = apply_manifest(&ds, &entries).unwrap();
        assert_eq!(restored.manifest, p.manifest);
        for (a, b) in restored.items.iter().zip(p.items.iter()) {
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn manifest_with_unknown_id_is_rejected() {
        let ds = tiny_dataset(3, true);
        let entries = vec![
            SplitEntry { id: "item-000".into(), labeled: true },
            SplitEntry { id: "item-001".into(), labeled: false },
            SplitEntry { id: "missing".into(), labeled: false },
        ];
        assert!(apply_manifest(&ds, &entries).is_err());
    }

    #[test]
    fn synthetic_is_bitwise_deterministic() {
        let cfg = SyntheticSceneConfig::default();
        let a = generate_synthetic(&cfg, 3).unwrap();
        let b = generate_synthetic(&cfg, 3).unwrap();
        for (x, y) in a.items.iter().zip(b.items.iter()) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
        }
        let c = generate_synthetic(&SyntheticSceneConfig { seed: 1, ..cfg }, 3).unwrap();
        assert_ne!(a.items[0].image, c.items[0].image);
    }

    #[test]
    fn synthetic_prefix_is_stable_under_count() {
        let cfg = SyntheticSceneConfig::default();
        let a = generate_synthetic(&cfg, 2).unwrap();
        let b = generate_synthetic(&cfg, 5).unwrap();
        for (x, y) in a.items.iter().zip(b.items.iter()) {
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn zero_shapes_give_background_only() {
        let cfg = SyntheticSceneConfig {
            shapes_min: 0,
            shapes_max: 0,
            ..SyntheticSceneConfig::default()
        };
        let ds = generate_synthetic(&cfg, 2).unwrap();
        for item in &ds.items {
            assert!(item.labels.as_ref().unwrap().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn rectangle_label_area_is_exact() {
        let mut image = Array3::<f64>::zeros((32, 32, 3));
        let mut labels = Array2::<u8>::zeros((32, 32));
        let shape = Shape::Rect { top: 5, left: 7, h: 10, w: 12 };
        paint_shape(&mut image, &mut labels, &shape, 2, [1.0, 0.0, 0.0]);
        let count = labels.iter().filter(|&&v| v == 2).count();
        assert_eq!(count, 10 * 12);
        assert_eq!(labels[[5, 7]], 2);
        assert_eq!(labels[[14, 18]], 2);
        assert_eq!(labels[[15, 7]], 0);
        assert_eq!(labels[[5, 19]], 0);
    }

    #[test]
    fn later_shapes_occlude_earlier() {
        let mut image = Array3::<f64>::zeros((32, 32, 3));
        let mut labels = Array2::<u8>::zeros((32, 32));
        paint_shape(&mut image, &mut labels, &Shape::Rect { top: 0, left: 0, h: 20, w: 20 }, 1, [0.5; 3]);
        paint_shape(&mut image, &mut labels, &Shape::Rect { top: 5, left: 5, h: 10, w: 10 }, 2, [0.9; 3]);
        assert_eq!(labels[[6, 6]], 2);
        assert_eq!(labels[[1, 1]], 1);
        assert_eq!(labels.iter().filter(|&&v| v == 2).count(), 100);
        assert_eq!(labels.iter().filter(|&&v| v == 1).count(), 400 - 100);
    }

    #[test]
    fn synthetic_labels_stay_in_range() {
        let cfg = SyntheticSceneConfig {
            class_count: 5,
            shapes_min: 3,
            shapes_max: 6,
            ..SyntheticSceneConfig::default()
        };
        let ds = generate_synthetic(&cfg, 4).unwrap();
        for item in &ds.items {
            for &v in item.labels.as_ref().unwrap().iter() {
                assert!(usize::from(v) < 5);
            }
        }
    }

    #[test]
    fn folder_round_trip_preserves_pixels() {
        let cfg = SyntheticSceneConfig {
            height: 24,
            width: 24,
            ..SyntheticSceneConfig::default()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded =
            load_folder_dataset(&dir.path().join("images"), &dir.path().join("labels"), 4).unwrap();
        assert_eq!(loaded.items.len(), 3);
        for (a, b) in loaded.items.iter().zip(ds.items.iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn unpaired_images_load_as_unlabeled() {
        let cfg = SyntheticSceneConfig {
            height: 24,
            width: 24,
            ..SyntheticSceneConfig::default()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("labels").join("synth-00001.png")).unwrap();
        let loaded =
            load_folder_dataset(&dir.path().join("images"), &dir.path().join("labels"), 4).unwrap();
        assert_eq!(loaded.labeled_indices().len(), 2);
        assert_eq!(loaded.unlabeled_indices().len(), 1);
        assert!(loaded.items[1].labels.is_none());
    }

    #[test]
    fn out_of_range_label_file_is_rejected_by_name() {
        let cfg = SyntheticSceneConfig {
            height: 24,
            width: 24,
            ..SyntheticSceneConfig::default()
        };
        let ds = generate_synthetic(&cfg, 1).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        // class_count 2 makes the generated labels (up to class 3) illegal
        let err =
            load_folder_dataset(&dir.path().join("images"), &dir.path().join("labels"), 2)
                .unwrap_err();
        match err {
            Error::DatasetFile { path, .. } => {
                assert!(path.to_string_lossy().contains("synth-00000"))
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_labels_dir_gives_all_unlabeled() {
        let cfg = SyntheticSceneConfig {
            height: 24,
            width: 24,
            ..SyntheticSceneConfig::default()
        };
        let ds = generate_synthetic(&cfg, 2).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let empty = dir.path().join("empty-labels");
        fs::create_dir_all(&empty).unwrap();
        let loaded = load_folder_dataset(&dir.path().join("images"), &empty, 4).unwrap();
        assert!(loaded.labeled_indices().is_empty());
        assert_eq!(loaded.unlabeled_indices().len(), 2);
    }

    #[test]
    fn sampler_is_deterministic_per_step() {
        let pool = vec![3, 5, 8, 13];
        let a = sample_batch(&pool, 6, 1, Stream::SamplerLabeled, 4).unwrap();
        let b = sample_batch(&pool, 6, 1, Stream::SamplerLabeled, 4).unwrap();
        assert_eq!(a, b);
        let c = sample_batch(&pool, 6, 1, Stream::SamplerLabeled, 5).unwrap();
        assert_ne!(a, c);
        for &idx in &a {
            assert!(pool.contains(&idx));
        }
        assert!(sample_batch(&[], 2, 0, Stream::SamplerUnlabeled, 0).is_err());
    }

    #[test]
    fn validation_catches_mismatched_label_size() {
        let items = vec![DatasetItem {
            id: "bad".into(),
            image: Array3::zeros((16, 16, 3)),
            labels: Some(Array2::zeros((8, 8))),
        }];
        assert!(SegDataset::new(items, 3).is_err());
    }
}
