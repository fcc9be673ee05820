//! Defect quantification: dilation-based clustering of same-class pixels
//! into defects, area/density statistics, and bounding-box IoU of
//! nearest-centroid-matched defects (the recall and precision Box IoU).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ClassId, LabelMap};
use crate::stats::{mean, sample_std, Z95};

/// Minimum defect area in µm²; smaller clusters are treated as imaging
/// artifacts.
pub const AREA_THRESHOLD_DEFAULT: f64 = 0.001888;

/// The earlier companion study's threshold, kept as a preset.
pub const AREA_THRESHOLD_LEGACY: f64 = 0.0087;

#[derive(Debug, Error)]
pub enum DefectError {
    #[error("{0} is not a defect class")]
    NotADefectClass(ClassId),
    #[error("map area must be positive, got {0}")]
    NonPositiveArea(f64),
}

/// Clustering configuration: area threshold, dilation kernel half-width
/// (1 ⇒ 3×3 square), and dilation iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub area_threshold_um2: f64,
    pub dilation_half_width: u32,
    pub dilation_iterations: u32,
}

impl Default for AnalysisConfig {
    fn default() -> AnalysisConfig {
        AnalysisConfig {
            area_threshold_um2: AREA_THRESHOLD_DEFAULT,
            dilation_half_width: 1,
            dilation_iterations: 1,
        }
    }
}

/// Binary raster mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Mask {
        Mask {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Mask of the pixels belonging to one class.
pub fn class_mask(map: &LabelMap, class: ClassId) -> Mask {
    Mask {
        width: map.width(),
        height: map.height(),
        bits: map.pixels().iter().map(|&p| p == class).collect(),
    }
}

/// Binary dilation with a square structuring element of the given
/// half-width, repeated `iterations` times. Half-width 0 is the identity.
pub fn dilate(mask: &Mask, half_width: u32, iterations: u32) -> Mask {
    if half_width == 0 || iterations == 0 {
        return mask.clone();
    }
    let mut current = mask.clone();
    for _ in 0..iterations {
        let mut next = Mask::empty(mask.width, mask.height);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if !current.get(x, y) {
                    continue;
                }
                let x0 = x.saturating_sub(half_width);
                let y0 = y.saturating_sub(half_width);
                let x1 = (x + half_width).min(mask.width - 1);
                let y1 = (y + half_width).min(mask.height - 1);
                for ny in y0..=y1 {
                    for nx in x0..=x1 {
                        next.set(nx, ny, true);
                    }
                }
            }
        }
        current = next;
    }
    current
}

/// 8-connected component labels of a mask: 0 for background, 1.. for
/// components numbered in raster-scan order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<u32> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut labels = vec![0u32; w * h];
    let mut next_label = 1u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        labels[start] = next_label;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if mask.bits[nidx] && labels[nidx] == 0 {
                        labels[nidx] = next_label;
                        stack.push(nidx);
                    }
                }
            }
        }
        next_label += 1;
    }
    labels
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
}

/// A clustered group of same-class pixels. Area, centroid, and bounding box
/// come from the original (undilated) pixels; dilation is only the
/// clustering device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub class: ClassId,
    /// Original pixel coordinates, in raster-scan order.
    pub pixels: Vec<(u32, u32)>,
    /// |pixels| · pixel_size².
    pub area_um2: f64,
    /// Arithmetic mean of pixel centers, in µm.
    pub centroid_um: (f64, f64),
    pub bbox: PixelRect,
    pub on_boundary: bool,
}

impl Defect {
    fn from_pixels(class: ClassId, pixels: Vec<(u32, u32)>, pixel_size: f64) -> Defect {
        debug_assert!(!pixels.is_empty());
        let n = pixels.len() as f64;
        let (mut sx, mut sy) = (0.0f64, 0.0f64);
        let (mut min_x, mut min_y) = (u32::MAX, u32::MAX);
        let (mut max_x, mut max_y) = (0u32, 0u32);
        for &(x, y) in &pixels {
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        Defect {
            class,
            area_um2: n * pixel_size * pixel_size,
            centroid_um: (sx / n * pixel_size, sy / n * pixel_size),
            bbox: PixelRect { min_x, min_y, max_x, max_y },
            pixels,
            on_boundary: false,
        }
    }

    /// Continuous bounding rectangle in µm: pixel (x, y) covers the unit
    /// square [x, x+1) × [y, y+1).
    pub fn rect_um(&self, pixel_size: f64) -> Rect {
        Rect {
            min_x: self.bbox.min_x as f64 * pixel_size,
            min_y: self.bbox.min_y as f64 * pixel_size,
            max_x: (self.bbox.max_x + 1) as f64 * pixel_size,
            max_y: (self.bbox.max_y + 1) as f64 * pixel_size,
        }
    }
}

/// Clusters a defect class's pixels: the class mask is dilated, 8-connected
/// components of the dilated mask define the clusters, and each defect is
/// measured from the original pixels falling in its component.
///
/// Defects are returned in raster-scan order of their dilated component's
/// first pixel, which is the canonical defect order everywhere else.
pub fn cluster_defects(
    map: &LabelMap,
    class: ClassId,
    config: &AnalysisConfig,
) -> Result<Vec<Defect>, DefectError> {
    if !class.is_defect() {
        return Err(DefectError::NotADefectClass(class));
    }
    let mask = class_mask(map, class);
    let dilated = dilate(&mask, config.dilation_half_width, config.dilation_iterations);
    let labels = connected_components(&dilated);
    let n_components = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut groups: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_components];
    for y in 0..map.height() {
        for x in 0..map.width() {
            if mask.get(x, y) {
                let label = labels[y as usize * map.width() as usize + x as usize];
                debug_assert!(label > 0, "dilated mask covers every original pixel");
                groups[(label - 1) as usize].push((x, y));
            }
        }
    }
    Ok(groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| Defect::from_pixels(class, g, map.pixel_size()))
        .collect())
}

/// Keeps defects with area strictly greater than the threshold.
pub fn filter_by_area(defects: Vec<Defect>, area_threshold_um2: f64) -> Vec<Defect> {
    defects
        .into_iter()
        .filter(|d| d.area_um2 > area_threshold_um2)
        .collect()
}

/// Count, area moments, and density of a set of defects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectStats {
    pub n: usize,
    pub mean_area_um2: Option<f64>,
    pub std_area_um2: Option<f64>,
    /// 1.96·std/√n; undefined for n < 2.
    pub ci_half_width_um2: Option<f64>,
    /// Defects per µm² of map area.
    pub density_per_um2: f64,
}

pub fn defect_stats(defects: &[Defect], map_area_um2: f64) -> Result<DefectStats, DefectError> {
    if map_area_um2 <= 0.0 || map_area_um2.is_nan() {
        return Err(DefectError::NonPositiveArea(map_area_um2));
    }
    let areas: Vec<f64> = defects.iter().map(|d| d.area_um2).collect();
    let std = sample_std(&areas);
    Ok(DefectStats {
        n: defects.len(),
        mean_area_um2: mean(&areas),
        std_area_um2: std,
        ci_half_width_um2: std.map(|s| Z95 * s / (areas.len() as f64).sqrt()),
        density_per_um2: defects.len() as f64 / map_area_um2,
    })
}

/// Axis-aligned rectangle with continuous corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x).max(0.0) * (self.max_y - self.min_y).max(0.0)
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// A defect reduced to its centroid and bounding rectangle, the inputs to
/// the Box IoU matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxedDefect {
    pub center: (f64, f64),
    pub rect: Rect,
}

impl BoxedDefect {
    pub fn from_defect(d: &Defect, pixel_size: f64) -> BoxedDefect {
        BoxedDefect {
            center: d.centroid_um,
            rect: d.rect_um(pixel_size),
        }
    }
}

/// Mean bounding-box IoU of each reference defect against its
/// nearest-centroid candidate. Disjoint nearest boxes contribute 0; the
/// denominator is the reference count. `None` when either list is empty.
///
/// Nearest-candidate ties resolve to the lowest candidate index, so results
/// are deterministic for canonically ordered inputs.
pub fn match_and_box_iou(reference: &[BoxedDefect], candidates: &[BoxedDefect]) -> Option<f64> {
    if reference.is_empty() || candidates.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for r in reference {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (k, c) in candidates.iter().enumerate() {
            let dx = r.center.0 - c.center.0;
            let dy = r.center.1 - c.center.1;
            let d2 = dx * dx + dy * dy;
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        sum += r.rect.iou(&candidates[best].rect);
    }
    Some(sum / reference.len() as f64)
}

/// Box IoU precision/recall/average for one defect class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxIou {
    pub box_p: Option<f64>,
    pub box_r: Option<f64>,
    pub box_a: Option<f64>,
}

/// Per-class and macro Box IoU. The recall form matches each truth defect
/// to its nearest prediction; the precision form the reverse. Classes
/// absent from the truth are skipped in the macro mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxIouSummary {
    /// Defect classes in index order (void, impurity, precipitate).
    pub per_class: Vec<(ClassId, BoxIou)>,
    pub macro_box_p: Option<f64>,
    pub macro_box_r: Option<f64>,
    pub macro_box_a: Option<f64>,
}

/// Computes Box IoU per defect class from pre-filtered defect lists (both
/// sides already thresholded by ε).
pub fn box_iou_summary(
    truth: &[Defect],
    pred: &[Defect],
    pixel_size: f64,
) -> BoxIouSummary {
    let mut per_class = Vec::new();
    let mut macro_p = Vec::new();
    let mut macro_r = Vec::new();
    let mut macro_a = Vec::new();
    for class in ClassId::DEFECTS {
        let t: Vec<BoxedDefect> = truth
            .iter()
            .filter(|d| d.class == class)
            .map(|d| BoxedDefect::from_defect(d, pixel_size))
            .collect();
        let p: Vec<BoxedDefect> = pred
            .iter()
            .filter(|d| d.class == class)
            .map(|d| BoxedDefect::from_defect(d, pixel_size))
            .collect();
        let box_r = match_and_box_iou(&t, &p);
        let box_p = match_and_box_iou(&p, &t);
        let box_a = match (box_p, box_r) {
            (Some(bp), Some(br)) => Some((bp + br) / 2.0),
            _ => None,
        };
        if !t.is_empty() {
            macro_p.push(box_p);
            macro_r.push(box_r);
            macro_a.push(box_a);
        }
        per_class.push((class, BoxIou { box_p, box_r, box_a }));
    }
    BoxIouSummary {
        per_class,
        macro_box_p: crate::stats::mean_defined(&macro_p).0,
        macro_box_r: crate::stats::mean_defined(&macro_r).0,
        macro_box_a: crate::stats::mean_defined(&macro_a).0,
    }
}
