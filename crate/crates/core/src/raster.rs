//! Canonical raster types shared by every other module: pixel classes, the
//! label color palette, class rasters with physical pixel size, per-trial
//! score stacks, and image metadata sidecars.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::io::RasterError;

/// Maximum tolerated deviation of a per-pixel score vector from summing to 1.
pub const SCORE_NORMALIZATION_TOL: f64 = 1e-5;

/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 5;

/// Pixel class of a labeled micrograph.
///
/// Indices 2–4 are the defect classes; grain is the background class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Grain = 0,
    Boundary = 1,
    Void = 2,
    Impurity = 3,
    Precipitate = 4,
}

impl ClassId {
    /// All classes in index order.
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::Grain,
        ClassId::Boundary,
        ClassId::Void,
        ClassId::Impurity,
        ClassId::Precipitate,
    ];

    /// The defect classes (voids, impurities, precipitates).
    pub const DEFECTS: [ClassId; 3] = [ClassId::Void, ClassId::Impurity, ClassId::Precipitate];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassId> {
        ClassId::ALL.get(index).copied()
    }

    pub fn is_defect(self) -> bool {
        matches!(self, ClassId::Void | ClassId::Impurity | ClassId::Precipitate)
    }

    /// Stable lowercase name used in all CSV/JSON outputs (never bare indices).
    pub fn name(self) -> &'static str {
        match self {
            ClassId::Grain => "grain",
            ClassId::Boundary => "boundary",
            ClassId::Void => "void",
            ClassId::Impurity => "impurity",
            ClassId::Precipitate => "precipitate",
        }
    }

    pub fn from_name(name: &str) -> Option<ClassId> {
        ClassId::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bijective mapping between classes and 8-bit RGB label colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: [[u8; 3]; NUM_CLASSES],
}

impl Palette {
    /// Builds a palette, rejecting duplicate colors.
    pub fn new(colors: [[u8; 3]; NUM_CLASSES]) -> Result<Palette, RasterError> {
        for i in 0..NUM_CLASSES {
            for j in (i + 1)..NUM_CLASSES {
                if colors[i] == colors[j] {
                    return Err(RasterError::PaletteNotBijective { rgb: colors[i] });
                }
            }
        }
        Ok(Palette { colors })
    }

    pub fn color_of(&self, class: ClassId) -> [u8; 3] {
        self.colors[class.index()]
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<ClassId> {
        self.colors
            .iter()
            .position(|&c| c == rgb)
            .and_then(ClassId::from_index)
    }
}

impl Default for Palette {
    /// Grain black, boundary red, void green, impurity yellow, precipitate blue.
    fn default() -> Palette {
        Palette {
            colors: [
                [0, 0, 0],
                [255, 0, 0],
                [0, 255, 0],
                [255, 255, 0],
                [0, 0, 255],
            ],
        }
    }
}

/// Per-pixel class raster with isotropic physical pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    pixels: Vec<ClassId>,
    pixel_size: f64,
}

impl LabelMap {
    /// Builds a map from row-major pixels. `pixel_size` is µm per pixel.
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<ClassId>,
        pixel_size: f64,
    ) -> Result<LabelMap, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage);
        }
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(RasterError::PixelCountMismatch {
                expected: (width as usize) * (height as usize),
                got: pixels.len(),
            });
        }
        if pixel_size <= 0.0 || pixel_size.is_nan() {
            return Err(RasterError::NonPositivePixelSize { pixel_size });
        }
        Ok(LabelMap {
            width,
            height,
            pixels,
            pixel_size,
        })
    }

    /// Uniform map of one class.
    pub fn filled(
        width: u32,
        height: u32,
        class: ClassId,
        pixel_size: f64,
    ) -> Result<LabelMap, RasterError> {
        let n = (width as usize) * (height as usize);
        LabelMap::new(width, height, vec![class; n], pixel_size)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn pixels(&self) -> &[ClassId] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> ClassId {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, class: ClassId) {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y as usize * self.width as usize + x as usize] = class;
    }

    /// Physical area of the map in µm².
    pub fn area_um2(&self) -> f64 {
        self.width as f64 * self.height as f64 * self.pixel_size * self.pixel_size
    }

    pub fn same_dimensions(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Per-class pixel counts and proportions of a label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: [u64; NUM_CLASSES],
    pub proportions: [f64; NUM_CLASSES],
    pub total: u64,
}

impl ClassCounts {
    pub fn count(&self, class: ClassId) -> u64 {
        self.counts[class.index()]
    }

    pub fn proportion(&self, class: ClassId) -> f64 {
        self.proportions[class.index()]
    }
}

/// Counts pixels per class; proportions sum to 1.
pub fn class_counts(map: &LabelMap) -> ClassCounts {
    let mut counts = [0u64; NUM_CLASSES];
    for &p in map.pixels() {
        counts[p.index()] += 1;
    }
    let total: u64 = counts.iter().sum();
    let mut proportions = [0.0; NUM_CLASSES];
    for (p, &c) in proportions.iter_mut().zip(counts.iter()) {
        *p = c as f64 / total as f64;
    }
    ClassCounts {
        counts,
        proportions,
        total,
    }
}

/// 8-bit grayscale micrograph raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Micrograph {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Micrograph {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Micrograph, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage);
        }
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(RasterError::PixelCountMismatch {
                expected: (width as usize) * (height as usize),
                got: pixels.len(),
            });
        }
        Ok(Micrograph {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Micrograph, RasterError> {
        let n = (width as usize) * (height as usize);
        Micrograph::new(width, height, vec![value; n])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y as usize * self.width as usize + x as usize] = value;
    }
}

/// Trials × classes × H × W stack of per-pixel class scores.
///
/// Every per-pixel score vector must sum to 1 within
/// [`SCORE_NORMALIZATION_TOL`] (softmax outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack {
    trials: u32,
    height: u32,
    width: u32,
    /// Planar `[trial][class][row][col]` order.
    scores: Vec<f32>,
}

impl ScoreStack {
    pub fn new(
        trials: u32,
        height: u32,
        width: u32,
        scores: Vec<f32>,
    ) -> Result<ScoreStack, RasterError> {
        if trials == 0 || height == 0 || width == 0 {
            return Err(RasterError::EmptyImage);
        }
        let expected = (trials as usize)
            .checked_mul(NUM_CLASSES)
            .and_then(|v| v.checked_mul(height as usize))
            .and_then(|v| v.checked_mul(width as usize))
            .ok_or(RasterError::DimensionOverflow)?;
        if scores.len() != expected {
            return Err(RasterError::PixelCountMismatch {
                expected,
                got: scores.len(),
            });
        }
        let stack = ScoreStack {
            trials,
            height,
            width,
            scores,
        };
        stack.check_normalization()?;
        Ok(stack)
    }

    fn check_normalization(&self) -> Result<(), RasterError> {
        for t in 0..self.trials {
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut sum = 0.0f64;
                    for c in 0..NUM_CLASSES {
                        sum += self.score_idx(t, c, y, x) as f64;
                    }
                    if (sum - 1.0).abs() > SCORE_NORMALIZATION_TOL {
                        return Err(RasterError::NormalizationViolation {
                            trial: t,
                            x,
                            y,
                            sum,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn trials(&self) -> u32 {
        self.trials
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn raw(&self) -> &[f32] {
        &self.scores
    }

    fn score_idx(&self, trial: u32, class: usize, y: u32, x: u32) -> f32 {
        let (t, h, w) = (trial as usize, self.height as usize, self.width as usize);
        self.scores[((t * NUM_CLASSES + class) * h + y as usize) * w + x as usize]
    }

    pub fn score(&self, trial: u32, class: ClassId, y: u32, x: u32) -> f32 {
        self.score_idx(trial, class.index(), y, x)
    }

    /// The per-pixel score vector of one trial.
    pub fn score_vector(&self, trial: u32, y: u32, x: u32) -> [f32; NUM_CLASSES] {
        let mut v = [0.0f32; NUM_CLASSES];
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = self.score_idx(trial, c, y, x);
        }
        v
    }

    /// Highest-scoring class of one trial; ties resolve to the lower index.
    pub fn argmax(&self, trial: u32, y: u32, x: u32) -> ClassId {
        let v = self.score_vector(trial, y, x);
        let mut best = 0usize;
        for c in 1..NUM_CLASSES {
            if v[c] > v[best] {
                best = c;
            }
        }
        ClassId::from_index(best).unwrap()
    }
}

/// Irradiation condition of the imaged pellet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Irradiated,
    Unirradiated,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Irradiated => "irradiated",
            Condition::Unirradiated => "unirradiated",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Image metadata sidecar. Pixel size comes from here, never from image
/// headers: SEM exports vary too much to trust them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub condition: Condition,
    pub pixel_size_um: f64,
    /// Open key→value map of instrument fields (beam current, voltage, ...).
    #[serde(default)]
    pub instrument: BTreeMap<String, serde_json::Value>,
}

impl ImageMeta {
    pub fn validate(&self) -> Result<(), RasterError> {
        if self.pixel_size_um <= 0.0 || self.pixel_size_um.is_nan() {
            return Err(RasterError::NonPositivePixelSize {
                pixel_size: self.pixel_size_um,
            });
        }
        Ok(())
    }
}

/// Z-scores numeric metadata fields across a set of images and dummy-codes
/// categorical ones. Provided as a data utility only.
pub fn normalize_instrument_fields(
    metas: &[ImageMeta],
) -> BTreeMap<String, Vec<f64>> {
    let mut keys: Vec<&String> = Vec::new();
    for m in metas {
        for k in m.instrument.keys() {
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    keys.sort();

    let mut out = BTreeMap::new();
    for key in keys {
        let numeric: Vec<Option<f64>> = metas
            .iter()
            .map(|m| m.instrument.get(key).and_then(|v| v.as_f64()))
            .collect();
        if numeric.iter().all(|v| v.is_some()) {
            // z-score
            let vals: Vec<f64> = numeric.into_iter().map(|v| v.unwrap()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            let sd = var.sqrt();
            let z: Vec<f64> = vals
                .iter()
                .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
                .collect();
            out.insert(key.clone(), z);
        } else {
            // dummy-code each observed categorical value
            let mut values: Vec<String> = metas
                .iter()
                .filter_map(|m| m.instrument.get(key))
                .map(|v| v.to_string())
                .collect();
            values.sort();
            values.dedup();
            for val in values {
                let col: Vec<f64> = metas
                    .iter()
                    .map(|m| {
                        m.instrument
                            .get(key)
                            .map(|v| (*v == val) as u8 as f64)
                            .unwrap_or(0.0)
                    })
                    .collect();
                out.insert(format!("{key}={val}"), col);
            }
        }
    }
    out
}
