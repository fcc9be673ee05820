//! Density-ratio confidence calibration over model trials.
//!
//! From validation data, two kNN density models are fit per predicted
//! class: one over the score vectors of correctly predicted pixels, one
//! over all pixels predicted as that class. A test pixel's confidence is
//! the correct-fraction prior times the ratio of the two densities at its
//! score vector, clipped to [0, 1]. Per-trial confidences combine by
//! geometric mean; per-trial labels combine by majority vote.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kdtree::KdTree;
use crate::metrics::{beta_for, f_beta};
use crate::raster::{ClassId, LabelMap, ScoreStack, NUM_CLASSES};
use crate::stats::mean_defined;

/// Default neighbor count for the density estimator.
pub const DEFAULT_K: usize = 10;

/// Fallback cap radius when the stored samples offer no positive pairwise
/// distance to substitute for a degenerate zero radius.
const FALLBACK_CAP_RADIUS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("scores are {sw}x{sh}, truth map is {tw}x{th}")]
    DimensionMismatch { sw: u32, sh: u32, tw: u32, th: u32 },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("k must be at least 1")]
    BadK,
    #[error("density component has no samples")]
    EmptyComponent,
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("no trial confidences to aggregate")]
    EmptyTrials,
    #[error("confidence map holds {got} values, expected {expected}")]
    ConfidenceLengthMismatch { expected: usize, got: usize },
    #[error("bad magic: not a calibration model file")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Volume of the d-dimensional unit ball.
fn unit_ball_volume(d: usize) -> f64 {
    // Γ(d/2 + 1) by the recurrence, exact for integer and half-integer args
    let mut gamma = if d.is_multiple_of(2) { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut x = if d.is_multiple_of(2) { 1.0 } else { 0.5 };
    while (x - (d as f64 / 2.0 + 1.0)).abs() > 1e-9 {
        gamma *= x;
        x += 1.0;
    }
    std::f64::consts::PI.powf(d as f64 / 2.0) / gamma
}

/// One density model: a kNN estimator over stored feature vectors.
#[derive(Debug, Clone)]
pub struct DensityComponent {
    tree: KdTree,
    dims: usize,
}

impl DensityComponent {
    pub fn from_features(dims: usize, features: &[f64]) -> DensityComponent {
        DensityComponent { tree: KdTree::build(dims, features), dims }
    }

    pub fn len(&self) -> u64 {
        self.tree.total_weight()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn min_positive_pair_distance(&self) -> Option<f64> {
        self.tree.min_positive_pair_distance()
    }
}

/// kNN density estimate at `x`: m / (n · V_d(r)), where r is the k-th
/// smallest distinct distance to the stored samples and m the sample weight
/// within r. A zero radius (all relevant samples coincide with the query)
/// is substituted by `cap_radius`.
pub fn knn_density(
    component: &DensityComponent,
    x: &[f64],
    k: usize,
    cap_radius: f64,
) -> Result<f64, CalibrateError> {
    if component.is_empty() {
        return Err(CalibrateError::EmptyComponent);
    }
    if k == 0 {
        return Err(CalibrateError::BadK);
    }
    let knn = component
        .tree
        .query_distinct(x, k)
        .ok_or(CalibrateError::EmptyComponent)?;
    let r = if knn.radius > 0.0 { knn.radius } else { cap_radius };
    let volume = unit_ball_volume(component.dims) * r.powi(component.dims as i32);
    Ok(knn.weight_within as f64 / (component.tree.total_weight() as f64 * volume))
}

/// Per-class calibration state.
#[derive(Debug, Clone)]
pub struct ClassCalibration {
    pub n_correct: u64,
    pub n_all: u64,
    /// Raw feature vectors kept for serialization.
    correct_features: Vec<f32>,
    all_features: Vec<f32>,
    correct: Option<DensityComponent>,
    all: Option<DensityComponent>,
}

impl ClassCalibration {
    fn empty() -> ClassCalibration {
        ClassCalibration {
            n_correct: 0,
            n_all: 0,
            correct_features: Vec::new(),
            all_features: Vec::new(),
            correct: None,
            all: None,
        }
    }
}

/// Fitted density-ratio calibration model.
#[derive(Debug, Clone)]
pub struct CalibrationModel {
    pub k: usize,
    /// Substitute radius for degenerate zero-radius queries.
    pub cap_radius: f64,
    /// Feature definition: the full per-pixel score vector.
    pub feature_dim: usize,
    pub classes: Vec<ClassCalibration>,
}

/// Confidence of one pixel hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confidence {
    pub value: f64,
    /// False when the class was seen fewer than k times in validation, so
    /// no density ratio is available and the value defaults to 0.
    pub calibratable: bool,
}

fn to_f64(features: &[f32]) -> Vec<f64> {
    features.iter().map(|&v| v as f64).collect()
}

/// Fits the calibration model: every (trial, pixel) of the validation stack
/// contributes its 5-dimensional score vector to the "all" component of its
/// predicted (argmax) class, and to the "correct" component as well when
/// the prediction matches truth.
pub fn fit_calibration(
    val_scores: &ScoreStack,
    val_truth: &LabelMap,
    k: usize,
) -> Result<CalibrationModel, CalibrateError> {
    if k == 0 {
        return Err(CalibrateError::BadK);
    }
    if val_scores.width() != val_truth.width() || val_scores.height() != val_truth.height() {
        return Err(CalibrateError::DimensionMismatch {
            sw: val_scores.width(),
            sh: val_scores.height(),
            tw: val_truth.width(),
            th: val_truth.height(),
        });
    }
    let mut classes: Vec<ClassCalibration> =
        (0..NUM_CLASSES).map(|_| ClassCalibration::empty()).collect();
    for t in 0..val_scores.trials() {
        for y in 0..val_scores.height() {
            for x in 0..val_scores.width() {
                let feats = val_scores.score_vector(t, y, x);
                let pred = val_scores.argmax(t, y, x);
                let slot = &mut classes[pred.index()];
                slot.all_features.extend_from_slice(&feats);
                slot.n_all += 1;
                if pred == val_truth.get(x, y) {
                    slot.correct_features.extend_from_slice(&feats);
                    slot.n_correct += 1;
                }
            }
        }
    }
    if classes.iter().all(|c| c.n_all == 0) {
        return Err(CalibrateError::EmptyValidation);
    }
    build_components(&mut classes, k);
    let cap_radius = compute_cap(&classes);
    Ok(CalibrationModel { k, cap_radius, feature_dim: NUM_CLASSES, classes })
}

fn build_components(classes: &mut [ClassCalibration], k: usize) {
    for slot in classes.iter_mut() {
        if slot.n_all as usize >= k {
            slot.all = Some(DensityComponent::from_features(
                NUM_CLASSES,
                &to_f64(&slot.all_features),
            ));
            if slot.n_correct > 0 {
                slot.correct = Some(DensityComponent::from_features(
                    NUM_CLASSES,
                    &to_f64(&slot.correct_features),
                ));
            }
        }
    }
}

/// Smallest positive pairwise distance among all stored samples; recorded
/// in the model as the degenerate-radius substitute.
fn compute_cap(classes: &[ClassCalibration]) -> f64 {
    let mut cap = f64::INFINITY;
    for slot in classes {
        for component in [&slot.all, &slot.correct].into_iter().flatten() {
            if let Some(d) = component.min_positive_pair_distance() {
                cap = cap.min(d);
            }
        }
    }
    if cap.is_finite() {
        cap
    } else {
        FALLBACK_CAP_RADIUS
    }
}

/// Confidence of predicting `class` at score vector `x`:
/// (n_correct/n_all) · ρ_correct(x) / ρ_all(x), clipped to [0, 1].
pub fn confidence(model: &CalibrationModel, x: &[f64], class: ClassId) -> Confidence {
    let slot = &model.classes[class.index()];
    let Some(all) = &slot.all else {
        return Confidence { value: 0.0, calibratable: false };
    };
    if slot.n_correct == 0 {
        return Confidence { value: 0.0, calibratable: true };
    }
    let correct = slot.correct.as_ref().expect("built when n_correct > 0");
    // a class with fewer correct samples than k degrades to the largest
    // supported neighbor count on the correct side
    let k_correct = model.k.min(slot.n_correct as usize);
    let rho_all = knn_density(all, x, model.k, model.cap_radius)
        .expect("component verified non-empty");
    let rho_correct = knn_density(correct, x, k_correct, model.cap_radius)
        .expect("component verified non-empty");
    let prior = slot.n_correct as f64 / slot.n_all as f64;
    let value = (prior * rho_correct / rho_all).clamp(0.0, 1.0);
    Confidence { value, calibratable: true }
}

/// Geometric mean of per-trial confidences: (Π c)^(1/T).
pub fn aggregate_trials_geomean(confidences: &[f64]) -> Result<f64, CalibrateError> {
    if confidences.is_empty() {
        return Err(CalibrateError::EmptyTrials);
    }
    if confidences.contains(&0.0) {
        return Ok(0.0);
    }
    let log_mean =
        confidences.iter().map(|c| c.ln()).sum::<f64>() / confidences.len() as f64;
    Ok(log_mean.exp())
}

/// Majority-vote label map: per pixel, the class most frequently predicted
/// across trials; ties break to the higher mean score, then the lower
/// class index.
pub fn majority_vote(stack: &ScoreStack, pixel_size: f64) -> LabelMap {
    let mut pixels = Vec::with_capacity((stack.width() * stack.height()) as usize);
    for y in 0..stack.height() {
        for x in 0..stack.width() {
            let mut votes = [0u32; NUM_CLASSES];
            let mut mean_scores = [0f64; NUM_CLASSES];
            for t in 0..stack.trials() {
                votes[stack.argmax(t, y, x).index()] += 1;
                let v = stack.score_vector(t, y, x);
                for c in 0..NUM_CLASSES {
                    mean_scores[c] += v[c] as f64;
                }
            }
            let mut best = 0usize;
            for c in 1..NUM_CLASSES {
                let better = votes[c] > votes[best]
                    || (votes[c] == votes[best] && mean_scores[c] > mean_scores[best]);
                if better {
                    best = c;
                }
            }
            pixels.push(ClassId::from_index(best).unwrap());
        }
    }
    LabelMap::new(stack.width(), stack.height(), pixels, pixel_size)
        .expect("stack dimensions are non-empty")
}

/// Calibrated prediction of a test stack.
#[derive(Debug, Clone)]
pub struct CalibratedResult {
    pub predicted: LabelMap,
    /// Row-major per-pixel confidence, finite and clipped to [0, 1].
    pub confidence: Vec<f64>,
    pub trials_used: u32,
}

/// Runs the full calibrated inference: majority-vote labels plus per-pixel
/// geometric-mean confidence over each trial's own hypothesis.
pub fn apply_calibration(
    model: &CalibrationModel,
    stack: &ScoreStack,
    pixel_size: f64,
) -> CalibratedResult {
    let predicted = majority_vote(stack, pixel_size);
    let mut confidence_map =
        Vec::with_capacity((stack.width() * stack.height()) as usize);
    let mut per_trial = Vec::with_capacity(stack.trials() as usize);
    for y in 0..stack.height() {
        for x in 0..stack.width() {
            per_trial.clear();
            for t in 0..stack.trials() {
                let feats = to_f64(&stack.score_vector(t, y, x));
                let pred = stack.argmax(t, y, x);
                per_trial.push(confidence(model, &feats, pred).value);
            }
            let combined =
                aggregate_trials_geomean(&per_trial).expect("trials >= 1 by construction");
            confidence_map.push(combined.clamp(0.0, 1.0));
        }
    }
    CalibratedResult { predicted, confidence: confidence_map, trials_used: stack.trials() }
}

/// Pixel metrics over confidence-thresholded predictions. Precision counts
/// only retained pixels; recall counts excluded pixels as missed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdedMetrics {
    pub tau: f64,
    pub retained: u64,
    pub total: u64,
    pub per_class_precision: Vec<Option<f64>>,
    pub per_class_recall: Vec<Option<f64>>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub f_d: f64,
    pub iou: Option<f64>,
}

/// Excludes pixels with confidence < τ from the confusion matrix, keeping
/// recall denominators at the full truth counts.
pub fn thresholded_metrics(
    pred: &LabelMap,
    confidence_map: &[f64],
    truth: &LabelMap,
    tau: f64,
) -> Result<ThresholdedMetrics, CalibrateError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CalibrateError::BadThreshold(tau));
    }
    if !pred.same_dimensions(truth) {
        return Err(CalibrateError::DimensionMismatch {
            sw: pred.width(),
            sh: pred.height(),
            tw: truth.width(),
            th: truth.height(),
        });
    }
    let n_pixels = pred.pixels().len();
    if confidence_map.len() != n_pixels {
        return Err(CalibrateError::ConfidenceLengthMismatch {
            expected: n_pixels,
            got: confidence_map.len(),
        });
    }

    let mut retained_cm = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut truth_totals = [0u64; NUM_CLASSES];
    let mut retained = 0u64;
    for (i, ((&t, &p), &c)) in truth
        .pixels()
        .iter()
        .zip(pred.pixels())
        .zip(confidence_map)
        .enumerate()
    {
        let _ = i;
        truth_totals[t.index()] += 1;
        if c >= tau {
            retained_cm[t.index()][p.index()] += 1;
            retained += 1;
        }
    }

    let mut per_class_precision = Vec::with_capacity(NUM_CLASSES);
    let mut per_class_recall = Vec::with_capacity(NUM_CLASSES);
    let mut f_sum = 0.0;
    let mut ious: Vec<Option<f64>> = Vec::with_capacity(NUM_CLASSES);
    for i in 0..NUM_CLASSES {
        let diag = retained_cm[i][i];
        let col: u64 = (0..NUM_CLASSES).map(|r| retained_cm[r][i]).sum();
        let truth_n = truth_totals[i];
        let precision = (col > 0).then(|| diag as f64 / col as f64);
        let recall = (truth_n > 0).then(|| diag as f64 / truth_n as f64);
        per_class_precision.push(precision);
        per_class_recall.push(recall);
        if diag > 0 {
            let beta = beta_for(ClassId::from_index(i).unwrap());
            f_sum += f_beta(precision.unwrap_or(0.0), recall.unwrap_or(0.0), beta)
                .expect("beta schedule is non-negative");
        }
        let union = truth_n + col - diag;
        ious.push((union > 0).then(|| diag as f64 / union as f64));
    }
    Ok(ThresholdedMetrics {
        tau,
        retained,
        total: n_pixels as u64,
        macro_precision: mean_defined(&per_class_precision).0,
        macro_recall: mean_defined(&per_class_recall).0,
        f_d: f_sum / NUM_CLASSES as f64,
        iou: mean_defined(&ious).0,
        per_class_precision,
        per_class_recall,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"MQCL";
const MODEL_VERSION: u32 = 1;

/// Serializes a model: header, k, cap radius, feature dimension, then per
/// class the correct/all sample counts and raw feature arrays.
pub fn save_model(model: &CalibrationModel, path: &Path) -> Result<(), CalibrateError> {
    let file = fs::File::create(path).map_err(|e| CalibrateError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CalibrateError::Io {
        path: path.display().to_string(),
        source: e,
    };
    w.write_all(MODEL_MAGIC).map_err(io_err)?;
    w.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(model.k as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&model.cap_radius.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(model.feature_dim as u32).to_le_bytes())
        .map_err(io_err)?;
    for slot in &model.classes {
        w.write_all(&slot.n_correct.to_le_bytes()).map_err(io_err)?;
        w.write_all(&slot.n_all.to_le_bytes()).map_err(io_err)?;
        for v in slot.correct_features.iter().chain(&slot.all_features) {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Loads a model and rebuilds its density structures.
pub fn load_model(path: &Path) -> Result<CalibrationModel, CalibrateError> {
    let file = fs::File::open(path).map_err(|e| CalibrateError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_or_truncated(&mut r, &mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(CalibrateError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(CalibrateError::UnsupportedVersion(version));
    }
    let k = read_u32(&mut r)? as usize;
    let mut cap_bytes = [0u8; 8];
    read_or_truncated(&mut r, &mut cap_bytes)?;
    let cap_radius = f64::from_le_bytes(cap_bytes);
    let feature_dim = read_u32(&mut r)? as usize;

    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for _ in 0..NUM_CLASSES {
        let n_correct = read_u64(&mut r)?;
        let n_all = read_u64(&mut r)?;
        let n_floats = (n_correct + n_all) as usize * feature_dim;
        let mut payload = vec![0u8; n_floats * 4];
        read_or_truncated(&mut r, &mut payload)?;
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let split = n_correct as usize * feature_dim;
        classes.push(ClassCalibration {
            n_correct,
            n_all,
            correct_features: floats[..split].to_vec(),
            all_features: floats[split..].to_vec(),
            correct: None,
            all: None,
        });
    }
    build_components(&mut classes, k);
    Ok(CalibrationModel { k, cap_radius, feature_dim, classes })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CalibrateError> {
    let mut buf = [0u8; 4];
    read_or_truncated(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CalibrateError> {
    let mut buf = [0u8; 8];
    read_or_truncated(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CalibrateError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CalibrateError::Truncated
        } else {
            CalibrateError::Io { path: String::new(), source: e }
        }
    })
}
