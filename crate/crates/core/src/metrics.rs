//! Confusion-matrix metrics: per-class precision and recall, the custom F_D
//! score (F_0.5 for grain, F_2 for everything else, divided by the fixed
//! class count), pixel-level IoU, prevalence-weighted variants, the overall
//! score, and cross-image averaging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ClassId, LabelMap, NUM_CLASSES};
use crate::stats::mean_defined;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("rasters differ in size: {w1}x{h1} vs {w2}x{h2}")]
    DimensionMismatch { w1: u32, h1: u32, w2: u32, h2: u32 },
    #[error("beta must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("no records to average")]
    EmptyInput,
}

/// F-score β exponent for a class: 0.5 for grain (precision-weighted), 2 for
/// every other class (recall-weighted).
pub fn beta_for(class: ClassId) -> f64 {
    if class == ClassId::Grain {
        0.5
    } else {
        2.0
    }
}

/// 5×5 pixel confusion matrix; `counts[i][j]` is the number of pixels of
/// true class `i` predicted as class `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> ConfusionMatrix {
        ConfusionMatrix::default()
    }

    pub fn record(&mut self, truth: ClassId, pred: ClassId) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Pixels of true class `i` (any prediction).
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Pixels predicted as class `i` (any truth).
    pub fn col_sum(&self, i: usize) -> u64 {
        self.counts.iter().map(|row| row[i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

/// Tallies the confusion matrix of a prediction against truth.
pub fn confusion(truth: &LabelMap, pred: &LabelMap) -> Result<ConfusionMatrix, MetricsError> {
    if !truth.same_dimensions(pred) {
        return Err(MetricsError::DimensionMismatch {
            w1: truth.width(),
            h1: truth.height(),
            w2: pred.width(),
            h2: pred.height(),
        });
    }
    let mut cm = ConfusionMatrix::new();
    for (&t, &p) in truth.pixels().iter().zip(pred.pixels()) {
        cm.record(t, p);
    }
    Ok(cm)
}

/// Per-class (precision, recall); a 0/0 cell is `None` (undefined), not an
/// error.
pub fn precision_recall(cm: &ConfusionMatrix) -> [(Option<f64>, Option<f64>); NUM_CLASSES] {
    let mut out = [(None, None); NUM_CLASSES];
    for (i, slot) in out.iter_mut().enumerate() {
        let diag = cm.counts[i][i];
        let col = cm.col_sum(i);
        let row = cm.row_sum(i);
        let precision = (col > 0).then(|| diag as f64 / col as f64);
        let recall = (row > 0).then(|| diag as f64 / row as f64);
        *slot = (precision, recall);
    }
    out
}

/// F_β of a precision/recall pair; p = r = 0 yields 0.
pub fn f_beta(p: f64, r: f64, beta: f64) -> Result<f64, MetricsError> {
    if beta < 0.0 {
        return Err(MetricsError::NegativeBeta(beta));
    }
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + b2) * p * r / denom)
}

/// Per-class F-score under the class's β schedule. A class with no correct
/// pixels scores 0, which also covers the undefined precision/recall cases.
fn f_score_class(cm: &ConfusionMatrix, i: usize) -> f64 {
    let diag = cm.counts[i][i];
    if diag == 0 {
        return 0.0;
    }
    let p = diag as f64 / cm.col_sum(i) as f64;
    let r = diag as f64 / cm.row_sum(i) as f64;
    let beta = beta_for(ClassId::from_index(i).unwrap());
    f_beta(p, r, beta).expect("beta schedule is non-negative")
}

/// The custom F_D score: (F_0.5 of grain + Σ F_2 of the others) divided by
/// the fixed class count. Classes absent from both truth and prediction
/// contribute 0 — the denominator stays 5.
pub fn f_d(cm: &ConfusionMatrix) -> f64 {
    let sum: f64 = (0..NUM_CLASSES).map(|i| f_score_class(cm, i)).sum();
    sum / NUM_CLASSES as f64
}

/// Macro pixel IoU: mean over classes of n_ii / (row_i + col_i − n_ii).
/// Classes absent from both truth and prediction are excluded from the mean.
pub fn iou_pixel(cm: &ConfusionMatrix) -> Option<f64> {
    let per_class = iou_per_class(cm);
    let (mean, _) = mean_defined(&per_class);
    mean
}

/// Per-class pixel IoU; `None` where truth and prediction are both empty.
pub fn iou_per_class(cm: &ConfusionMatrix) -> [Option<f64>; NUM_CLASSES] {
    let mut out = [None; NUM_CLASSES];
    for (i, slot) in out.iter_mut().enumerate() {
        let diag = cm.counts[i][i];
        let union = cm.row_sum(i) + cm.col_sum(i) - diag;
        *slot = (union > 0).then(|| diag as f64 / union as f64);
    }
    out
}

/// Metrics weighted by truth-class prevalence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_d: f64,
    pub iou: f64,
}

/// Combines per-class values with weights equal to the truth-class pixel
/// proportions. Undefined per-class values carry weight but contribute 0.
pub fn weighted_metrics(cm: &ConfusionMatrix) -> WeightedMetrics {
    let total = cm.total() as f64;
    let pr = precision_recall(cm);
    let ious = iou_per_class(cm);
    let mut out = WeightedMetrics {
        precision: 0.0,
        recall: 0.0,
        f_d: 0.0,
        iou: 0.0,
    };
    for i in 0..NUM_CLASSES {
        let w = cm.row_sum(i) as f64 / total;
        if w == 0.0 {
            continue;
        }
        out.precision += w * pr[i].0.unwrap_or(0.0);
        out.recall += w * pr[i].1.unwrap_or(0.0);
        out.f_d += w * f_score_class(cm, i);
        out.iou += w * ious[i].unwrap_or(0.0);
    }
    out
}

/// One class's slot in a [`ClassMetrics`] record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: ClassId,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// β used for this class's F-score.
    pub beta: f64,
    pub f_score: f64,
    pub iou: Option<f64>,
}

/// Full pixel-metric record for one truth/prediction pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassMetric>,
    /// Unweighted mean over classes where the value is defined.
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub f_d: f64,
    pub iou: Option<f64>,
    pub weighted: WeightedMetrics,
}

impl ClassMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> ClassMetrics {
        let pr = precision_recall(cm);
        let ious = iou_per_class(cm);
        let per_class: Vec<ClassMetric> = ClassId::ALL
            .iter()
            .map(|&class| {
                let i = class.index();
                ClassMetric {
                    class,
                    precision: pr[i].0,
                    recall: pr[i].1,
                    beta: beta_for(class),
                    f_score: f_score_class(cm, i),
                    iou: ious[i],
                }
            })
            .collect();
        let (macro_precision, _) = mean_defined(&pr.map(|(p, _)| p));
        let (macro_recall, _) = mean_defined(&pr.map(|(_, r)| r));
        ClassMetrics {
            per_class,
            macro_precision,
            macro_recall,
            f_d: f_d(cm),
            iou: iou_pixel(cm),
            weighted: weighted_metrics(cm),
        }
    }
}

/// Overall score: plain mean of F_D, pixel IoU, and the average Box IoU.
pub fn overall_score(f_d: f64, iou: f64, box_avg: f64) -> f64 {
    (f_d + iou + box_avg) / 3.0
}

/// Unweighted per-metric mean across images. Each record is a slice of
/// optional metric values in a caller-fixed order; undefined values are
/// skipped, with the skip count reported per metric.
pub fn average_across_images(
    records: &[Vec<Option<f64>>],
) -> Result<Vec<(Option<f64>, usize)>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let width = records.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(width);
    for m in 0..width {
        let column: Vec<Option<f64>> = records
            .iter()
            .map(|r| r.get(m).copied().flatten())
            .collect();
        out.push(mean_defined(&column));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::LabelMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm_from(counts: [[u64; 5]; 5]) -> ConfusionMatrix {
        ConfusionMatrix { counts }
    }

    fn random_map(rng: &mut ChaCha8Rng, w: u32, h: u32) -> LabelMap {
        let pixels = (0..(w * h) as usize)
            .map(|_| ClassId::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap())
            .collect();
        LabelMap::new(w, h, pixels, 0.1).unwrap()
    }

    #[test]
    fn confusion_identity_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = random_map(&mut rng, 12, 9);
        let cm = confusion(&map, &map).unwrap();
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                if i != j {
                    assert_eq!(cm.counts[i][j], 0);
                }
            }
        }
        assert_eq!(cm.total(), 12 * 9);
    }

    #[test]
    fn confusion_all_grain_vs_all_boundary() {
        let truth = LabelMap::filled(4, 4, ClassId::Grain, 0.1).unwrap();
        let pred = LabelMap::filled(4, 4, ClassId::Boundary, 0.1).unwrap();
        let cm = confusion(&truth, &pred).unwrap();
        assert_eq!(cm.counts[0][1], 16);
        assert_eq!(cm.total(), 16);
    }

    #[test]
    fn confusion_matches_naive_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = random_map(&mut rng, 17, 11);
        let pred = random_map(&mut rng, 17, 11);
        let cm = confusion(&truth, &pred).unwrap();
        // independent double loop
        let mut naive = [[0u64; 5]; 5];
        for y in 0..11 {
            for x in 0..17 {
                naive[truth.get(x, y).index()][pred.get(x, y).index()] += 1;
            }
        }
        assert_eq!(cm.counts, naive);
    }

    #[test]
    fn confusion_rejects_dimension_mismatch() {
        let a = LabelMap::filled(4, 4, ClassId::Grain, 0.1).unwrap();
        let b = LabelMap::filled(4, 5, ClassId::Grain, 0.1).unwrap();
        assert!(matches!(
            confusion(&a, &b),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn precision_recall_hand_tally() {
        let mut counts = [[0u64; 5]; 5];
        counts[0][0] = 8;
        counts[1][0] = 2;
        let cm = cm_from(counts);
        let pr = precision_recall(&cm);
        assert_eq!(pr[0].0, Some(0.8));
        assert_eq!(pr[0].1, Some(1.0));
        assert_eq!(pr[1].1, Some(0.0)); // 0 of 2 boundary pixels recovered
        assert_eq!(pr[1].0, None); // nothing predicted boundary
        assert_eq!(pr[2], (None, None)); // absent in truth and prediction
    }

    #[test]
    fn precision_recall_diagonal_is_perfect() {
        let mut counts = [[0u64; 5]; 5];
        for (i, row) in counts.iter_mut().enumerate() {
            row[i] = (i as u64 + 1) * 3;
        }
        let pr = precision_recall(&cm_from(counts));
        for (p, r) in pr {
            assert_eq!(p, Some(1.0));
            assert_eq!(r, Some(1.0));
        }
    }

    #[test]
    fn f_beta_identities() {
        for beta in [0.5, 1.0, 2.0] {
            for x in [0.0, 0.3, 1.0] {
                assert!((f_beta(x, x, beta).unwrap() - x).abs() < 1e-12);
            }
        }
        assert_eq!(f_beta(1.0, 0.0, 2.0).unwrap(), 0.0);
        let v = f_beta(0.8, 0.4, 2.0).unwrap();
        assert!((v - 5.0 * 0.32 / 3.6).abs() < 1e-12);
        assert!(f_beta(0.5, 0.5, -1.0).is_err());
    }

    #[test]
    fn f_d_perfect_and_uniform() {
        let mut counts = [[0u64; 5]; 5];
        for (i, row) in counts.iter_mut().enumerate() {
            row[i] = 10;
        }
        assert!((f_d(&cm_from(counts)) - 1.0).abs() < 1e-12);

        // every class with p = r = 0.5: F_β(x, x) = x for any β
        let mut counts = [[0u64; 5]; 5];
        for i in 0..5 {
            counts[i][i] = 5;
            counts[i][(i + 1) % 5] = 5;
        }
        assert!((f_d(&cm_from(counts)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f_d_three_class_spreadsheet() {
        // grain: p=20/25, r=20/30; void: p=8/18, r=8/10; impurity: p=2/2, r=2/5
        let mut counts = [[0u64; 5]; 5];
        counts[0][0] = 20;
        counts[0][2] = 10;
        counts[2][2] = 8;
        counts[2][0] = 2;
        counts[3][3] = 2;
        counts[3][0] = 3;
        let cm = cm_from(counts);
        // hand evaluation of the formula per class
        let f_grain = 1.25 * 0.8 * (20.0 / 30.0) / (0.25 * 0.8 + 20.0 / 30.0);
        let f_void = 5.0 * (8.0 / 10.0) * (8.0 / 18.0) / (4.0 * (8.0 / 18.0) + 8.0 / 10.0);
        let f_imp = 5.0 * 1.0 * 0.4 / (4.0 * 1.0 + 0.4);
        let want = (f_grain + f_void + f_imp) / 5.0;
        assert!((f_d(&cm) - want).abs() < 1e-12);
    }

    #[test]
    fn iou_perfect_and_total_miss() {
        let mut counts = [[0u64; 5]; 5];
        for (i, row) in counts.iter_mut().enumerate() {
            row[i] = 7;
        }
        assert!((iou_pixel(&cm_from(counts)).unwrap() - 1.0).abs() < 1e-12);

        let mut counts = [[0u64; 5]; 5];
        counts[0][1] = 16;
        assert_eq!(iou_pixel(&cm_from(counts)), Some(0.0));
    }

    #[test]
    fn iou_matches_pixel_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = random_map(&mut rng, 23, 13);
        let pred = random_map(&mut rng, 23, 13);
        let cm = confusion(&truth, &pred).unwrap();
        let ious = iou_per_class(&cm);
        for class in ClassId::ALL {
            // set-based |∩| / |∪| per class
            let mut inter = 0u64;
            let mut union = 0u64;
            for (t, p) in truth.pixels().iter().zip(pred.pixels()) {
                let in_t = *t == class;
                let in_p = *p == class;
                inter += (in_t && in_p) as u64;
                union += (in_t || in_p) as u64;
            }
            match ious[class.index()] {
                Some(v) => assert!((v - inter as f64 / union as f64).abs() < 1e-12),
                None => assert_eq!(union, 0),
            }
        }
    }

    #[test]
    fn weighted_metrics_cases() {
        // single-class image: weighted equals that class's metric
        let mut counts = [[0u64; 5]; 5];
        counts[0][0] = 9;
        counts[0][1] = 1;
        let w = weighted_metrics(&cm_from(counts));
        assert!((w.recall - 0.9).abs() < 1e-12);

        // perfect prediction
        let mut counts = [[0u64; 5]; 5];
        for (i, row) in counts.iter_mut().enumerate() {
            row[i] = 4;
        }
        let w = weighted_metrics(&cm_from(counts));
        assert!((w.precision - 1.0).abs() < 1e-12);
        assert!((w.f_d - 1.0).abs() < 1e-12);
        assert!((w.iou - 1.0).abs() < 1e-12);

        // 90% grain perfect, defects predicted entirely wrong
        let mut counts = [[0u64; 5]; 5];
        counts[0][0] = 90;
        counts[2][1] = 10; // voids called boundary
        let w = weighted_metrics(&cm_from(counts));
        assert!((w.precision - 0.9).abs() < 1e-12);
    }

    #[test]
    fn overall_score_reference_rows() {
        assert!((overall_score(0.861, 0.751, 0.603) - 0.738).abs() < 5e-4);
        assert!((overall_score(0.869, 0.731, 0.581) - 0.727).abs() < 5e-4);
        assert_eq!(overall_score(0.0, 0.0, 0.0), 0.0);
        // permutation invariance
        assert_eq!(
            overall_score(0.1, 0.5, 0.9),
            overall_score(0.9, 0.1, 0.5)
        );
    }

    #[test]
    fn average_across_images_basics() {
        let one = vec![vec![Some(0.6), None]];
        let avg = average_across_images(&one).unwrap();
        assert_eq!(avg[0], (Some(0.6), 0));
        assert_eq!(avg[1], (None, 1));

        let two = vec![vec![Some(0.6)], vec![Some(0.8)]];
        let avg = average_across_images(&two).unwrap();
        assert!((avg[0].0.unwrap() - 0.7).abs() < 1e-12);

        assert!(average_across_images(&[]).is_err());
    }

    #[test]
    fn average_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let records: Vec<Vec<Option<f64>>> = (0..7)
            .map(|_| (0..4).map(|_| Some(rng.gen_range(0.0..1.0))).collect())
            .collect();
        let avg = average_across_images(&records).unwrap();
        for m in 0..4 {
            let naive: f64 = records.iter().map(|r| r[m].unwrap()).sum::<f64>() / 7.0;
            assert!((avg[m].0.unwrap() - naive).abs() < 1e-12);
        }
    }
}
