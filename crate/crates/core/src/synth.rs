//! Synthetic data generators: labeled micrograph scenes with a perturbed
//! "prediction" counterpart, and the atom-mixture score benchmark used to
//! validate the calibration pipeline against known regional accuracies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{
    ClassId, Condition, ImageMeta, LabelMap, Micrograph, ScoreStack, NUM_CLASSES,
};

/// Parameters of a synthetic labeled scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub pixel_size_um: f64,
    pub n_boundary_lines: usize,
    /// Defect blob counts per class (void, impurity, precipitate).
    pub n_defects: [usize; 3],
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            width: 256,
            height: 256,
            pixel_size_um: 0.05,
            n_boundary_lines: 4,
            n_defects: [40, 10, 30],
            seed: 0,
        }
    }
}

fn draw_thick_line(map: &mut LabelMap, a: (f64, f64), b: (f64, f64), class: ClassId) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let px = x.round() as i64 + dx;
                let py = y.round() as i64 + dy;
                if px >= 0 && py >= 0 && (px as u32) < map.width() && (py as u32) < map.height() {
                    map.set(px as u32, py as u32, class);
                }
            }
        }
    }
}

fn stamp_disc(map: &mut LabelMap, cx: i64, cy: i64, radius: i64, class: ClassId) {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy > radius * radius {
                continue;
            }
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && (px as u32) < map.width() && (py as u32) < map.height() {
                map.set(px as u32, py as u32, class);
            }
        }
    }
}

/// Generates a labeled scene: grain background, full-frame boundary lines,
/// and per-class defect blobs (precipitates and voids loosely co-clustered,
/// impurities scattered).
pub fn gen_scene(spec: &SceneSpec) -> (Micrograph, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels =
        LabelMap::filled(spec.width, spec.height, ClassId::Grain, spec.pixel_size_um)
            .expect("positive scene dimensions");
    let (w, h) = (spec.width as f64, spec.height as f64);

    for _ in 0..spec.n_boundary_lines {
        // a line through a random interior point at a random angle,
        // extended well past the frame
        let cx = rng.gen_range(0.2 * w..0.8 * w);
        let cy = rng.gen_range(0.2 * h..0.8 * h);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let (dx, dy) = (angle.cos(), angle.sin());
        let reach = w + h;
        draw_thick_line(
            &mut labels,
            (cx - reach * dx, cy - reach * dy),
            (cx + reach * dx, cy + reach * dy),
            ClassId::Boundary,
        );
    }

    // cluster anchor points shared by voids and precipitates
    let n_anchors = 6.max(spec.n_defects[0] / 8);
    let anchors: Vec<(f64, f64)> = (0..n_anchors)
        .map(|_| (rng.gen_range(0.0..w), rng.gen_range(0.0..h)))
        .collect();
    for (class_idx, &class) in ClassId::DEFECTS.iter().enumerate() {
        for _ in 0..spec.n_defects[class_idx] {
            let (cx, cy) = if class == ClassId::Impurity {
                (rng.gen_range(0.0..w), rng.gen_range(0.0..h))
            } else {
                let &(ax, ay) = &anchors[rng.gen_range(0..anchors.len())];
                (
                    (ax + rng.gen_range(-0.08 * w..0.08 * w)).clamp(0.0, w - 1.0),
                    (ay + rng.gen_range(-0.08 * h..0.08 * h)).clamp(0.0, h - 1.0),
                )
            };
            let radius = rng.gen_range(1..4i64);
            stamp_disc(&mut labels, cx as i64, cy as i64, radius, class);
        }
    }

    // grayscale rendering with per-class base intensity plus noise
    let mut image = Micrograph::filled(spec.width, spec.height, 0).expect("non-empty");
    for y in 0..spec.height {
        for x in 0..spec.width {
            let base: i32 = match labels.get(x, y) {
                ClassId::Grain => 150,
                ClassId::Boundary => 60,
                ClassId::Void => 20,
                ClassId::Impurity => 220,
                ClassId::Precipitate => 100,
            };
            let noisy = (base + rng.gen_range(-12..=12)).clamp(0, 255);
            image.set(x, y, noisy as u8);
        }
    }
    (image, labels)
}

/// Derives a plausible "prediction" from a truth map: boundary pixels
/// occasionally thinned to grain, defect blobs occasionally dropped or
/// grown by one pixel, and sparse salt noise added.
pub fn perturb_prediction(truth: &LabelMap, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = truth.clone();
    let (w, h) = (truth.width(), truth.height());

    // fragment boundaries
    for y in 0..h {
        for x in 0..w {
            if truth.get(x, y) == ClassId::Boundary && rng.gen_bool(0.12) {
                pred.set(x, y, ClassId::Grain);
            }
        }
    }

    // drop or grow whole defect clusters
    let cfg = crate::defect::AnalysisConfig::default();
    for class in ClassId::DEFECTS {
        let defects = crate::defect::cluster_defects(truth, class, &cfg)
            .expect("defect classes only");
        for d in defects {
            let roll: f64 = rng.gen();
            if roll < 0.08 {
                for &(x, y) in &d.pixels {
                    pred.set(x, y, ClassId::Grain);
                }
            } else if roll < 0.35 {
                // grow by one pixel to the right
                for &(x, y) in &d.pixels {
                    if x + 1 < w && truth.get(x + 1, y) == ClassId::Grain {
                        pred.set(x + 1, y, class);
                    }
                }
            }
        }
    }

    // sparse false positives
    let n_noise = ((w * h) as f64 * 0.0015) as usize;
    for _ in 0..n_noise {
        let x = rng.gen_range(0..w);
        let y = rng.gen_range(0..h);
        let class = ClassId::DEFECTS[rng.gen_range(0..3)];
        pred.set(x, y, class);
    }
    pred
}

/// A synthetic evaluation image: truth and prediction labels plus metadata.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub meta: ImageMeta,
    pub image: Micrograph,
    pub truth: LabelMap,
    pub pred: LabelMap,
}

/// Generates `count` scenes with alternating irradiation conditions and
/// deterministic per-image seeds derived from `seed`.
pub fn gen_dataset(count: usize, seed: u64) -> Vec<SynthImage> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec {
                seed: seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ..SceneSpec::default()
            };
            let (image, truth) = gen_scene(&spec);
            let pred = perturb_prediction(&truth, spec.seed ^ 0x5bd1_e995);
            let condition = if i % 3 == 2 {
                Condition::Unirradiated
            } else {
                Condition::Irradiated
            };
            let mut instrument = std::collections::BTreeMap::new();
            instrument.insert(
                "beam_current_pa".to_string(),
                serde_json::json!(140 + 12 * i as i64),
            );
            instrument.insert(
                "accelerating_voltage_kv".to_string(),
                serde_json::json!(5 + 5 * (i as i64 % 3)),
            );
            SynthImage {
                meta: ImageMeta {
                    image_id: format!("synth_{}", i + 1),
                    condition,
                    pixel_size_um: spec.pixel_size_um,
                    instrument,
                },
                image,
                truth,
                pred,
            }
        })
        .collect()
}

/// Atom of the calibration benchmark: a fixed score vector whose samples
/// are correct with a fixed probability.
struct Atom {
    scores: [f32; NUM_CLASSES],
    predicted: ClassId,
    accuracy: f64,
    region: u8,
}

/// Sizes and seed of the calibration benchmark.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkSpec {
    /// Validation raster (width, height); width·height samples (one trial).
    pub val_pixels: (u32, u32),
    pub test_pixels: (u32, u32),
    pub seed: u64,
}

/// A generated calibration benchmark with known per-region accuracies.
#[derive(Debug, Clone)]
pub struct CalibrationBenchmark {
    pub val_scores: ScoreStack,
    pub val_truth: LabelMap,
    pub test_scores: ScoreStack,
    pub test_truth: LabelMap,
    /// Region index of each test pixel, row-major.
    pub test_region: Vec<u8>,
    /// Expected prediction accuracy per region.
    pub region_levels: Vec<f64>,
}

/// Builds the benchmark's atom table: three regions of accuracy 0.6, 0.8,
/// and 0.95, the last split into two well-separated sub-clusters (0.92 and
/// 0.98) so its confidence distribution straddles the 0.95 threshold.
/// Atoms alternate between predicted classes 0 and 1 (a two-class problem);
/// each cluster holds 12 atoms per class so a 10-neighbor ball stays inside
/// the cluster.
fn benchmark_atoms() -> Vec<Atom> {
    // (region, accuracy, base score of the predicted class, anchor class)
    let clusters: [(u8, f64, f64, usize); 4] = [
        (0, 0.60, 0.50, 2),
        (1, 0.80, 0.50, 3),
        (2, 0.98, 0.90, 4),
        (2, 0.92, 0.70, 4),
    ];
    let mut atoms = Vec::new();
    for &(region, accuracy, s_base, anchor) in &clusters {
        for a in 0..24usize {
            let predicted = ClassId::from_index(a % 2).unwrap();
            let jitter = (a / 2) as f64; // 0..12 per class
            let s = s_base + 0.003 * jitter;
            let rem = 1.0 - s;
            let anchor_w = 0.80 + 0.005 * jitter;
            let spare = [2, 3, 4]
                .into_iter()
                .filter(|&c| c != anchor)
                .collect::<Vec<_>>();
            let mut scores = [0f64; NUM_CLASSES];
            scores[predicted.index()] = s;
            scores[anchor] = rem * anchor_w;
            scores[spare[0]] = rem * (1.0 - anchor_w) * 0.6;
            scores[spare[1]] = rem * (1.0 - anchor_w) * 0.4;
            // the non-predicted one of classes {0,1} stays at zero
            let scores_f32 = [
                scores[0] as f32,
                scores[1] as f32,
                scores[2] as f32,
                scores[3] as f32,
                scores[4] as f32,
            ];
            atoms.push(Atom { scores: scores_f32, predicted, accuracy, region });
        }
    }
    atoms
}

fn draw_stack(
    atoms: &[Atom],
    (w, h): (u32, u32),
    rng: &mut ChaCha8Rng,
) -> (ScoreStack, LabelMap, Vec<u8>) {
    let n = (w * h) as usize;
    let mut scores = vec![0f32; NUM_CLASSES * n];
    let mut truth_px = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for i in 0..n {
        let atom = &atoms[rng.gen_range(0..atoms.len())];
        for c in 0..NUM_CLASSES {
            scores[c * n + i] = atom.scores[c];
        }
        let correct = rng.gen_bool(atom.accuracy);
        let truth = if correct {
            atom.predicted
        } else {
            // flip within the two-class problem
            ClassId::from_index(1 - atom.predicted.index()).unwrap()
        };
        truth_px.push(truth);
        regions.push(atom.region);
    }
    let stack = ScoreStack::new(1, h, w, scores).expect("atom scores are normalized");
    let truth = LabelMap::new(w, h, truth_px, 0.1).expect("non-empty");
    (stack, truth, regions)
}

/// Generates the calibration benchmark: single-trial validation and test
/// stacks drawn i.i.d. from the atom mixture.
pub fn gen_calibration_benchmark(spec: &BenchmarkSpec) -> CalibrationBenchmark {
    let atoms = benchmark_atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (val_scores, val_truth, _) = draw_stack(&atoms, spec.val_pixels, &mut rng);
    let (test_scores, test_truth, test_region) = draw_stack(&atoms, spec.test_pixels, &mut rng);
    CalibrationBenchmark {
        val_scores,
        val_truth,
        test_scores,
        test_truth,
        test_region,
        region_levels: vec![0.60, 0.80, 0.95],
    }
}

/// Multi-trial variant: per trial, a pixel redraws its atom from the same
/// cluster (mimicking dropout jitter) while truth stays fixed.
pub fn gen_multitrial_stack(
    trials: u32,
    (w, h): (u32, u32),
    seed: u64,
) -> (ScoreStack, LabelMap) {
    let atoms = benchmark_atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (w * h) as usize;
    // fix each pixel's cluster (by atom index block) and truth
    let base: Vec<usize> = (0..n).map(|_| rng.gen_range(0..atoms.len())).collect();
    let truth_px: Vec<ClassId> = base
        .iter()
        .map(|&a| {
            if rng.gen_bool(atoms[a].accuracy) {
                atoms[a].predicted
            } else {
                ClassId::from_index(1 - atoms[a].predicted.index()).unwrap()
            }
        })
        .collect();
    let mut scores = vec![0f32; trials as usize * NUM_CLASSES * n];
    for t in 0..trials as usize {
        for (i, &a) in base.iter().enumerate() {
            // stay within the same cluster (blocks of 24) and class parity
            let block = (a / 24) * 24;
            let offset = (a % 24) % 2 + 2 * rng.gen_range(0..12);
            let atom = &atoms[block + offset];
            for c in 0..NUM_CLASSES {
                scores[(t * NUM_CLASSES + c) * n + i] = atom.scores[c];
            }
        }
    }
    let stack = ScoreStack::new(trials, h, w, scores).expect("atom scores normalized");
    let truth = LabelMap::new(w, h, truth_px, 0.1).expect("non-empty");
    (stack, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::class_counts;

    #[test]
    fn scene_contains_all_classes_and_is_deterministic() {
        let spec = SceneSpec::default();
        let (img1, lab1) = gen_scene(&spec);
        let (img2, lab2) = gen_scene(&spec);
        assert_eq!(img1, img2);
        assert_eq!(lab1, lab2);
        let counts = class_counts(&lab1);
        for class in ClassId::ALL {
            assert!(counts.count(class) > 0, "{class} missing from scene");
        }
    }

    #[test]
    fn perturbation_changes_some_pixels_only() {
        let (_, truth) = gen_scene(&SceneSpec::default());
        let pred = perturb_prediction(&truth, 1);
        let differing = truth
            .pixels()
            .iter()
            .zip(pred.pixels())
            .filter(|(a, b)| a != b)
            .count();
        let total = truth.pixels().len();
        assert!(differing > 0);
        assert!((differing as f64) < 0.2 * total as f64);
    }

    #[test]
    fn benchmark_atoms_are_valid_and_separated() {
        let atoms = benchmark_atoms();
        assert_eq!(atoms.len(), 96);
        for atom in &atoms {
            let sum: f64 = atom.scores.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-5);
            // argmax must be the declared predicted class
            let mut best = 0usize;
            for c in 1..NUM_CLASSES {
                if atom.scores[c] > atom.scores[best] {
                    best = c;
                }
            }
            assert_eq!(best, atom.predicted.index());
        }
        // all atom locations distinct
        let mut keys: Vec<[u32; NUM_CLASSES]> = atoms
            .iter()
            .map(|a| {
                [
                    a.scores[0].to_bits(),
                    a.scores[1].to_bits(),
                    a.scores[2].to_bits(),
                    a.scores[3].to_bits(),
                    a.scores[4].to_bits(),
                ]
            })
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 96);
    }

    #[test]
    fn benchmark_accuracy_tracks_levels() {
        let bench = gen_calibration_benchmark(&BenchmarkSpec {
            val_pixels: (200, 200),
            test_pixels: (100, 100),
            seed: 77,
        });
        // empirical accuracy per region on the validation draw
        let mut hits = [0u64; 3];
        let mut totals = [0u64; 3];
        let (w, h) = (bench.test_scores.width(), bench.test_scores.height());
        for y in 0..h {
            for x in 0..w {
                let region = bench.test_region[(y * w + x) as usize] as usize;
                let pred = bench.test_scores.argmax(0, y, x);
                totals[region] += 1;
                hits[region] += (pred == bench.test_truth.get(x, y)) as u64;
            }
        }
        for (r, &level) in bench.region_levels.iter().enumerate() {
            let acc = hits[r] as f64 / totals[r] as f64;
            assert!((acc - level).abs() < 0.03, "region {r}: {acc} vs {level}");
        }
    }

    #[test]
    fn multitrial_stack_is_consistent() {
        let (stack, truth) = gen_multitrial_stack(3, (20, 20), 4);
        assert_eq!(stack.trials(), 3);
        assert_eq!(truth.width(), 20);
    }
}
