//! Subcommand implementations. Each function takes already-parsed
//! arguments, does the work through the core crate, and writes its outputs;
//! `main.rs` maps the errors onto exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use microquant_core::boundary::{
    detect_boundary_lines, extend_to_frame, mark_on_boundary, one_sample_prop_test,
    two_sample_prop_test, HoughParams, ProportionTestResult, TwoSampleTestResult,
};
use microquant_core::calibrate::{
    apply_calibration, fit_calibration, save_model, thresholded_metrics, ThresholdedMetrics,
};
use microquant_core::defect::{
    box_iou_summary, class_mask, cluster_defects, defect_stats, filter_by_area,
    AnalysisConfig, BoxIouSummary, Defect,
};
use microquant_core::io::{
    load_label_image, load_meta, load_micrograph, load_score_stack, save_label_image,
    save_meta, save_micrograph, save_score_stack,
};
use microquant_core::metrics::{confusion, ClassMetrics};
use microquant_core::prep::{
    assign_split, augment_d4, chip_region, compute_split, SplitTag,
};
use microquant_core::raster::{ClassId, LabelMap, Micrograph, Palette};
use microquant_core::spatial::{
    default_radii, ripley_curve, EdgeCorrection, PointPattern, Window,
};
use microquant_core::synth::{gen_dataset, gen_multitrial_stack};

use crate::report::Source;
use crate::svg::{ripley_strip_plot, RipleyStrip};

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `prep`: split an image into the train/validation and test sections, chip
/// the train/validation region, assign the 80/20 split, augment the train
/// chips eight-fold, and write everything plus a manifest.
#[allow(clippy::too_many_arguments)]
pub fn prep(
    image_path: &Path,
    labels_path: &Path,
    meta_path: &Path,
    out_dir: &Path,
    chip_size: u32,
    train_fraction: f64,
    seed: u64,
    quiet: bool,
) -> anyhow::Result<()> {
    let meta = load_meta(meta_path)?;
    let palette = Palette::default();
    let image = load_micrograph(image_path)?;
    let labels = load_label_image(labels_path, &palette, meta.pixel_size_um)?;
    anyhow::ensure!(
        image.width() == labels.width() && image.height() == labels.height(),
        "image and label rasters differ in size"
    );

    let layout = compute_split(image.width(), chip_size)?;
    let mut chips = chip_region(&image, &labels, &layout)?;
    assign_split(&mut chips, train_fraction, seed)?;

    let img_dir = out_dir.join("images");
    let lab_dir = out_dir.join("labels");
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&lab_dir)?;

    let mut n_train = 0usize;
    let mut n_val = 0usize;
    let mut n_files = 0usize;
    for chip in &chips {
        let split = chip.split.expect("assigned above");
        let variants = match split {
            SplitTag::Train => {
                n_train += 1;
                augment_d4(chip)?
            }
            SplitTag::Val => {
                n_val += 1;
                vec![chip.clone()]
            }
        };
        for (v, variant) in variants.iter().enumerate() {
            let name = format!(
                "{}_{}_{}_v{}_{}.png",
                meta.image_id, chip.origin.0, chip.origin.1, v, split.name()
            );
            save_micrograph(&variant.image, &img_dir.join(&name))?;
            save_label_image(&variant.labels, &palette, &lab_dir.join(&name))?;
            n_files += 1;
        }
    }

    #[derive(Serialize)]
    struct Manifest<'a> {
        image_id: &'a str,
        layout: &'a microquant_core::prep::SplitLayout,
        seed: u64,
        train_fraction: f64,
        chips_train: usize,
        chips_val: usize,
        files_written: usize,
    }
    write_json(
        &Manifest {
            image_id: &meta.image_id,
            layout: &layout,
            seed,
            train_fraction,
            chips_train: n_train,
            chips_val: n_val,
            files_written: n_files,
        },
        &out_dir.join("manifest.json"),
    )?;
    if !quiet {
        println!(
            "prep: {} train chips (x8 augmented), {} val chips, {} chip pairs written",
            n_train, n_val, n_files
        );
    }
    Ok(())
}

/// `eval-pixels`: full pixel-metric record of a truth/prediction pair.
pub fn eval_pixels(
    truth_path: &Path,
    pred_path: &Path,
    meta_path: &Path,
    out_path: &Path,
    quiet: bool,
) -> anyhow::Result<()> {
    let meta = load_meta(meta_path)?;
    let palette = Palette::default();
    let truth = load_label_image(truth_path, &palette, meta.pixel_size_um)?;
    let pred = load_label_image(pred_path, &palette, meta.pixel_size_um)?;
    let cm = confusion(&truth, &pred)?;
    let metrics = ClassMetrics::from_confusion(&cm);

    #[derive(Serialize)]
    struct EvalRecord<'a> {
        image_id: &'a str,
        metrics: &'a ClassMetrics,
    }
    write_json(&EvalRecord { image_id: &meta.image_id, metrics: &metrics }, out_path)?;
    if !quiet {
        println!(
            "eval-pixels: f_d {:.4}, iou {}",
            metrics.f_d,
            metrics.iou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
        );
    }
    Ok(())
}

fn quantified_defects(
    labels: &LabelMap,
    analysis: &AnalysisConfig,
    hough: &HoughParams,
    seed: u64,
) -> anyhow::Result<Vec<Defect>> {
    let mut defects = Vec::new();
    for class in ClassId::DEFECTS {
        let found = cluster_defects(labels, class, analysis)?;
        defects.extend(filter_by_area(found, analysis.area_threshold_um2));
    }
    let mask = class_mask(labels, ClassId::Boundary);
    let lines = detect_boundary_lines(&mask, hough, seed);
    let traces: Vec<Vec<(u32, u32)>> = lines
        .iter()
        .map(|seg| extend_to_frame(seg, labels.width(), labels.height()))
        .collect::<Result<_, _>>()?;
    mark_on_boundary(&mut defects, &traces, &mask);
    Ok(defects)
}

/// `quantify`: per-defect CSV plus a stats JSON with per-class area/density
/// statistics and on-boundary proportions with both test variants.
pub fn quantify(
    labels_path: &Path,
    meta_path: &Path,
    out_csv: &Path,
    analysis: &AnalysisConfig,
    hough: &HoughParams,
    seed: u64,
    quiet: bool,
) -> anyhow::Result<()> {
    let meta = load_meta(meta_path)?;
    let palette = Palette::default();
    let labels = load_label_image(labels_path, &palette, meta.pixel_size_um)?;
    let defects = quantified_defects(&labels, analysis, hough, seed)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "class", "area_um2", "centroid_x_um", "centroid_y_um", "bbox_min_x", "bbox_min_y",
        "bbox_max_x", "bbox_max_y", "on_boundary",
    ])?;
    for d in &defects {
        w.write_record([
            d.class.name().to_string(),
            format!("{}", d.area_um2),
            format!("{}", d.centroid_um.0),
            format!("{}", d.centroid_um.1),
            d.bbox.min_x.to_string(),
            d.bbox.min_y.to_string(),
            d.bbox.max_x.to_string(),
            d.bbox.max_y.to_string(),
            d.on_boundary.to_string(),
        ])?;
    }
    std::fs::write(out_csv, w.into_inner()?)
        .with_context(|| format!("writing {}", out_csv.display()))?;

    #[derive(Serialize)]
    struct ClassQuant {
        n: usize,
        mean_area_um2: Option<f64>,
        std_area_um2: Option<f64>,
        ci_half_width_um2: Option<f64>,
        density_per_um2: f64,
        n_on_boundary: u64,
        /// One-sample test against 50%, with the Yates correction.
        on_boundary: Option<ProportionTestResult>,
        /// The same test without the continuity correction.
        on_boundary_uncorrected: Option<ProportionTestResult>,
    }
    let mut stats: BTreeMap<String, ClassQuant> = BTreeMap::new();
    for class in ClassId::DEFECTS {
        let of_class: Vec<Defect> =
            defects.iter().filter(|d| d.class == class).cloned().collect();
        let ds = defect_stats(&of_class, labels.area_um2())?;
        let n_on = of_class.iter().filter(|d| d.on_boundary).count() as u64;
        let test = (ds.n > 0)
            .then(|| one_sample_prop_test(n_on, ds.n as u64, 0.5, true))
            .transpose()?;
        let test_uncorrected = (ds.n > 0)
            .then(|| one_sample_prop_test(n_on, ds.n as u64, 0.5, false))
            .transpose()?;
        stats.insert(
            class.name().to_string(),
            ClassQuant {
                n: ds.n,
                mean_area_um2: ds.mean_area_um2,
                std_area_um2: ds.std_area_um2,
                ci_half_width_um2: ds.ci_half_width_um2,
                density_per_um2: ds.density_per_um2,
                n_on_boundary: n_on,
                on_boundary: test,
                on_boundary_uncorrected: test_uncorrected,
            },
        );
    }
    #[derive(Serialize)]
    struct QuantifyRecord<'a> {
        image_id: &'a str,
        map_area_um2: f64,
        area_threshold_um2: f64,
        classes: BTreeMap<String, ClassQuant>,
    }
    let stats_path = out_csv.with_extension("json");
    write_json(
        &QuantifyRecord {
            image_id: &meta.image_id,
            map_area_um2: labels.area_um2(),
            area_threshold_um2: analysis.area_threshold_um2,
            classes: stats,
        },
        &stats_path,
    )?;
    if !quiet {
        println!(
            "quantify: {} defects -> {}, stats -> {}",
            defects.len(),
            out_csv.display(),
            stats_path.display()
        );
    }
    Ok(())
}

/// `boxiou`: per-class Box IoU precision/recall/average.
pub fn boxiou(
    truth_path: &Path,
    pred_path: &Path,
    meta_path: &Path,
    out_path: Option<&Path>,
    analysis: &AnalysisConfig,
    quiet: bool,
) -> anyhow::Result<()> {
    let meta = load_meta(meta_path)?;
    let palette = Palette::default();
    let truth = load_label_image(truth_path, &palette, meta.pixel_size_um)?;
    let pred = load_label_image(pred_path, &palette, meta.pixel_size_um)?;
    let collect = |map: &LabelMap| -> anyhow::Result<Vec<Defect>> {
        let mut all = Vec::new();
        for class in ClassId::DEFECTS {
            let defects = cluster_defects(map, class, analysis)?;
            all.extend(filter_by_area(defects, analysis.area_threshold_um2));
        }
        Ok(all)
    };
    let truth_defects = collect(&truth)?;
    let pred_defects = collect(&pred)?;
    let summary: BoxIouSummary =
        box_iou_summary(&truth_defects, &pred_defects, meta.pixel_size_um);
    let text = serde_json::to_string_pretty(&summary)?;
    match out_path {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    if !quiet && out_path.is_some() {
        println!(
            "boxiou: macro box_a {}",
            summary
                .macro_box_a
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "undefined".into())
        );
    }
    Ok(())
}

/// `ripley`: K/H curves with envelopes and verdicts for the requested
/// classes (univariate) and ordered class pairs, as CSV plus optional SVG.
#[allow(clippy::too_many_arguments)]
pub fn ripley(
    labels_path: &Path,
    meta_path: &Path,
    classes: &[ClassId],
    sims: usize,
    quantile: f64,
    seed: u64,
    out_csv: &Path,
    svg_path: Option<&Path>,
    analysis: &AnalysisConfig,
    correction: EdgeCorrection,
    radii_count: usize,
    quiet: bool,
) -> anyhow::Result<()> {
    let meta = load_meta(meta_path)?;
    let palette = Palette::default();
    let labels = load_label_image(labels_path, &palette, meta.pixel_size_um)?;
    let window = Window::new(
        labels.width() as f64 * meta.pixel_size_um,
        labels.height() as f64 * meta.pixel_size_um,
    )?;
    let radii = default_radii(&window, radii_count);

    let mut patterns: BTreeMap<ClassId, PointPattern> = BTreeMap::new();
    for &class in classes {
        anyhow::ensure!(class.is_defect(), "{class} is not a defect class");
        let defects = filter_by_area(
            cluster_defects(&labels, class, analysis)?,
            analysis.area_threshold_um2,
        );
        let points: Vec<(f64, f64)> = defects
            .iter()
            .map(|d| {
                (
                    d.centroid_um.0.min(window.width),
                    d.centroid_um.1.min(window.height),
                )
            })
            .collect();
        patterns.insert(class, PointPattern::new(points, window)?);
    }

    let mut rows: Vec<(String, microquant_core::spatial::RipleyCurve)> = Vec::new();
    for &class in classes {
        let pattern = &patterns[&class];
        if pattern.len() < 2 {
            continue;
        }
        let combo = class.name().to_string();
        let curve = ripley_curve(pattern, None, &radii, correction, sims, quantile, seed)?;
        rows.push((combo, curve));
    }
    for &first in classes {
        for &second in classes {
            if first == second {
                continue;
            }
            let (pi, pj) = (&patterns[&first], &patterns[&second]);
            if pi.is_empty() || pj.is_empty() {
                continue;
            }
            let combo = format!("{}_{}", first.name(), second.name());
            let curve = ripley_curve(pi, Some(pj), &radii, correction, sims, quantile, seed)?;
            rows.push((combo, curve));
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["combination", "radius_um", "k", "h", "env_lo", "env_hi", "verdict"])?;
    for (combo, curve) in &rows {
        for i in 0..curve.radii.len() {
            w.write_record([
                combo.clone(),
                format!("{}", curve.radii[i]),
                format!("{}", curve.k_values[i]),
                format!("{}", curve.h_values[i]),
                format!("{}", curve.env_lo[i]),
                format!("{}", curve.env_hi[i]),
                curve.verdicts[i].name().to_string(),
            ])?;
        }
    }
    std::fs::write(out_csv, w.into_inner()?)
        .with_context(|| format!("writing {}", out_csv.display()))?;

    if let Some(svg_path) = svg_path {
        let strips: Vec<RipleyStrip> = rows
            .iter()
            .map(|(combo, curve)| RipleyStrip {
                label: format!("{} {}", meta.image_id, combo),
                radii: curve.radii.clone(),
                verdicts: curve.verdicts.iter().map(|v| v.name().to_string()).collect(),
            })
            .collect();
        let requested: Vec<String> = classes
            .iter()
            .filter(|c| patterns[c].len() < 2)
            .map(|c| format!("{} {}", meta.image_id, c.name()))
            .collect();
        let svg = ripley_strip_plot(
            &format!("Ripley clustering/dispersion ({})", meta.image_id),
            &strips,
            &requested,
        );
        std::fs::write(svg_path, svg)
            .with_context(|| format!("writing {}", svg_path.display()))?;
    }
    if !quiet {
        println!("ripley: {} combinations -> {}", rows.len(), out_csv.display());
    }
    Ok(())
}

/// `prop-test`: one- or two-sample proportion test as JSON on stdout.
pub fn prop_test(
    n_on: u64,
    total: u64,
    second: Option<(u64, u64)>,
    p0: f64,
    continuity: bool,
) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct PropTestOutput {
        one_sample: ProportionTestResult,
        #[serde(skip_serializing_if = "Option::is_none")]
        two_sample: Option<TwoSampleTestResult>,
    }
    let one_sample = one_sample_prop_test(n_on, total, p0, continuity)?;
    let two_sample = second
        .map(|(n2, total2)| two_sample_prop_test(n_on, total, n2, total2, continuity))
        .transpose()?;
    println!(
        "{}",
        serde_json::to_string_pretty(&PropTestOutput { one_sample, two_sample })?
    );
    Ok(())
}

/// `calibrate fit`: fit the density-ratio model from validation scores and
/// truth labels.
pub fn calibrate_fit(
    scores_path: &Path,
    truth_path: &Path,
    out_path: &Path,
    k: usize,
    quiet: bool,
) -> anyhow::Result<()> {
    let scores = load_score_stack(scores_path)?;
    let palette = Palette::default();
    let truth = load_label_image(truth_path, &palette, 1.0)?;
    let model = fit_calibration(&scores, &truth, k)?;
    save_model(&model, out_path)?;
    if !quiet {
        let counts: Vec<String> = model
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                format!(
                    "{}:{}/{}",
                    ClassId::from_index(i).unwrap().name(),
                    c.n_correct,
                    c.n_all
                )
            })
            .collect();
        println!("calibrate fit: k={}, correct/all per class: {}", model.k, counts.join(" "));
    }
    Ok(())
}

/// `calibrate apply`: majority-vote prediction with geometric-mean
/// confidence, threshold-filtered metrics when truth is given, and a
/// grayscale confidence PNG.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_apply(
    model_path: &Path,
    scores_path: &Path,
    truth_path: Option<&Path>,
    tau: f64,
    out_path: &Path,
    confidence_png: Option<&Path>,
    pred_png: Option<&Path>,
    quiet: bool,
) -> anyhow::Result<()> {
    let model = microquant_core::calibrate::load_model(model_path)?;
    let scores = load_score_stack(scores_path)?;
    let result = apply_calibration(&model, &scores, 1.0);

    let palette = Palette::default();
    let truth = truth_path
        .map(|p| load_label_image(p, &palette, 1.0))
        .transpose()?;
    let thresholded: Option<ThresholdedMetrics> = truth
        .as_ref()
        .map(|t| thresholded_metrics(&result.predicted, &result.confidence, t, tau))
        .transpose()?;
    let unthresholded: Option<ThresholdedMetrics> = truth
        .as_ref()
        .map(|t| thresholded_metrics(&result.predicted, &result.confidence, t, 0.0))
        .transpose()?;

    #[derive(Serialize)]
    struct ApplyRecord {
        trials_used: u32,
        tau: f64,
        mean_confidence: f64,
        retained_fraction: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        thresholded: Option<ThresholdedMetrics>,
        #[serde(skip_serializing_if = "Option::is_none")]
        unthresholded: Option<ThresholdedMetrics>,
    }
    let n = result.confidence.len() as f64;
    let mean_confidence = result.confidence.iter().sum::<f64>() / n;
    let retained = result.confidence.iter().filter(|&&c| c >= tau).count() as f64 / n;
    write_json(
        &ApplyRecord {
            trials_used: result.trials_used,
            tau,
            mean_confidence,
            retained_fraction: retained,
            thresholded,
            unthresholded,
        },
        out_path,
    )?;

    if let Some(png) = confidence_png {
        let pixels: Vec<u8> = result
            .confidence
            .iter()
            .map(|&c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = Micrograph::new(scores.width(), scores.height(), pixels)?;
        save_micrograph(&img, png)?;
    }
    if let Some(png) = pred_png {
        save_label_image(&result.predicted, &palette, png)?;
    }
    if !quiet {
        println!(
            "calibrate apply: mean confidence {:.4}, {:.1}% retained at tau={}",
            mean_confidence,
            retained * 100.0,
            tau
        );
    }
    Ok(())
}

/// `synth`: write a synthetic dataset (truth/pred label PNGs, micrographs,
/// metadata sidecars, optional score stacks) plus a ready-to-run report
/// configuration.
pub fn synth(
    out_dir: &Path,
    images: usize,
    seed: u64,
    with_scores: bool,
    quiet: bool,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let palette = Palette::default();
    let dataset = gen_dataset(images, seed);
    let mut image_sections = String::new();
    for item in &dataset {
        let id = &item.meta.image_id;
        save_micrograph(&item.image, &out_dir.join(format!("{id}_image.png")))?;
        save_label_image(&item.truth, &palette, &out_dir.join(format!("{id}_truth.png")))?;
        save_label_image(&item.pred, &palette, &out_dir.join(format!("{id}_pred.png")))?;
        save_meta(&item.meta, &out_dir.join(format!("{id}_meta.json")))?;
        image_sections.push_str(&format!(
            "\n[[images]]\ntruth = \"{id}_truth.png\"\npred = \"{id}_pred.png\"\nmeta = \"{id}_meta.json\"\n"
        ));
    }
    if with_scores {
        for (i, item) in dataset.iter().enumerate() {
            let id = &item.meta.image_id;
            let (stack, truth) = gen_multitrial_stack(
                10,
                (item.truth.width(), item.truth.height()),
                seed.wrapping_add(1000 + i as u64),
            );
            save_score_stack(&stack, &out_dir.join(format!("{id}_scores.mqss")))?;
            save_label_image(
                &truth,
                &palette,
                &out_dir.join(format!("{id}_scores_truth.png")),
            )?;
        }
    }
    let config_text = format!(
        "[model]\nname = \"synthetic\"\noptimizer = \"none\"\nloss = \"none\"\n\n[run]\nseed = {seed}\nout_dir = \"report\"\n{image_sections}\n[ripley]\nsims = 200\n"
    );
    std::fs::write(out_dir.join("run.toml"), config_text)?;
    if !quiet {
        println!("synth: {} images written to {}", dataset.len(), out_dir.display());
    }
    Ok(())
}

/// Builds the list of defect classes from a comma-separated argument.
pub fn parse_classes(arg: &str) -> anyhow::Result<Vec<ClassId>> {
    let mut out = Vec::new();
    for name in arg.split(',') {
        let name = name.trim();
        let class = ClassId::from_name(name)
            .ok_or_else(|| anyhow::anyhow!("unknown class '{name}'"))?;
        out.push(class);
    }
    anyhow::ensure!(!out.is_empty(), "no classes given");
    Ok(out)
}

/// Shared holder for the paths written by `report`.
pub fn report_out_dir(config_out: &Path, flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned().unwrap_or_else(|| config_out.to_path_buf())
}

/// Re-exported for tests: the truth/pred source tags.
pub fn source_tags() -> [&'static str; 2] {
    [Source::Truth.tag(), Source::Pred.tag()]
}
