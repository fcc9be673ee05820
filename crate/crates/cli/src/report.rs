//! The report pipeline: per-image pixel metrics, defect quantification,
//! boundary association, Ripley curves, cross-image aggregation, and
//! emission of table-shaped CSV/JSON plus SVG plots.
//!
//! All outputs are assembled in memory and written in one pass at the end,
//! so a failing stage leaves no partial files behind. Given the same
//! configuration and seed, emitted bytes are identical across runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use microquant_core::boundary::{
    detect_boundary_lines, extend_to_frame, mark_on_boundary, one_sample_prop_test,
    proportion_ci_half_width, proportion_summary, two_sample_prop_test, HoughParams,
};
use microquant_core::defect::{
    box_iou_summary, cluster_defects, defect_stats, filter_by_area, class_mask,
    AnalysisConfig, BoxIouSummary, Defect,
};
use microquant_core::io::{load_label_image, load_meta};
use microquant_core::metrics::{confusion, overall_score, ClassMetrics};
use microquant_core::raster::{class_counts, ClassId, Condition, ImageMeta, LabelMap, Palette};
use microquant_core::spatial::{
    default_radii, ripley_curve, EdgeCorrection, PointPattern, RipleyCurve, Window,
};
use microquant_core::stats::mean_defined;

use crate::config::RunConfig;
use crate::svg::{bar_chart, ripley_strip_plot, Bar, RipleyStrip};

/// Truth or prediction side of a comparison; printed as T/P in tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Truth,
    Pred,
}

impl Source {
    pub const BOTH: [Source; 2] = [Source::Truth, Source::Pred];

    pub fn tag(self) -> &'static str {
        match self {
            Source::Truth => "T",
            Source::Pred => "P",
        }
    }
}

/// Defect statistics of one (image, class, source) cell (Table A4 shape).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefectStatRow {
    pub class: ClassId,
    pub source: Source,
    pub n: usize,
    pub mean_area_um2: Option<f64>,
    pub std_area_um2: Option<f64>,
    pub ci_half_width_um2: Option<f64>,
    pub density_per_um2: f64,
}

/// On-boundary counts of one (class, source) cell of one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnBoundaryCount {
    pub class: ClassId,
    pub source: Source,
    pub n_on: u64,
    pub total: u64,
}

/// One Ripley combination of one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RipleyRecord {
    /// `void` for univariate, `precipitate_void` for voids around
    /// precipitates.
    pub combination: String,
    pub source: Source,
    pub curve: RipleyCurve,
}

/// Everything measured on one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageReport {
    pub image_id: String,
    pub condition: Condition,
    pub pixel_size_um: f64,
    pub metrics: ClassMetrics,
    pub box_iou: BoxIouSummary,
    /// Mean of F_D, IoU, and Box_a; undefined when a term is undefined.
    pub overall: Option<f64>,
    pub class_proportions: BTreeMap<String, [f64; 2]>,
    pub defect_stats: Vec<DefectStatRow>,
    pub on_boundary: Vec<OnBoundaryCount>,
    pub ripley: Vec<RipleyRecord>,
}

/// Cross-image aggregate row (the Tables 2/3 shape). Each value carries the
/// count of images skipped because the metric was undefined there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub images: Vec<String>,
    pub precision: (Option<f64>, usize),
    pub recall: (Option<f64>, usize),
    pub f_d: (Option<f64>, usize),
    pub iou: (Option<f64>, usize),
    pub box_p: (Option<f64>, usize),
    pub box_r: (Option<f64>, usize),
    pub box_a: (Option<f64>, usize),
    pub avg: (Option<f64>, usize),
}

/// Per-condition pixel-proportion summary (Table A3 shape).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProportionSummaryRow {
    pub condition: Condition,
    pub class: ClassId,
    pub source: Source,
    pub n_images: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub ci_half_width: Option<f64>,
}

/// Pooled on-boundary proportion tests (Table A5 shape): a one-sample test
/// against 50% plus the irradiated-vs-unirradiated two-sample test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryTestRow {
    pub class: ClassId,
    pub source: Source,
    pub condition: Condition,
    pub n_on: u64,
    pub n_in: u64,
    pub total: u64,
    pub proportion_on: f64,
    pub ci_half_width: f64,
    pub p_one_sample: f64,
    pub significant_one_sample: bool,
    pub p_two_sample: Option<f64>,
    pub significant_two_sample: Option<bool>,
}

/// The full report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBundle {
    pub model: String,
    pub optimizer: String,
    pub loss: String,
    pub seed: u64,
    pub images: Vec<ImageReport>,
    pub aggregate: AggregateRow,
    pub aggregate_weighted: AggregateRow,
    pub proportion_summaries: Vec<ProportionSummaryRow>,
    pub boundary_tests: Vec<BoundaryTestRow>,
}

fn edge_correction(name: &str) -> anyhow::Result<EdgeCorrection> {
    match name {
        "translation" => Ok(EdgeCorrection::Translation),
        "none" => Ok(EdgeCorrection::None),
        other => anyhow::bail!("unknown edge correction '{other}' (use translation|none)"),
    }
}

/// Stable 64-bit hash for deriving per-combination envelope seeds.
fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

struct ImageInputs {
    meta: ImageMeta,
    truth: LabelMap,
    pred: LabelMap,
}

fn load_inputs(config: &RunConfig) -> anyhow::Result<Vec<ImageInputs>> {
    let palette = Palette::default();
    let mut inputs = Vec::new();
    for entry in &config.images {
        let meta = load_meta(&entry.meta).context("loading metadata sidecar")?;
        let truth = load_label_image(&entry.truth, &palette, meta.pixel_size_um)
            .with_context(|| format!("loading truth labels for {}", meta.image_id))?;
        let pred = load_label_image(&entry.pred, &palette, meta.pixel_size_um)
            .with_context(|| format!("loading predicted labels for {}", meta.image_id))?;
        anyhow::ensure!(
            truth.same_dimensions(&pred),
            "{}: truth and prediction differ in size",
            meta.image_id
        );
        inputs.push(ImageInputs { meta, truth, pred });
    }
    // canonical image-id order makes the reduction order-independent
    inputs.sort_by(|a, b| a.meta.image_id.cmp(&b.meta.image_id));
    Ok(inputs)
}

fn filtered_defects(
    map: &LabelMap,
    analysis: &AnalysisConfig,
) -> anyhow::Result<Vec<Defect>> {
    let mut all = Vec::new();
    for class in ClassId::DEFECTS {
        let defects = cluster_defects(map, class, analysis)?;
        all.extend(filter_by_area(defects, analysis.area_threshold_um2));
    }
    Ok(all)
}

fn analyze_image(
    inputs: &ImageInputs,
    config: &RunConfig,
    analysis: &AnalysisConfig,
    hough: &HoughParams,
    correction: EdgeCorrection,
) -> anyhow::Result<ImageReport> {
    let meta = &inputs.meta;
    let seed = config.run.seed;
    let cm = confusion(&inputs.truth, &inputs.pred)?;
    let metrics = ClassMetrics::from_confusion(&cm);

    let truth_defects = filtered_defects(&inputs.truth, analysis)?;
    let pred_defects = filtered_defects(&inputs.pred, analysis)?;
    let box_iou = box_iou_summary(&truth_defects, &pred_defects, meta.pixel_size_um);
    let overall = match (metrics.iou, box_iou.macro_box_a) {
        (Some(iou), Some(box_a)) => Some(overall_score(metrics.f_d, iou, box_a)),
        _ => None,
    };

    let mut class_proportions = BTreeMap::new();
    let truth_counts = class_counts(&inputs.truth);
    let pred_counts = class_counts(&inputs.pred);
    for class in ClassId::ALL {
        class_proportions.insert(
            class.name().to_string(),
            [
                truth_counts.proportion(class),
                pred_counts.proportion(class),
            ],
        );
    }

    // boundary association, separately per source
    let mut marked: BTreeMap<Source, Vec<Defect>> = BTreeMap::new();
    for (source, map, defects) in [
        (Source::Truth, &inputs.truth, truth_defects.clone()),
        (Source::Pred, &inputs.pred, pred_defects.clone()),
    ] {
        let mask = class_mask(map, ClassId::Boundary);
        let lines = detect_boundary_lines(&mask, hough, seed ^ fnv1a(&meta.image_id));
        let traces: Vec<Vec<(u32, u32)>> = lines
            .iter()
            .map(|seg| extend_to_frame(seg, map.width(), map.height()))
            .collect::<Result<_, _>>()?;
        let mut defects = defects;
        mark_on_boundary(&mut defects, &traces, &mask);
        marked.insert(source, defects);
    }

    let map_area = inputs.truth.area_um2();
    let mut defect_stat_rows = Vec::new();
    let mut on_boundary = Vec::new();
    for source in Source::BOTH {
        for class in ClassId::DEFECTS {
            let of_class: Vec<Defect> = marked[&source]
                .iter()
                .filter(|d| d.class == class)
                .cloned()
                .collect();
            let stats = defect_stats(&of_class, map_area)?;
            defect_stat_rows.push(DefectStatRow {
                class,
                source,
                n: stats.n,
                mean_area_um2: stats.mean_area_um2,
                std_area_um2: stats.std_area_um2,
                ci_half_width_um2: stats.ci_half_width_um2,
                density_per_um2: stats.density_per_um2,
            });
            on_boundary.push(OnBoundaryCount {
                class,
                source,
                n_on: of_class.iter().filter(|d| d.on_boundary).count() as u64,
                total: of_class.len() as u64,
            });
        }
    }

    // Ripley curves on defect centroids, per source, univariate and all
    // ordered class pairs with data
    let window = Window::new(
        inputs.truth.width() as f64 * meta.pixel_size_um,
        inputs.truth.height() as f64 * meta.pixel_size_um,
    )?;
    let radii = default_radii(&window, config.ripley.radii_count);
    let mut ripley = Vec::new();
    for source in Source::BOTH {
        let pattern_of = |class: ClassId| -> anyhow::Result<PointPattern> {
            let points: Vec<(f64, f64)> = marked[&source]
                .iter()
                .filter(|d| d.class == class)
                .map(|d| {
                    (
                        d.centroid_um.0.min(window.width),
                        d.centroid_um.1.min(window.height),
                    )
                })
                .collect();
            Ok(PointPattern::new(points, window)?)
        };
        for class in ClassId::DEFECTS {
            let pattern = pattern_of(class)?;
            if pattern.len() < 2 {
                continue;
            }
            let combo = class.name().to_string();
            let curve_seed = seed ^ fnv1a(&format!("{}/{}/{combo}", meta.image_id, source.tag()));
            let curve = ripley_curve(
                &pattern,
                None,
                &radii,
                correction,
                config.ripley.sims,
                config.ripley.quantile,
                curve_seed,
            )?;
            ripley.push(RipleyRecord { combination: combo, source, curve });
        }
        for first in ClassId::DEFECTS {
            for second in ClassId::DEFECTS {
                if first == second {
                    continue;
                }
                let pi = pattern_of(first)?;
                let pj = pattern_of(second)?;
                if pi.is_empty() || pj.is_empty() {
                    continue;
                }
                // second clusters around first
                let combo = format!("{}_{}", first.name(), second.name());
                let curve_seed =
                    seed ^ fnv1a(&format!("{}/{}/{combo}", meta.image_id, source.tag()));
                let curve = ripley_curve(
                    &pi,
                    Some(&pj),
                    &radii,
                    correction,
                    config.ripley.sims,
                    config.ripley.quantile,
                    curve_seed,
                )?;
                ripley.push(RipleyRecord { combination: combo, source, curve });
            }
        }
    }

    Ok(ImageReport {
        image_id: meta.image_id.clone(),
        condition: meta.condition,
        pixel_size_um: meta.pixel_size_um,
        metrics,
        box_iou,
        overall,
        class_proportions,
        defect_stats: defect_stat_rows,
        on_boundary,
        ripley,
    })
}

fn aggregate(images: &[ImageReport], weighted: bool) -> AggregateRow {
    let column = |f: &dyn Fn(&ImageReport) -> Option<f64>| -> (Option<f64>, usize) {
        let values: Vec<Option<f64>> = images.iter().map(f).collect();
        mean_defined(&values)
    };
    if weighted {
        AggregateRow {
            images: images.iter().map(|i| i.image_id.clone()).collect(),
            precision: column(&|i| Some(i.metrics.weighted.precision)),
            recall: column(&|i| Some(i.metrics.weighted.recall)),
            f_d: column(&|i| Some(i.metrics.weighted.f_d)),
            iou: column(&|i| Some(i.metrics.weighted.iou)),
            box_p: column(&|i| i.box_iou.macro_box_p),
            box_r: column(&|i| i.box_iou.macro_box_r),
            box_a: column(&|i| i.box_iou.macro_box_a),
            avg: column(&|i| {
                i.box_iou
                    .macro_box_a
                    .map(|b| overall_score(i.metrics.weighted.f_d, i.metrics.weighted.iou, b))
            }),
        }
    } else {
        AggregateRow {
            images: images.iter().map(|i| i.image_id.clone()).collect(),
            precision: column(&|i| i.metrics.macro_precision),
            recall: column(&|i| i.metrics.macro_recall),
            f_d: column(&|i| Some(i.metrics.f_d)),
            iou: column(&|i| i.metrics.iou),
            box_p: column(&|i| i.box_iou.macro_box_p),
            box_r: column(&|i| i.box_iou.macro_box_r),
            box_a: column(&|i| i.box_iou.macro_box_a),
            avg: column(&|i| i.overall),
        }
    }
}

fn summarize_proportions(images: &[ImageReport]) -> Vec<ProportionSummaryRow> {
    let mut rows = Vec::new();
    let mut conditions: Vec<Condition> = images.iter().map(|i| i.condition).collect();
    conditions.sort();
    conditions.dedup();
    for condition in conditions {
        for class in ClassId::ALL {
            for (idx, source) in Source::BOTH.into_iter().enumerate() {
                let values: Vec<f64> = images
                    .iter()
                    .filter(|i| i.condition == condition)
                    .map(|i| i.class_proportions[class.name()][idx])
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let summary = proportion_summary(&values).expect("non-empty by check");
                rows.push(ProportionSummaryRow {
                    condition,
                    class,
                    source,
                    n_images: summary.n,
                    mean: summary.mean,
                    std: summary.std,
                    ci_half_width: summary.ci_half_width,
                });
            }
        }
    }
    rows
}

fn boundary_tests(images: &[ImageReport]) -> anyhow::Result<Vec<BoundaryTestRow>> {
    // pool on-boundary counts across images per (class, source, condition)
    let mut pooled: BTreeMap<(ClassId, Source, Condition), (u64, u64)> = BTreeMap::new();
    for image in images {
        for count in &image.on_boundary {
            let slot = pooled
                .entry((count.class, count.source, image.condition))
                .or_insert((0, 0));
            slot.0 += count.n_on;
            slot.1 += count.total;
        }
    }
    let mut rows = Vec::new();
    for (&(class, source, condition), &(n_on, total)) in &pooled {
        if total == 0 {
            continue;
        }
        let one = one_sample_prop_test(n_on, total, 0.5, true)?;
        // two-sample against the opposite condition, same class and source
        let other_condition = match condition {
            Condition::Irradiated => Condition::Unirradiated,
            Condition::Unirradiated => Condition::Irradiated,
        };
        let two = pooled
            .get(&(class, source, other_condition))
            .filter(|&&(_, other_total)| other_total > 0)
            .map(|&(other_on, other_total)| {
                two_sample_prop_test(n_on, total, other_on, other_total, true)
            })
            .transpose()?;
        let proportion_on = n_on as f64 / total as f64;
        rows.push(BoundaryTestRow {
            class,
            source,
            condition,
            n_on,
            n_in: total - n_on,
            total,
            proportion_on,
            ci_half_width: proportion_ci_half_width(proportion_on, total)?,
            p_one_sample: one.p_value,
            significant_one_sample: one.significant,
            p_two_sample: two.map(|t| t.p_value),
            significant_two_sample: two.map(|t| t.significant),
        });
    }
    Ok(rows)
}

/// Runs every stage over the configured images and assembles the bundle.
pub fn run_pipeline(config: &RunConfig) -> anyhow::Result<ReportBundle> {
    anyhow::ensure!(!config.images.is_empty(), "no images configured");
    let inputs = load_inputs(config)?;
    let analysis = config.analysis.to_config();
    let hough = config.hough.to_params();
    let correction = edge_correction(&config.ripley.correction)?;

    let mut images = Vec::new();
    for entry in &inputs {
        let report = analyze_image(entry, config, &analysis, &hough, correction)
            .with_context(|| format!("analyzing {}", entry.meta.image_id))?;
        images.push(report);
    }
    let aggregate_row = aggregate(&images, false);
    let aggregate_weighted = aggregate(&images, true);
    let proportion_summaries = summarize_proportions(&images);
    let boundary_rows = boundary_tests(&images)?;
    Ok(ReportBundle {
        model: config.model.name.clone(),
        optimizer: config.model.optimizer.clone(),
        loss: config.model.loss.clone(),
        seed: config.run.seed,
        images,
        aggregate: aggregate_row,
        aggregate_weighted,
        proportion_summaries,
        boundary_tests: boundary_rows,
    })
}

/// Formats a proportion as a percentage with one decimal, rounding half up.
pub fn fmt_percent(value: f64) -> String {
    let tenths = (value * 1000.0).round();
    format!("{:.1}", tenths / 10.0)
}

fn fmt_opt_percent(value: Option<f64>) -> String {
    value.map(fmt_percent).unwrap_or_default()
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(|v| format!("{v}")).unwrap_or_default()
}

/// The Tables 2/3-shaped CSV: exactly the columns model, optimizer, loss,
/// precision, recall, f_d, iou, box_p, box_r, box_a, avg, as percentages
/// with one decimal.
pub fn emit_metrics_table(bundle: &ReportBundle, weighted: bool) -> anyhow::Result<Vec<u8>> {
    let row = if weighted { &bundle.aggregate_weighted } else { &bundle.aggregate };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model", "optimizer", "loss", "precision", "recall", "f_d", "iou", "box_p", "box_r",
        "box_a", "avg",
    ])?;
    w.write_record([
        bundle.model.clone(),
        bundle.optimizer.clone(),
        bundle.loss.clone(),
        fmt_opt_percent(row.precision.0),
        fmt_opt_percent(row.recall.0),
        fmt_opt_percent(row.f_d.0),
        fmt_opt_percent(row.iou.0),
        fmt_opt_percent(row.box_p.0),
        fmt_opt_percent(row.box_r.0),
        fmt_opt_percent(row.box_a.0),
        fmt_opt_percent(row.avg.0),
    ])?;
    Ok(w.into_inner()?)
}

fn emit_per_image_table(bundle: &ReportBundle) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "image", "condition", "precision", "recall", "f_d", "iou", "box_p", "box_r", "box_a",
        "avg",
    ])?;
    for image in &bundle.images {
        w.write_record([
            image.image_id.clone(),
            image.condition.name().to_string(),
            fmt_opt_percent(image.metrics.macro_precision),
            fmt_opt_percent(image.metrics.macro_recall),
            fmt_percent(image.metrics.f_d),
            fmt_opt_percent(image.metrics.iou),
            fmt_opt_percent(image.box_iou.macro_box_p),
            fmt_opt_percent(image.box_iou.macro_box_r),
            fmt_opt_percent(image.box_iou.macro_box_a),
            fmt_opt_percent(image.overall),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn emit_proportions_table(bundle: &ReportBundle) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["condition", "class", "source", "n", "prop", "std", "se"])?;
    for row in &bundle.proportion_summaries {
        w.write_record([
            row.condition.name().to_string(),
            row.class.name().to_string(),
            row.source.tag().to_string(),
            row.n_images.to_string(),
            format!("{}", row.mean),
            fmt_opt(row.std),
            fmt_opt(row.ci_half_width),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn emit_defect_stats_table(bundle: &ReportBundle) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "condition", "image", "class", "source", "n", "area_um2", "std_um2", "se_um2",
        "density_per_um2",
    ])?;
    for image in &bundle.images {
        for row in &image.defect_stats {
            w.write_record([
                image.condition.name().to_string(),
                image.image_id.clone(),
                row.class.name().to_string(),
                row.source.tag().to_string(),
                row.n.to_string(),
                fmt_opt(row.mean_area_um2),
                fmt_opt(row.std_area_um2),
                fmt_opt(row.ci_half_width_um2),
                format!("{}", row.density_per_um2),
            ])?;
        }
    }
    Ok(w.into_inner()?)
}

fn emit_boundary_table(bundle: &ReportBundle) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "class", "source", "condition", "type", "n", "total", "proportion", "se",
        "p_one_sample", "p_two_sample", "significant",
    ])?;
    for row in &bundle.boundary_tests {
        for (kind, n, prop) in [
            ("onboundary", row.n_on, row.proportion_on),
            ("ingrain", row.n_in, 1.0 - row.proportion_on),
        ] {
            w.write_record([
                row.class.name().to_string(),
                row.source.tag().to_string(),
                row.condition.name().to_string(),
                kind.to_string(),
                n.to_string(),
                row.total.to_string(),
                format!("{prop}"),
                format!("{}", row.ci_half_width),
                format!("{}", row.p_one_sample),
                fmt_opt(row.p_two_sample),
                row.significant_one_sample.to_string(),
            ])?;
        }
    }
    Ok(w.into_inner()?)
}

fn emit_ripley_table(bundle: &ReportBundle) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "image", "source", "combination", "radius_um", "k", "h", "env_lo", "env_hi", "verdict",
    ])?;
    for image in &bundle.images {
        for record in &image.ripley {
            let curve = &record.curve;
            for i in 0..curve.radii.len() {
                w.write_record([
                    image.image_id.clone(),
                    record.source.tag().to_string(),
                    record.combination.clone(),
                    format!("{}", curve.radii[i]),
                    format!("{}", curve.k_values[i]),
                    format!("{}", curve.h_values[i]),
                    format!("{}", curve.env_lo[i]),
                    format!("{}", curve.env_hi[i]),
                    curve.verdicts[i].name().to_string(),
                ])?;
            }
        }
    }
    Ok(w.into_inner()?)
}

fn proportion_bars(bundle: &ReportBundle) -> (Vec<Bar>, Vec<String>) {
    let mut bars = Vec::new();
    let mut omitted = Vec::new();
    for row in &bundle.proportion_summaries {
        if !row.class.is_defect() {
            continue;
        }
        let label = format!(
            "{}/{}/{}",
            row.condition.name(),
            row.class.name(),
            row.source.tag()
        );
        if row.mean == 0.0 {
            omitted.push(label);
            continue;
        }
        bars.push(Bar {
            label,
            value: row.mean,
            ci_half: row.ci_half_width,
            significant: None,
            series: (row.source == Source::Pred) as usize,
        });
    }
    (bars, omitted)
}

fn defect_area_bars(bundle: &ReportBundle) -> (Vec<Bar>, Vec<String>) {
    let mut bars = Vec::new();
    let mut omitted = Vec::new();
    for image in &bundle.images {
        for row in &image.defect_stats {
            let label = format!("{}/{}/{}", image.image_id, row.class.name(), row.source.tag());
            match row.mean_area_um2 {
                Some(mean) => bars.push(Bar {
                    label,
                    value: mean,
                    ci_half: row.ci_half_width_um2,
                    significant: None,
                    series: (row.source == Source::Pred) as usize,
                }),
                None => omitted.push(label),
            }
        }
    }
    (bars, omitted)
}

fn density_bars(bundle: &ReportBundle) -> (Vec<Bar>, Vec<String>) {
    let mut bars = Vec::new();
    for image in &bundle.images {
        for row in &image.defect_stats {
            bars.push(Bar {
                label: format!("{}/{}/{}", image.image_id, row.class.name(), row.source.tag()),
                value: row.density_per_um2,
                ci_half: None,
                significant: None,
                series: (row.source == Source::Pred) as usize,
            });
        }
    }
    (bars, Vec::new())
}

fn boundary_bars(bundle: &ReportBundle) -> (Vec<Bar>, Vec<String>) {
    let mut bars = Vec::new();
    let mut omitted = Vec::new();
    for row in &bundle.boundary_tests {
        let label = format!(
            "{}/{}/{}",
            row.condition.name(),
            row.class.name(),
            row.source.tag()
        );
        if row.total == 0 {
            omitted.push(label);
            continue;
        }
        bars.push(Bar {
            label,
            value: row.proportion_on,
            ci_half: Some(row.ci_half_width),
            significant: Some(row.significant_one_sample),
            series: (row.source == Source::Pred) as usize,
        });
    }
    (bars, omitted)
}

fn ripley_strips(bundle: &ReportBundle, source: Source) -> (Vec<RipleyStrip>, Vec<String>) {
    let mut strips = Vec::new();
    let mut seen: Vec<(String, String)> = Vec::new();
    for image in &bundle.images {
        for record in &image.ripley {
            if record.source != source {
                continue;
            }
            seen.push((image.image_id.clone(), record.combination.clone()));
            strips.push(RipleyStrip {
                label: format!("{} {}", image.image_id, record.combination),
                radii: record.curve.radii.clone(),
                verdicts: record.curve.verdicts.iter().map(|v| v.name().to_string()).collect(),
            });
        }
    }
    // combinations absent everywhere (too few defects) get a legend note
    let mut omitted = Vec::new();
    for image in &bundle.images {
        for class in ClassId::DEFECTS {
            let key = (image.image_id.clone(), class.name().to_string());
            if !seen.contains(&key) {
                omitted.push(format!("{} {}", key.0, key.1));
            }
        }
    }
    (strips, omitted)
}

/// Renders every output file of the bundle: CSV tables, the JSON bundle,
/// and the SVG plots. Returns (relative name, bytes) pairs.
pub fn render_outputs(bundle: &ReportBundle) -> anyhow::Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut outputs: Vec<(PathBuf, Vec<u8>)> = vec![
        ("metrics.csv".into(), emit_metrics_table(bundle, false)?),
        ("metrics_weighted.csv".into(), emit_metrics_table(bundle, true)?),
        ("per_image_metrics.csv".into(), emit_per_image_table(bundle)?),
        ("proportions.csv".into(), emit_proportions_table(bundle)?),
        ("defect_stats.csv".into(), emit_defect_stats_table(bundle)?),
        ("boundary_props.csv".into(), emit_boundary_table(bundle)?),
        ("ripley.csv".into(), emit_ripley_table(bundle)?),
        (
            "report.json".into(),
            serde_json::to_vec_pretty(bundle).context("serializing bundle")?,
        ),
    ];
    let (bars, omitted) = proportion_bars(bundle);
    outputs.push((
        "proportions.svg".into(),
        bar_chart("Defect pixel proportions", "proportion", &bars, &omitted).into_bytes(),
    ));
    let (bars, omitted) = defect_area_bars(bundle);
    outputs.push((
        "defect_area.svg".into(),
        bar_chart("Mean defect area", "area (um2)", &bars, &omitted).into_bytes(),
    ));
    let (bars, omitted) = density_bars(bundle);
    outputs.push((
        "defect_density.svg".into(),
        bar_chart("Defect density", "defects per um2", &bars, &omitted).into_bytes(),
    ));
    let (bars, omitted) = boundary_bars(bundle);
    outputs.push((
        "boundary_props.svg".into(),
        bar_chart("Proportion of defects on boundary", "proportion", &bars, &omitted)
            .into_bytes(),
    ));
    for source in Source::BOTH {
        let (strips, omitted) = ripley_strips(bundle, source);
        let name = format!("ripley_{}.svg", if source == Source::Truth { "truth" } else { "pred" });
        let title = format!(
            "Ripley clustering/dispersion ({})",
            if source == Source::Truth { "expert-labeled" } else { "predicted" }
        );
        outputs.push((name.into(), ripley_strip_plot(&title, &strips, &omitted).into_bytes()));
    }
    Ok(outputs)
}

/// Runs the pipeline and writes all outputs under `out_dir`; nothing is
/// written if any stage fails.
pub fn run_and_write(config: &RunConfig, out_dir: &Path) -> anyhow::Result<ReportBundle> {
    let bundle = run_pipeline(config)?;
    let outputs = render_outputs(&bundle)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, bytes) in &outputs {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(bundle)
}
