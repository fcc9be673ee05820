//! `microquant` — evaluate micrograph segmentations against expert labels
//! and quantify microstructure statistics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microquant_cli::commands;
use microquant_cli::config::RunConfig;
use microquant_cli::report::run_and_write;
use microquant_core::defect::AnalysisConfig;
use microquant_core::spatial::EdgeCorrection;

#[derive(Parser)]
#[command(
    name = "microquant",
    about = "Micrograph segmentation evaluation and microstructure quantification",
    version
)]
struct Cli {
    /// Run configuration file (report command)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory override
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppress progress output
    #[arg(long, global = true, default_value_t = false)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct AnalysisArgs {
    /// Minimum defect area in µm² (strictly greater-than filter)
    #[arg(long, default_value_t = microquant_core::defect::AREA_THRESHOLD_DEFAULT)]
    area_threshold: f64,
    /// Dilation structuring-element half-width (1 = 3x3)
    #[arg(long, default_value_t = 1)]
    dilation_half_width: u32,
    /// Dilation iterations
    #[arg(long, default_value_t = 1)]
    dilation_iterations: u32,
}

impl AnalysisArgs {
    fn to_config(&self) -> AnalysisConfig {
        AnalysisConfig {
            area_threshold_um2: self.area_threshold,
            dilation_half_width: self.dilation_half_width,
            dilation_iterations: self.dilation_iterations,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split, chip, and augment one image/label pair
    Prep {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long, default_value_t = 128)]
        chip_size: u32,
        #[arg(long, default_value_t = 0.8)]
        fraction: f64,
    },
    /// Pixel-level confusion metrics of a prediction against truth
    EvalPixels {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster defects and emit per-defect rows plus summary statistics
    Quantify {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Box IoU of nearest-centroid-matched defects
    Boxiou {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// Ripley K/H curves with Monte-Carlo envelopes
    Ripley {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        /// Comma-separated defect classes (e.g. void,precipitate)
        #[arg(long, default_value = "void,impurity,precipitate")]
        classes: String,
        #[arg(long, default_value_t = 1000)]
        sims: usize,
        #[arg(long, default_value_t = 0.99)]
        quantile: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also emit a strip plot
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Edge correction: translation or none
        #[arg(long, default_value = "translation")]
        correction: String,
        #[arg(long, default_value_t = 64)]
        radii: usize,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
    /// One- or two-sample proportion test
    PropTest {
        #[arg(long)]
        on: u64,
        #[arg(long)]
        total: u64,
        #[arg(long)]
        on2: Option<u64>,
        #[arg(long)]
        total2: Option<u64>,
        /// Null proportion of the one-sample test
        #[arg(long, default_value_t = 0.5)]
        p0: f64,
        /// Disable the Yates continuity correction
        #[arg(long, default_value_t = false)]
        no_continuity: bool,
    },
    /// Density-ratio confidence calibration
    Calibrate {
        #[command(subcommand)]
        action: CalibrateAction,
    },
    /// Generate a synthetic dataset with a ready-to-run report config
    Synth {
        #[arg(long, default_value_t = 3)]
        images: usize,
        /// Also emit 10-trial score stacks for calibration runs
        #[arg(long, default_value_t = false)]
        with_scores: bool,
    },
    /// Run the full pipeline over a configured image set
    #[command(after_help = REPORT_CONFIG_HELP)]
    Report {},
}

const REPORT_CONFIG_HELP: &str = "\
Configuration file (TOML; paths are relative to the file):

  [model]                       # report identification columns
  name = \"external\"             optimizer = \"-\"   loss = \"-\"

  [run]
  seed = 0                      # every stochastic stage derives from this
  out_dir = \"out\"

  [[images]]                    # one block per image (required)
  truth = \"a_truth.png\"  pred = \"a_pred.png\"  meta = \"a_meta.json\"

  [analysis]
  area_threshold_um2 = 0.001888 # minimum defect area (strict >)
  dilation_half_width = 1       # 1 = 3x3 structuring element
  dilation_iterations = 1

  [hough]
  rho_resolution = 1.0          theta_resolution_deg = 1.0
  vote_threshold = 50           min_segment_length = 30   max_gap = 10

  [ripley]
  radii_count = 64              # radii span (0, min(W,H)/4]
  sims = 1000                   # envelope simulations
  quantile = 0.99               # two-sided band: quantile and its mirror
  correction = \"translation\"    # or \"none\"
";

#[derive(Subcommand)]
enum CalibrateAction {
    /// Fit the model from validation scores and truth labels
    Fit {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = microquant_core::calibrate::DEFAULT_K)]
        k: usize,
    },
    /// Apply a fitted model to test scores
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        confidence_png: Option<PathBuf>,
        #[arg(long)]
        pred_png: Option<PathBuf>,
    },
}

/// Usage-shaped failures exit with 1, data-shaped with 2, the rest with 3.
fn classify_error(err: &anyhow::Error) -> u8 {
    let chain = format!("{err:#}");
    let usage_markers = ["requires --config", "must be given together"];
    if usage_markers.iter().any(|m| chain.contains(m)) {
        return 1;
    }
    let data_markers = [
        "not in the palette",
        "differ in size",
        "bad magic",
        "truncated",
        "normalization",
        "No such file",
        "not a defect class",
        "outside",
        "loading",
        "unknown class",
        "unknown edge correction",
        "must be",
        "at least",
        "exceeds",
        "no images configured",
        "NoTrainRegion",
        "no train region",
        "leaves no train region",
    ];
    if data_markers.iter().any(|m| chain.to_lowercase().contains(&m.to_lowercase())) {
        2
    } else {
        3
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Prep { image, labels, meta, chip_size, fraction } => commands::prep(
            &image, &labels, &meta, &out_dir, chip_size, fraction, cli.seed, cli.quiet,
        ),
        Command::EvalPixels { truth, pred, meta, out } => {
            commands::eval_pixels(&truth, &pred, &meta, &out, cli.quiet)
        }
        Command::Quantify { labels, meta, out, analysis } => {
            let hough = microquant_core::boundary::HoughParams::default();
            commands::quantify(
                &labels,
                &meta,
                &out,
                &analysis.to_config(),
                &hough,
                cli.seed,
                cli.quiet,
            )
        }
        Command::Boxiou { truth, pred, meta, out, analysis } => commands::boxiou(
            &truth,
            &pred,
            &meta,
            out.as_deref(),
            &analysis.to_config(),
            cli.quiet,
        ),
        Command::Ripley {
            labels,
            meta,
            classes,
            sims,
            quantile,
            out,
            svg,
            correction,
            radii,
            analysis,
        } => {
            let classes = commands::parse_classes(&classes)?;
            let correction = match correction.as_str() {
                "translation" => EdgeCorrection::Translation,
                "none" => EdgeCorrection::None,
                other => anyhow::bail!("unknown edge correction '{other}'"),
            };
            commands::ripley(
                &labels,
                &meta,
                &classes,
                sims,
                quantile,
                cli.seed,
                &out,
                svg.as_deref(),
                &analysis.to_config(),
                correction,
                radii,
                cli.quiet,
            )
        }
        Command::PropTest { on, total, on2, total2, p0, no_continuity } => {
            let second = match (on2, total2) {
                (Some(n), Some(t)) => Some((n, t)),
                (None, None) => None,
                _ => anyhow::bail!("--on2 and --total2 must be given together"),
            };
            commands::prop_test(on, total, second, p0, !no_continuity)
        }
        Command::Calibrate { action } => match action {
            CalibrateAction::Fit { scores, truth, out, k } => {
                commands::calibrate_fit(&scores, &truth, &out, k, cli.quiet)
            }
            CalibrateAction::Apply {
                model,
                scores,
                truth,
                tau,
                out,
                confidence_png,
                pred_png,
            } => commands::calibrate_apply(
                &model,
                &scores,
                truth.as_deref(),
                tau,
                &out,
                confidence_png.as_deref(),
                pred_png.as_deref(),
                cli.quiet,
            ),
        },
        Command::Synth { images, with_scores } => {
            commands::synth(&out_dir, images, cli.seed, with_scores, cli.quiet)
        }
        Command::Report {} => {
            let config_path = cli
                .config
                .ok_or_else(|| anyhow::anyhow!("report requires --config <run.toml>"))?;
            let mut config = RunConfig::load(&config_path)?;
            if let Some(out) = &cli.out_dir {
                config.run.out_dir = out.clone();
            }
            // a non-default global seed overrides the configured one
            if cli.seed != 0 {
                config.run.seed = cli.seed;
            }
            let out = config.run.out_dir.clone();
            let bundle = run_and_write(&config, &out)?;
            if !cli.quiet {
                println!(
                    "report: {} images -> {} (avg {})",
                    bundle.images.len(),
                    out.display(),
                    bundle
                        .aggregate
                        .avg
                        .0
                        .map(microquant_cli::report::fmt_percent)
                        .unwrap_or_else(|| "undefined".into())
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version requests are successes; everything else is usage
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify_error(&err))
        }
    }
}
