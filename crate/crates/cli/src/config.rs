//! Run configuration: a TOML file of key = value sections selecting the
//! input images and every analysis parameter. All sections except the
//! image list have documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use microquant_core::boundary::HoughParams;
use microquant_core::defect::AnalysisConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelInfo,
    #[serde(default)]
    pub run: RunSection,
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub hough: HoughSection,
    #[serde(default)]
    pub ripley: RipleySection,
}

/// Identification columns of the report tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    #[serde(default = "default_model_name")]
    pub name: String,
    #[serde(default = "default_dash")]
    pub optimizer: String,
    #[serde(default = "default_dash")]
    pub loss: String,
}

fn default_model_name() -> String {
    "external".to_string()
}

fn default_dash() -> String {
    "-".to_string()
}

impl Default for ModelInfo {
    fn default() -> ModelInfo {
        ModelInfo {
            name: default_model_name(),
            optimizer: default_dash(),
            loss: default_dash(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunSection {
    fn default() -> RunSection {
        RunSection { seed: 0, out_dir: default_out_dir() }
    }
}

/// One truth/prediction pair with its metadata sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub truth: PathBuf,
    pub pred: PathBuf,
    pub meta: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub area_threshold_um2: Option<f64>,
    pub dilation_half_width: Option<u32>,
    pub dilation_iterations: Option<u32>,
}

impl AnalysisSection {
    pub fn to_config(&self) -> AnalysisConfig {
        let d = AnalysisConfig::default();
        AnalysisConfig {
            area_threshold_um2: self.area_threshold_um2.unwrap_or(d.area_threshold_um2),
            dilation_half_width: self.dilation_half_width.unwrap_or(d.dilation_half_width),
            dilation_iterations: self.dilation_iterations.unwrap_or(d.dilation_iterations),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoughSection {
    pub rho_resolution: Option<f64>,
    pub theta_resolution_deg: Option<f64>,
    pub vote_threshold: Option<u32>,
    pub min_segment_length: Option<u32>,
    pub max_gap: Option<u32>,
}

impl HoughSection {
    pub fn to_params(&self) -> HoughParams {
        let d = HoughParams::default();
        HoughParams {
            rho_resolution: self.rho_resolution.unwrap_or(d.rho_resolution),
            theta_resolution_deg: self
                .theta_resolution_deg
                .unwrap_or(d.theta_resolution_deg),
            vote_threshold: self.vote_threshold.unwrap_or(d.vote_threshold),
            min_segment_length: self.min_segment_length.unwrap_or(d.min_segment_length),
            max_gap: self.max_gap.unwrap_or(d.max_gap),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RipleySection {
    pub radii_count: usize,
    pub sims: usize,
    pub quantile: f64,
    /// "translation" or "none".
    pub correction: String,
}

impl Default for RipleySection {
    fn default() -> RipleySection {
        RipleySection {
            radii_count: 64,
            sims: 1000,
            quantile: 0.99,
            correction: "translation".to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        // paths in the file are relative to the file's directory
        if let Some(base) = path.parent() {
            for image in &mut config.images {
                for p in [&mut image.truth, &mut image.pred, &mut image.meta] {
                    if p.is_relative() {
                        *p = base.join(&p);
                    }
                }
            }
            if config.run.out_dir.is_relative() {
                config.run.out_dir = base.join(&config.run.out_dir);
            }
        }
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let text = r#"
[[images]]
truth = "a.png"
pred = "b.png"
meta = "m.json"
"#;
        let config: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(config.ripley.sims, 1000);
        assert_eq!(config.ripley.quantile, 0.99);
        assert_eq!(config.model.name, "external");
        assert_eq!(config.analysis.to_config().area_threshold_um2, 0.001888);
        assert_eq!(config.hough.to_params().vote_threshold, 50);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
[[images]]
truth = "a.png"
pred = "b.png"
meta = "m.json"

[ripley]
simz = 100
"#;
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }
}
