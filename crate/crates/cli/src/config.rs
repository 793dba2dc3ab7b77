//! TOML run configuration. Unknown keys are rejected so that a typo fails
//! loudly instead of silently running a different experiment.

use std::path::Path;

use serde::Deserialize;
use waveformer::attention::UpsampleMode;
use waveformer::model::{ModelConfig, Variant};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub input_extent: usize,
    #[serde(default = "default_depths")]
    pub stage_depths: [usize; 4],
    pub stage_dwt_levels: [usize; 4],
    #[serde(default = "default_variant")]
    pub variant: String,
    pub window: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub heads: [usize; 4],
    #[serde(default = "default_wavelet")]
    pub wavelet: String,
    #[serde(default = "default_upsample")]
    pub upsample: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_data_dir")]
    pub dir: String,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub bins_cm3: Vec<f64>,
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
}

fn default_depths() -> [usize; 4] {
    [2, 2, 2, 2]
}
fn default_variant() -> String {
    "residual-up".into()
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_wavelet() -> String {
    "haar".into()
}
fn default_upsample() -> String {
    "wavelet".into()
}
fn default_seed() -> u64 {
    7
}
fn default_iterations() -> usize {
    500
}
fn default_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_out_dir() -> String {
    "out".into()
}
fn default_data_dir() -> String {
    "data".into()
}
fn default_n_train() -> usize {
    64
}
fn default_n_val() -> usize {
    16
}
fn default_metrics() -> Vec<String> {
    vec!["dice".into(), "hd95".into()]
}
fn default_spacing() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl Default for RunSection {
    fn default() -> Self {
        toml::from_str("").expect("empty run section")
    }
}
impl Default for DataSection {
    fn default() -> Self {
        toml::from_str("").expect("empty data section")
    }
}
impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("empty eval section")
    }
}

pub fn parse_upsample(name: &str) -> Result<UpsampleMode, CliError> {
    match name {
        "wavelet" => Ok(UpsampleMode::Wavelet),
        "nearest" => Ok(UpsampleMode::Nearest),
        other => Err(CliError::Config(format!(
            "unknown upsample mode '{other}' (expected wavelet or nearest)"
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            err: e,
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for m in &cfg.eval.metrics {
            if m != "dice" && m != "hd95" {
                return Err(CliError::Config(format!(
                    "unknown metric '{m}' (expected dice or hd95)"
                )));
            }
        }
        Ok(cfg)
    }

    /// Builds and validates the model description.
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let cfg = ModelConfig {
            in_channels: m.in_channels,
            num_classes: m.num_classes,
            base_channels: m.base_channels,
            input_extent: m.input_extent,
            stage_depths: m.stage_depths,
            stage_dwt_levels: m.stage_dwt_levels,
            variant: Variant::parse(&m.variant)?,
            window: m.window,
            mlp_ratio: m.mlp_ratio,
            heads: m.heads,
            wavelet: m.wavelet.clone(),
            upsample: parse_upsample(&m.upsample)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
