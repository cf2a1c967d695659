//! Run settings: defaults, then a flat JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use temppnet::autodiff::AdamConfig;
use temppnet::encoder::EncoderConfig;
use temppnet::model::{Ablation, ModelConfig, TrainConfig};
use temppnet::prototype::{LikelihoodScale, PrototypeConfig};
use temppnet::synth::SynthConfig;

use crate::CliError;

/// Every knob of every subcommand. Written next to the outputs so a run can
/// be repeated with `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub patient: Option<String>,
    pub seed: u64,
    pub epochs: usize,
    pub patients: usize,
    pub balance: f64,
    pub window_days: f64,
    pub rate_hz: u32,
    pub ablation: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Recording rate of generated corpora.
    pub synth_rate_hz: u32,
    /// `compact` or `full` encoder widths.
    pub encoder: String,
    pub final_bn_gamma: f64,
    pub num_symptoms: usize,
    pub trends_per_class: usize,
    pub time_dim: usize,
    pub horizon_days: f64,
    pub likelihood_scale: LikelihoodScale,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub augment: bool,
    pub samples_per_day: usize,
    /// Seeds per sweep configuration, counted up from `seed`.
    pub runs: usize,
    pub windows_weeks: Vec<u32>,
    pub rates_hz: Vec<u32>,
}

impl Default for Settings {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            data: None,
            out: None,
            checkpoint: None,
            patient: None,
            seed: 0,
            epochs: train.epochs,
            patients: 200,
            balance: 0.5,
            window_days: model.window_days,
            rate_hz: model.rate_hz,
            ablation: Ablation::None.name().into(),
            precision: None,
            recall: None,
            synth_rate_hz: SynthConfig::default().rate_hz,
            encoder: "compact".into(),
            final_bn_gamma: 0.1,
            num_symptoms: model.prototypes.num_symptoms,
            trends_per_class: model.prototypes.trends_per_class,
            time_dim: model.prototypes.time_dim,
            horizon_days: model.prototypes.horizon_days,
            likelihood_scale: model.prototypes.likelihood_scale,
            lambda_s: model.lambda_s,
            lambda_t: model.lambda_t,
            learning_rate: train.adam.lr,
            batch_size: train.batch_size,
            patience: train.patience,
            augment: train.augment,
            samples_per_day: 4,
            runs: 3,
            windows_weeks: vec![2, 4],
            rates_hz: vec![10, 20],
        }
    }
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("invalid config {}: {e}", path.display())))
    }

    pub fn ablation(&self) -> Result<Ablation, CliError> {
        self.ablation.parse().map_err(|e| CliError::Usage(format!("{e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let widths = match self.encoder.as_str() {
            "compact" => EncoderConfig::compact(),
            "full" => EncoderConfig::default(),
            other => return Err(CliError::Usage(format!("unknown encoder `{other}` (expected compact or full)"))),
        };
        let config = ModelConfig {
            encoder: EncoderConfig {
                final_bn_gamma: self.final_bn_gamma,
                ..widths
            },
            prototypes: PrototypeConfig {
                num_symptoms: self.num_symptoms,
                trends_per_class: self.trends_per_class,
                time_dim: self.time_dim,
                horizon_days: self.horizon_days,
                likelihood_scale: self.likelihood_scale,
                ..PrototypeConfig::default()
            },
            lambda_s: self.lambda_s,
            lambda_t: self.lambda_t,
            window_days: self.window_days,
            rate_hz: self.rate_hz,
            ablation: self.ablation()?,
        };
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            seed: self.seed,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.learning_rate,
                ..AdamConfig::default()
            },
            patience: self.patience,
            augment: self.augment,
            ..TrainConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            window_days: self.window_days,
            rate_hz: self.synth_rate_hz,
            ..SynthConfig::default()
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("settings serialize");
        crate::write_file(&dir.join("config.json"), text + "\n")
    }
}
