//! Flat run configuration. Layers, lowest first: preset defaults, the TOML
//! file given with `--config`, then command-line flags.

use std::path::PathBuf;

use motionauth::authenticator::{AuthMode, ClassifierVariant};
use motionauth::experiment::{ExperimentConfig, ForecasterScope};
use motionauth::nn::{LossWeights, ModelConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `paper` (full size) or `reduced` (desk scale).
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// `fcn` or `tf`.
    pub variant: String,
    /// `no_forecast` or `with_forecast`.
    pub mode: String,
    /// Restricts per-user commands and sweeps; empty means every user.
    pub users: Vec<String>,
    pub window_size: usize,
    pub horizon: usize,
    /// Unset picks the lower median of the overlap grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<usize>,
    /// Sweep rows and columns; empty means the full grid for `mode`.
    pub window_sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    /// Adds the overlap series for (`window_size`, `horizon`) to a sweep.
    pub overlap_sweep: bool,
    pub stride: usize,
    pub validation_fraction: f64,
    pub batch_size: usize,
    pub forecaster_epochs: usize,
    pub classifier_epochs: usize,
    pub forecaster_lr: f64,
    pub fcn_lr: f64,
    pub tf_lr: f64,
    pub lambda_f: f64,
    pub lambda_t: f64,
    /// `per_user` or `global`.
    pub scope: String,
    pub joint: bool,
    pub forecast_impostors: bool,
    pub normalize: bool,
    pub forecaster_d_model: usize,
    pub forecaster_heads: usize,
    pub forecaster_d_head: usize,
    pub forecaster_d_hidden: usize,
    pub forecaster_encoder_layers: usize,
    pub forecaster_decoder_layers: usize,
    pub classifier_d_model: usize,
    pub classifier_heads: usize,
    pub classifier_d_head: usize,
    pub classifier_d_hidden: usize,
    pub classifier_encoder_layers: usize,
    pub fcn_filters: [usize; 3],
    pub fcn_kernels: [usize; 3],
    pub seed: u64,
    /// 0 uses every logical core.
    pub workers: usize,
    pub synth_users: usize,
    pub bench_repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecaster_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_checkpoint: Option<PathBuf>,
    /// Where `eval` looks for checkpoints; defaults to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let base = match name {
            "paper" => ExperimentConfig::paper(ClassifierVariant::Fcn),
            "reduced" => ExperimentConfig::reduced(ClassifierVariant::Fcn),
            _ => return Err(CliError::Config(format!("unknown preset {name:?} (expected paper or reduced)"))),
        };
        let (f, c) = (base.forecaster_model, base.classifier_transformer);
        Ok(RunConfig {
            preset: name.to_string(),
            data: None,
            out: None,
            variant: "fcn".into(),
            mode: "with_forecast".into(),
            users: Vec::new(),
            window_size: 45,
            horizon: 30,
            overlap: base.overlap,
            window_sizes: Vec::new(),
            horizons: Vec::new(),
            overlap_sweep: false,
            stride: base.stride,
            validation_fraction: base.validation_fraction,
            batch_size: base.batch_size,
            forecaster_epochs: base.forecaster_epochs,
            classifier_epochs: base.classifier_epochs,
            forecaster_lr: base.forecaster_learning_rate,
            fcn_lr: base.fcn_learning_rate,
            tf_lr: base.tf_learning_rate,
            lambda_f: base.weights.lambda_f,
            lambda_t: base.weights.lambda_t,
            scope: base.scope.to_string(),
            joint: base.joint,
            forecast_impostors: base.forecast_impostors,
            normalize: base.normalize,
            forecaster_d_model: f.d_model,
            forecaster_heads: f.n_head,
            forecaster_d_head: f.d_k,
            forecaster_d_hidden: f.d_hidden,
            forecaster_encoder_layers: f.n_encoder_layers,
            forecaster_decoder_layers: f.n_decoder_layers,
            classifier_d_model: c.d_model,
            classifier_heads: c.n_head,
            classifier_d_head: c.d_k,
            classifier_d_hidden: c.d_hidden,
            classifier_encoder_layers: c.n_encoder_layers,
            fcn_filters: base.fcn_filters,
            fcn_kernels: base.fcn_kernels,
            seed: base.master_seed,
            workers: 0,
            synth_users: 8,
            bench_repetitions: 100,
            forecaster_checkpoint: None,
            auth_checkpoint: None,
            models_dir: None,
        })
    }

    /// Resolves the layered configuration. `file` is the parsed `--config`
    /// table and `overrides` the flag values, both keyed like the file.
    pub fn resolve(file: Option<Table>, overrides: Table) -> Result<Self, CliError> {
        let preset = [&overrides, file.as_ref().unwrap_or(&Table::new())]
            .iter()
            .find_map(|t| t.get("preset").cloned())
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| CliError::Config("preset must be a string".into())))
            .transpose()?
            .unwrap_or_else(|| "paper".into());
        let mut table = Table::try_from(Self::preset(&preset)?).expect("defaults serialize");
        for layer in file.into_iter().chain(Some(overrides)) {
            table.extend(layer);
        }
        let config: RunConfig =
            Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        config.experiment()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot render config: {e}")))
    }

    /// Digest of the settings that affect results (not `out` or `workers`).
    pub fn hash(&self) -> Result<String, CliError> {
        let canonical = RunConfig { out: None, workers: 0, ..self.clone() };
        Ok(format!("{:016x}", motionauth::seed::label(&canonical.to_toml()?)))
    }

    pub fn variant(&self) -> Result<ClassifierVariant, CliError> {
        Ok(self.variant.parse()?)
    }

    pub fn mode(&self) -> Result<AuthMode, CliError> {
        Ok(self.mode.parse()?)
    }

    /// Horizon of per-user commands: 0 without forecasting.
    pub fn effective_horizon(&self) -> Result<usize, CliError> {
        match self.mode()? {
            AuthMode::NoForecast => Ok(0),
            AuthMode::WithForecast if self.horizon == 0 => {
                Err(CliError::Config("mode with_forecast needs horizon > 0 (or mode = \"no_forecast\")".into()))
            }
            AuthMode::WithForecast => Ok(self.horizon),
        }
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let model = |d_model, n_head, d_head, d_hidden, enc, dec| ModelConfig {
            d_model,
            n_head,
            d_q: d_head,
            d_k: d_head,
            d_v: d_head,
            d_hidden,
            n_encoder_layers: enc,
            n_decoder_layers: dec,
            dropout_rate: 0.0,
        };
        let scope: ForecasterScope = self.scope.parse()?;
        self.mode()?;
        let config = ExperimentConfig {
            variant: self.variant()?,
            forecaster_model: model(
                self.forecaster_d_model,
                self.forecaster_heads,
                self.forecaster_d_head,
                self.forecaster_d_hidden,
                self.forecaster_encoder_layers,
                self.forecaster_decoder_layers,
            ),
            classifier_transformer: model(
                self.classifier_d_model,
                self.classifier_heads,
                self.classifier_d_head,
                self.classifier_d_hidden,
                self.classifier_encoder_layers,
                0,
            ),
            fcn_filters: self.fcn_filters,
            fcn_kernels: self.fcn_kernels,
            fcn_learning_rate: self.fcn_lr,
            tf_learning_rate: self.tf_lr,
            forecaster_learning_rate: self.forecaster_lr,
            forecaster_epochs: self.forecaster_epochs,
            classifier_epochs: self.classifier_epochs,
            batch_size: self.batch_size,
            stride: self.stride,
            validation_fraction: self.validation_fraction,
            weights: LossWeights { lambda_f: self.lambda_f, lambda_t: self.lambda_t },
            scope,
            joint: self.joint,
            forecast_impostors: self.forecast_impostors,
            normalize: self.normalize,
            overlap: self.overlap,
            master_seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parses a `key=value` override. The value is read as a TOML value and
/// falls back to a bare string.
pub fn parse_assignment(text: &str) -> Result<(String, Value), CliError> {
    let (key, raw) =
        text.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {text:?}")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}
