//! End-to-end per-user runs: split, forecaster, classifier, day-2 scoring.

use std::fmt;
use std::str::FromStr;

use motionauth_nn::{LossWeights, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::authenticator::{
    score_split, train_classifier, AuthModel, ClassifierConfig, ClassifierTraining, ClassifierVariant, Pipeline,
};
use crate::data::{build_split, slide_windows, Day, Label, LabeledWindow, Session, SplitOptions, WindowSpec};
use crate::error::{CoreError, Result};
use crate::eval::{compute_eer, ScoreRow, ScoreSet};
use crate::forecaster::{
    evaluate_forecaster_mse, train_forecaster, train_forecaster_on, ForecastSpec, Forecaster, ForecasterTraining,
};
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForecasterScope {
    /// One forecaster per user, trained on that user's day-1 windows.
    PerUser,
    /// One forecaster per cell, trained on every user's day-1 windows.
    Global,
}

impl fmt::Display for ForecasterScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForecasterScope::PerUser => "per_user",
            ForecasterScope::Global => "global",
        })
    }
}

impl FromStr for ForecasterScope {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_user" | "per-user" => Ok(ForecasterScope::PerUser),
            "global" => Ok(ForecasterScope::Global),
            _ => Err(CoreError::Config(format!("unknown forecaster scope {s:?} (expected per_user or global)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: ClassifierVariant,
    pub forecaster_model: ModelConfig,
    pub classifier_transformer: ModelConfig,
    pub fcn_filters: [usize; 3],
    pub fcn_kernels: [usize; 3],
    pub fcn_learning_rate: f64,
    pub tf_learning_rate: f64,
    pub forecaster_learning_rate: f64,
    pub forecaster_epochs: usize,
    pub classifier_epochs: usize,
    pub batch_size: usize,
    pub stride: usize,
    pub validation_fraction: f64,
    pub weights: LossWeights,
    pub scope: ForecasterScope,
    pub joint: bool,
    pub forecast_impostors: bool,
    pub normalize: bool,
    /// `None` picks the lower median of the overlap grid.
    pub overlap: Option<usize>,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn forecaster_default() -> ModelConfig {
        ModelConfig {
            d_model: 512,
            n_head: 8,
            d_q: 64,
            d_k: 64,
            d_v: 64,
            d_hidden: 2048,
            n_encoder_layers: 3,
            n_decoder_layers: 1,
            dropout_rate: 0.0,
        }
    }

    /// Full-size configuration.
    pub fn paper(variant: ClassifierVariant) -> Self {
        ExperimentConfig {
            variant,
            forecaster_model: Self::forecaster_default(),
            classifier_transformer: ClassifierConfig::transformer_default(),
            fcn_filters: ClassifierConfig::FCN_FILTERS,
            fcn_kernels: ClassifierConfig::FCN_KERNELS,
            fcn_learning_rate: ClassifierConfig::FCN_LR,
            tf_learning_rate: ClassifierConfig::TF_LR,
            forecaster_learning_rate: 1e-4,
            forecaster_epochs: 200,
            classifier_epochs: 200,
            batch_size: 32,
            stride: WindowSpec::DEFAULT_STRIDE,
            validation_fraction: 0.2,
            weights: LossWeights::default(),
            scope: ForecasterScope::PerUser,
            joint: false,
            forecast_impostors: true,
            normalize: false,
            overlap: None,
            master_seed: 0,
        }
    }

    /// Desk-scale configuration: narrow models, 20 epochs, faster learning
    /// rates to compensate for the short schedule.
    pub fn reduced(variant: ClassifierVariant) -> Self {
        let small = ModelConfig {
            d_model: 64,
            n_head: 4,
            d_q: 16,
            d_k: 16,
            d_v: 16,
            d_hidden: 128,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            dropout_rate: 0.0,
        };
        ExperimentConfig {
            forecaster_model: small,
            classifier_transformer: ModelConfig { n_encoder_layers: 2, n_decoder_layers: 0, ..small },
            fcn_filters: [32, 64, 32],
            fcn_learning_rate: 1e-3,
            tf_learning_rate: 1e-3,
            forecaster_learning_rate: 1e-3,
            forecaster_epochs: 20,
            classifier_epochs: 20,
            ..Self::paper(variant)
        }
    }

    pub fn classifier_config(&self, input_len: usize) -> ClassifierConfig {
        ClassifierConfig {
            variant: self.variant,
            fcn_filters: self.fcn_filters,
            fcn_kernels: self.fcn_kernels,
            transformer: self.classifier_transformer,
            input_len,
            learning_rate: match self.variant {
                ClassifierVariant::Fcn => self.fcn_learning_rate,
                ClassifierVariant::Transformer => self.tf_learning_rate,
            },
        }
    }

    pub fn forecast_spec(&self, window_size: usize, horizon: usize) -> Result<ForecastSpec> {
        match self.overlap {
            Some(o) => ForecastSpec::new(window_size, o, horizon),
            None => ForecastSpec::with_median_overlap(window_size, horizon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier_config(1).validate()?;
        self.forecaster_model.validate()?;
        self.weights.validate()?;
        if self.stride == 0 || self.batch_size == 0 || self.forecaster_epochs == 0 || self.classifier_epochs == 0 {
            return Err(CoreError::Config("stride, batch size and epoch counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(CoreError::Config("validation fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn forecaster_training(&self, seed: u64) -> ForecasterTraining {
        ForecasterTraining {
            epochs: self.forecaster_epochs,
            batch_size: self.batch_size,
            learning_rate: self.forecaster_learning_rate,
            weights: self.weights,
            seed,
        }
    }

    pub fn classifier_training(&self, seed: u64) -> ClassifierTraining {
        ClassifierTraining {
            epochs: self.classifier_epochs,
            batch_size: self.batch_size,
            seed,
            weights: self.weights,
            forecast_impostors: self.forecast_impostors,
            normalize: self.normalize,
        }
    }

    /// Stable digest of the configuration, used to validate cached cells.
    pub fn fingerprint(&self) -> u64 {
        seed::label(&serde_json::to_string(self).expect("config serializes"))
    }
}

/// Seeds of one (user, window size, horizon) job. Splits and classifier
/// initializations do not depend on the horizon, so every horizon of a row
/// sees the same windows and starts from the same weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JobSeeds {
    pub split: u64,
    pub forecaster: u64,
    pub classifier_init: u64,
    pub classifier_train: u64,
}

impl JobSeeds {
    pub fn new(master: u64, user: &str, window_size: usize, horizon: usize) -> Self {
        let u = seed::label(user);
        let ws = window_size as u64;
        JobSeeds {
            split: seed::derive(master, &[stream::SPLIT, u, ws]),
            forecaster: seed::derive(master, &[stream::FORECASTER, u, ws, horizon as u64]),
            classifier_init: seed::derive(master, &[stream::CLASSIFIER, u, ws]),
            classifier_train: seed::derive(master, &[stream::CLASSIFIER, u, ws, 1]),
        }
    }

    pub fn global_forecaster(master: u64, window_size: usize, horizon: usize) -> u64 {
        seed::derive(master, &[stream::FORECASTER, window_size as u64, horizon as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRun {
    pub user: String,
    pub eer: f64,
    pub threshold: f64,
    pub best_epoch: Option<usize>,
    /// Day-2 position MSE of the forecaster (forecasting cells only).
    pub forecast_mse: Option<f64>,
    pub scores: Vec<ScoreRow>,
}

/// Genuine day-1 windows of every user, for a shared forecaster.
pub fn day1_windows(sessions: &[Session], window_size: usize, stride: usize) -> Result<Vec<LabeledWindow>> {
    let spec = WindowSpec::new(window_size, stride)?;
    let mut out = Vec::new();
    for s in sessions.iter().filter(|s| s.day == Day::One) {
        for (start, _) in slide_windows(s, spec)? {
            let id = out.len();
            out.push(LabeledWindow::cut(s, start, window_size, Label::Genuine, id));
        }
    }
    Ok(out)
}

pub fn train_global_forecaster(
    sessions: &[Session],
    config: &ExperimentConfig,
    spec: &ForecastSpec,
) -> Result<Forecaster<f32>> {
    let seed = JobSeeds::global_forecaster(config.master_seed, spec.l_window, spec.l_forecasting);
    let windows = day1_windows(sessions, spec.l_window, config.stride)?;
    let refs: Vec<&LabeledWindow> = windows.iter().collect();
    let mut model = Forecaster::new(config.forecaster_model, seed)?;
    train_forecaster_on(&mut model, &refs, spec, &config.forecaster_training(seed))?;
    Ok(model)
}

/// Trains and scores one user for one cell. `horizon == 0` means no
/// forecasting. `shared` supplies a pre-trained global forecaster.
pub fn run_user(
    sessions: &[Session],
    user: &str,
    window_size: usize,
    horizon: usize,
    config: &ExperimentConfig,
    shared: Option<&Forecaster<f32>>,
) -> Result<UserRun> {
    let seeds = JobSeeds::new(config.master_seed, user, window_size, horizon);
    let split = build_split(
        sessions,
        WindowSpec::new(window_size, config.stride)?,
        user,
        SplitOptions { validation_fraction: config.validation_fraction, seed: seeds.split },
    )?;
    let mut model = AuthModel::new(user, config.classifier_config(window_size + horizon), seeds.classifier_init)?;
    let training = config.classifier_training(seeds.classifier_train);

    let (forecaster, spec) = if horizon == 0 {
        (None, None)
    } else {
        let spec = config.forecast_spec(window_size, horizon)?;
        let mut f = match shared {
            Some(f) => f.clone(),
            None => {
                let mut f = Forecaster::new(config.forecaster_model, seeds.forecaster)?;
                train_forecaster(&mut f, &split, &spec, &config.forecaster_training(seeds.forecaster))?;
                f
            }
        };
        if config.joint {
            train_classifier(&mut model, &split, Pipeline::Joint { forecaster: &mut f, spec }, &training)?;
        } else {
            train_classifier(&mut model, &split, Pipeline::Staged { forecaster: &f, spec }, &training)?;
        }
        (Some(f), Some(spec))
    };
    if horizon == 0 {
        train_classifier(&mut model, &split, Pipeline::NoForecast, &training)?;
    }

    let fc = forecaster.as_ref().zip(spec.as_ref());
    let scores = score_split(&model, &split.test, fc, config.forecast_impostors)?;
    let set =
        ScoreSet::from_labeled(split.test.iter().map(|w| w.label).zip(scores.iter().map(|s| s.genuine_probability)));
    let point = compute_eer(&set)?;
    let forecast_mse = match fc {
        Some((f, spec)) => {
            let genuine: Vec<&LabeledWindow> = split.test.iter().filter(|w| w.label.is_genuine()).collect();
            evaluate_forecaster_mse(f, &genuine, spec).ok()
        }
        None => None,
    };
    let rows = split
        .test
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, (w, s))| ScoreRow {
            user: user.to_string(),
            window_id: i,
            label: w.label.value() as u8,
            genuine_probability: s.genuine_probability,
        })
        .collect();
    Ok(UserRun {
        user: user.to_string(),
        eer: point.eer,
        threshold: point.threshold,
        best_epoch: model.metadata.as_ref().and_then(|m| m.best_epoch),
        forecast_mse,
        scores: rows,
    })
}
