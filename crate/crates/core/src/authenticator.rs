//! Per-user genuine/impostor classifiers over raw or forecast-extended
//! windows.

use std::fmt;
use std::str::FromStr;

use log::info;
use motionauth_nn::{
    positional_encoding, AdamConfig, AdamState, BatchStats, Conv1dBlock, Ctx, EncoderLayer, Graph, Initializer, Linear,
    LossWeights, ModelConfig, ParamStore, Real, Tensor, Var, BCE_EPS,
};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, FeatureScaler, Label, LabeledWindow, N_FEATURES, N_POSITION};
use crate::error::{CoreError, Result};
use crate::eval::{compute_eer, ScoreSet};
use crate::forecaster::{batch_tensor, forecast_loss, ForecastOutput, ForecastSpec, Forecaster};
use crate::seed;

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassifierVariant {
    Fcn,
    Transformer,
}

impl fmt::Display for ClassifierVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierVariant::Fcn => "fcn",
            ClassifierVariant::Transformer => "tf",
        })
    }
}

impl FromStr for ClassifierVariant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" => Ok(ClassifierVariant::Fcn),
            "tf" | "transformer" => Ok(ClassifierVariant::Transformer),
            _ => Err(CoreError::Config(format!("unknown classifier variant {s:?} (expected fcn or tf)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuthMode {
    NoForecast,
    WithForecast,
}

impl fmt::Display for AuthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuthMode::NoForecast => "no_forecast",
            AuthMode::WithForecast => "with_forecast",
        })
    }
}

impl FromStr for AuthMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_forecast" | "no-forecast" => Ok(AuthMode::NoForecast),
            "with_forecast" | "with-forecast" => Ok(AuthMode::WithForecast),
            _ => Err(CoreError::Config(format!("unknown mode {s:?} (expected no_forecast or with_forecast)"))),
        }
    }
}

/// Classifier architecture. The transformer variant has positional encoding
/// and no temporal encoding; there is no switch for the latter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub variant: ClassifierVariant,
    pub fcn_filters: [usize; 3],
    pub fcn_kernels: [usize; 3],
    pub transformer: ModelConfig,
    pub input_len: usize,
    pub learning_rate: f64,
}

impl ClassifierConfig {
    pub const FCN_FILTERS: [usize; 3] = [128, 256, 128];
    pub const FCN_KERNELS: [usize; 3] = [8, 5, 3];
    pub const FCN_LR: f64 = 1e-3;
    pub const TF_LR: f64 = 1e-4;

    pub fn transformer_default() -> ModelConfig {
        ModelConfig {
            d_model: 512,
            n_head: 8,
            d_q: 64,
            d_k: 64,
            d_v: 64,
            d_hidden: 2048,
            n_encoder_layers: 2,
            n_decoder_layers: 0,
            dropout_rate: 0.0,
        }
    }

    pub fn new(variant: ClassifierVariant, input_len: usize) -> Self {
        ClassifierConfig {
            variant,
            fcn_filters: Self::FCN_FILTERS,
            fcn_kernels: Self::FCN_KERNELS,
            transformer: Self::transformer_default(),
            input_len,
            learning_rate: match variant {
                ClassifierVariant::Fcn => Self::FCN_LR,
                ClassifierVariant::Transformer => Self::TF_LR,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 {
            return Err(CoreError::Config("classifier input length must be positive".into()));
        }
        AdamConfig::with_lr(self.learning_rate).validate()?;
        match self.variant {
            ClassifierVariant::Fcn => {
                if self.fcn_filters.contains(&0) || self.fcn_kernels.contains(&0) {
                    return Err(CoreError::Config("FCN filters and kernels must be positive".into()));
                }
            }
            ClassifierVariant::Transformer => {
                self.transformer.validate()?;
                if self.transformer.n_encoder_layers == 0 {
                    return Err(CoreError::Config("transformer classifier needs an encoder layer".into()));
                }
            }
        }
        Ok(())
    }
}

enum Body {
    Fcn { blocks: Vec<Conv1dBlock>, head: Linear },
    Transformer { embed: Linear, layers: Vec<EncoderLayer>, head: Linear },
}

pub struct Classifier<T: Real = f32> {
    pub config: ClassifierConfig,
    pub store: ParamStore<T>,
    body: Body,
}

impl<T: Real> Clone for Classifier<T> {
    fn clone(&self) -> Self {
        let mut out = Classifier::new(self.config, 0).expect("config already validated");
        out.store.load_from(&self.store).expect("same layout");
        out
    }
}

impl<T: Real> Classifier<T> {
    pub fn new(config: ClassifierConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(init_seed);
        let body = match config.variant {
            ClassifierVariant::Fcn => {
                let mut c_in = N_FEATURES;
                let mut blocks = Vec::new();
                for (i, (&f, &k)) in config.fcn_filters.iter().zip(&config.fcn_kernels).enumerate() {
                    blocks.push(Conv1dBlock::new(&mut store, &mut init, &format!("fcn.block{i}"), c_in, f, k)?);
                    c_in = f;
                }
                let head = Linear::new(&mut store, &mut init, "fcn.head", c_in, 2, true);
                Body::Fcn { blocks, head }
            }
            ClassifierVariant::Transformer => {
                let cfg = config.transformer;
                let embed = Linear::new(&mut store, &mut init, "tf.embed", N_FEATURES, cfg.d_model, true);
                let layers = (0..cfg.n_encoder_layers)
                    .map(|i| EncoderLayer::new(&mut store, &mut init, &format!("tf.layer{i}"), &cfg))
                    .collect();
                let head = Linear::new(&mut store, &mut init, "tf.head", cfg.d_model, 2, true);
                Body::Transformer { embed, layers, head }
            }
        };
        Ok(Classifier { config, store, body })
    }

    /// `x: [B, L, 4]` -> softmax probabilities `[B, 2]` (column 1 = genuine),
    /// plus per-block batch statistics when training an FCN.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut Ctx) -> Result<(Var, Vec<BatchStats<T>>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.config.input_len || shape[2] != N_FEATURES {
            return Err(CoreError::Shape(format!(
                "classifier expects [B, {}, {N_FEATURES}], got {shape:?}",
                self.config.input_len
            )));
        }
        let mut stats = Vec::new();
        let logits = match &self.body {
            Body::Fcn { blocks, head } => {
                let mut h = x;
                for block in blocks {
                    let (y, st) = block.forward(g, &self.store, h, ctx.training)?;
                    stats.extend(st);
                    h = y;
                }
                let pooled = g.mean_axis(h, 1)?;
                head.forward(g, &self.store, pooled)?
            }
            Body::Transformer { embed, layers, head } => {
                let e = embed.forward(g, &self.store, x)?;
                let pe = g.constant(positional_encoding(shape[1], self.config.transformer.d_model)?);
                let mut h = g.add(e, pe)?;
                h = ctx.dropout(g, h)?;
                for layer in layers {
                    h = layer.forward(g, &self.store, h, ctx)?;
                }
                let pooled = g.mean_axis(h, 1)?;
                head.forward(g, &self.store, pooled)?
            }
        };
        Ok((g.softmax(logits), stats))
    }

    /// Folds training batch statistics into the FCN running averages.
    pub fn update_running(&mut self, stats: &[BatchStats<T>], count: usize) {
        if let Body::Fcn { blocks, .. } = &self.body {
            for (block, st) in blocks.iter().zip(stats) {
                block.update_running(&mut self.store, st, count);
            }
        }
    }

    /// Inference-mode class probabilities `[p_impostor, p_genuine]` per input.
    pub fn predict(&self, inputs: &[ArrayView2<'_, f64>]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(batch_tensor(chunk)?);
            let (p, _) = self.forward(&mut g, x, &mut Ctx::eval())?;
            out.extend(g.value(p).data().chunks(2).map(|r| [r[0].as_f64(), r[1].as_f64()]));
        }
        Ok(out)
    }
}

/// Window rows followed by forecast rows (positions plus trigger probability).
pub fn concat_forecast(window: ArrayView2<'_, f64>, forecast: &ForecastOutput) -> Result<Array2<f64>> {
    if window.ncols() != N_FEATURES
        || forecast.positions.ncols() != N_POSITION
        || forecast.positions.nrows() != forecast.len()
    {
        return Err(CoreError::Shape(format!(
            "cannot join a {}-feature window with a {}x{} forecast",
            window.ncols(),
            forecast.positions.nrows(),
            forecast.positions.ncols()
        )));
    }
    let tail = forecast.as_matrix();
    let head = window.view();
    Ok(concatenate(Axis(0), &[head, tail.view()]).expect("column counts agree"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuthScore {
    pub genuine_probability: f64,
    pub impostor_probability: f64,
}

impl AuthScore {
    pub fn decision(&self, threshold: f64) -> Decision {
        authenticate(self, threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    Reject,
}

/// Accept iff the genuine probability is at least `threshold`.
pub fn authenticate(score: &AuthScore, threshold: f64) -> Decision {
    if score.genuine_probability >= threshold {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    /// Epoch whose parameters were kept (lowest validation EER).
    pub best_epoch: Option<usize>,
    pub split_fingerprint: u64,
    pub mode: AuthMode,
    pub spec: Option<ForecastSpec>,
}

#[derive(Clone)]
pub struct AuthModel {
    pub user_id: String,
    pub classifier: Classifier<f32>,
    pub scaler: Option<FeatureScaler>,
    pub metadata: Option<TrainingMetadata>,
}

impl AuthModel {
    pub fn new(user_id: impl Into<String>, config: ClassifierConfig, init_seed: u64) -> Result<Self> {
        Ok(AuthModel {
            user_id: user_id.into(),
            classifier: Classifier::new(config, init_seed)?,
            scaler: None,
            metadata: None,
        })
    }

    fn scaled(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut x = input.to_owned();
        if let Some(s) = &self.scaler {
            s.apply(&mut x);
        }
        x
    }

    pub fn score_many(&self, inputs: &[Array2<f64>]) -> Result<Vec<AuthScore>> {
        let scaled: Vec<Array2<f64>> = inputs.iter().map(|x| self.scaled(x.view())).collect();
        let views: Vec<_> = scaled.iter().map(|x| x.view()).collect();
        Ok(self
            .classifier
            .predict(&views)?
            .into_iter()
            .map(|[i, g]| AuthScore { genuine_probability: g, impostor_probability: i })
            .collect())
    }
}

/// Scores one prepared input (window, or window followed by its forecast).
pub fn classify_window(model: &AuthModel, input: ArrayView2<'_, f64>) -> Result<AuthScore> {
    if input.nrows() != model.classifier.config.input_len {
        return Err(CoreError::Shape(format!(
            "input has {} rows, model expects {}",
            input.nrows(),
            model.classifier.config.input_len
        )));
    }
    Ok(model.score_many(&[input.to_owned()])?.remove(0))
}

/// How classifier inputs are produced.
pub enum Pipeline<'a> {
    NoForecast,
    /// Frozen, already-trained forecaster.
    Staged {
        forecaster: &'a Forecaster<f32>,
        spec: ForecastSpec,
    },
    /// Forecaster updated together with the classifier on the composite loss.
    Joint {
        forecaster: &'a mut Forecaster<f32>,
        spec: ForecastSpec,
    },
}

impl Pipeline<'_> {
    pub fn mode(&self) -> AuthMode {
        match self {
            Pipeline::NoForecast => AuthMode::NoForecast,
            _ => AuthMode::WithForecast,
        }
    }

    pub fn spec(&self) -> Option<ForecastSpec> {
        match self {
            Pipeline::NoForecast => None,
            Pipeline::Staged { spec, .. } | Pipeline::Joint { spec, .. } => Some(*spec),
        }
    }

    fn forecaster(&self) -> Option<&Forecaster<f32>> {
        match self {
            Pipeline::NoForecast => None,
            Pipeline::Staged { forecaster, .. } => Some(forecaster),
            Pipeline::Joint { forecaster, .. } => Some(forecaster),
        }
    }
}

/// Classifier inputs for `windows`. With a forecaster, each window gets its
/// forecast appended. When `forecast_impostors` is off, impostor windows
/// take their recorded continuation instead (falling back to the forecast
/// near the end of a session).
pub fn prepare_inputs(
    windows: &[LabeledWindow],
    forecaster: Option<(&Forecaster<f32>, &ForecastSpec)>,
    forecast_impostors: bool,
) -> Result<Vec<Array2<f64>>> {
    let Some((model, spec)) = forecaster else {
        return Ok(windows.iter().map(|w| w.values.clone()).collect());
    };
    let h = spec.l_forecasting;
    let views: Vec<_> = windows.iter().map(|w| w.values.view()).collect();
    let starts: Vec<_> = windows.iter().map(|w| w.start_timestamp).collect();
    let forecasts = model.forecast_batch(&views, &starts, spec)?;
    windows
        .iter()
        .zip(&forecasts)
        .map(|(w, f)| match w.future(h) {
            Some(truth) if !forecast_impostors && w.label == Label::Impostor => {
                Ok(concatenate(Axis(0), &[w.values.view(), truth]).expect("column counts agree"))
            }
            _ => concat_forecast(w.values.view(), f),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub forecast_impostors: bool,
    /// Per-channel z-score of the position channels, fitted on training inputs.
    pub normalize: bool,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            epochs: 200,
            batch_size: 32,
            seed: 0,
            weights: LossWeights::default(),
            forecast_impostors: true,
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainReport {
    /// Mean batch loss per epoch (pure BCE unless training jointly).
    pub loss_trace: Vec<f64>,
    /// Validation EER per epoch; empty without a validation set.
    pub validation_eer: Vec<f64>,
    pub best_epoch: Option<usize>,
}

fn label_tensor<T: Real>(windows: &[&LabeledWindow]) -> Tensor<T> {
    Tensor::new(&[windows.len(), 1], windows.iter().map(|w| T::of(w.label.value())).collect()).expect("finite labels")
}

fn validation_eer(model: &AuthModel, inputs: &[Array2<f64>], windows: &[LabeledWindow]) -> Result<f64> {
    let scores = model.score_many(inputs)?;
    let set = ScoreSet::from_labeled(windows.iter().map(|w| w.label).zip(scores.iter().map(|s| s.genuine_probability)));
    Ok(compute_eer(&set)?.eer)
}

/// Validation EER, epoch, classifier parameters and (joint only) forecaster
/// parameters of the best epoch so far.
type BestEpoch = (f64, usize, ParamStore<f32>, Option<ParamStore<f32>>);

/// Trains `model` on `split.train`, records per-epoch validation EER and
/// keeps the parameters of the best epoch (earliest on ties).
pub fn train_classifier(
    model: &mut AuthModel,
    split: &DatasetSplit,
    mut pipeline: Pipeline<'_>,
    settings: &ClassifierTraining,
) -> Result<ClassifierTrainReport> {
    if settings.epochs == 0 || settings.batch_size == 0 {
        return Err(CoreError::Config("epochs and batch size must be positive".into()));
    }
    let n_imp = split.train.iter().filter(|w| !w.label.is_genuine()).count();
    if n_imp == 0 || n_imp == split.train.len() {
        return Err(CoreError::Training(format!(
            "split for {} needs both genuine and impostor windows",
            split.user_id
        )));
    }
    let spec = pipeline.spec();
    let expected_len = split.spec.size + spec.map_or(0, |s| s.l_forecasting);
    if let Some(s) = &spec {
        if s.l_window != split.spec.size {
            return Err(CoreError::Config(format!(
                "forecast spec window {} differs from split window {}",
                s.l_window, split.spec.size
            )));
        }
    }
    if model.classifier.config.input_len != expected_len {
        return Err(CoreError::Config(format!(
            "classifier input length {} does not match {expected_len}",
            model.classifier.config.input_len
        )));
    }

    let joint = matches!(pipeline, Pipeline::Joint { .. });
    if joint && settings.normalize {
        return Err(CoreError::Config("feature normalization is not supported with joint training".into()));
    }
    let staged_inputs = |p: &Pipeline<'_>, windows: &[LabeledWindow]| {
        prepare_inputs(windows, p.forecaster().zip(spec.as_ref()), settings.forecast_impostors)
    };
    let mut train_inputs = staged_inputs(&pipeline, &split.train)?;
    if settings.normalize {
        model.scaler = Some(FeatureScaler::fit(train_inputs.iter())?);
    }
    if let Some(s) = &model.scaler {
        train_inputs.iter_mut().for_each(|x| s.apply(x));
    }
    let mut val_inputs =
        if split.validation.is_empty() { Vec::new() } else { staged_inputs(&pipeline, &split.validation)? };

    let lr = model.classifier.config.learning_rate;
    let mut adam = AdamState::new(AdamConfig::with_lr(lr), &model.classifier.store)?;
    let mut f_adam = match &pipeline {
        Pipeline::Joint { forecaster, .. } => Some(AdamState::new(AdamConfig::with_lr(lr), &forecaster.store)?),
        _ => None,
    };
    let mut rng = seed::rng(settings.seed);
    let mut dropout_rng = seed::rng(seed::derive(settings.seed, &[1]));
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut report = ClassifierTrainReport::default();
    let mut best: Option<BestEpoch> = None;

    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<&LabeledWindow> = chunk.iter().map(|&i| &split.train[i]).collect();
            let mut g = Graph::<f32>::new();
            let labels = label_tensor::<f32>(&batch);
            let mut ctx = Ctx {
                training: true,
                dropout_rate: model.classifier.config.transformer.dropout_rate,
                rng: Some(&mut dropout_rng),
            };
            let loss = if let Pipeline::Joint { forecaster, spec } = &pipeline {
                joint_loss(&mut g, &model.classifier, forecaster, spec, &batch, &labels, settings.weights, &mut ctx)?
            } else {
                let views: Vec<_> = chunk.iter().map(|&i| train_inputs[i].view()).collect();
                let x = g.constant(batch_tensor(&views)?);
                let (probs, stats) = model.classifier.forward(&mut g, x, &mut ctx)?;
                let genuine = g.slice(probs, 1, 1, 1)?;
                let loss = g.bce(genuine, &labels, BCE_EPS as f32)?;
                model.classifier.update_running(&stats, batch.len() * expected_len);
                loss
            };
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "classifier loss diverged at epoch {epoch} for {}",
                    split.user_id
                )));
            }
            g.backward(loss)?;
            let grads = g.param_grads(&model.classifier.store);
            adam.step(&mut model.classifier.store, &grads)?;
            if let (Pipeline::Joint { forecaster, .. }, Some(fa)) = (&mut pipeline, f_adam.as_mut()) {
                let grads = g.param_grads(&forecaster.store);
                fa.step(&mut forecaster.store, &grads)?;
            }
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        report.loss_trace.push(mean);

        if !split.validation.is_empty() {
            if joint {
                val_inputs = staged_inputs(&pipeline, &split.validation)?;
            }
            let eer = validation_eer(model, &val_inputs, &split.validation)?;
            info!("classifier {} epoch {epoch}: loss {mean:.6} validation EER {eer:.4}", split.user_id);
            report.validation_eer.push(eer);
            if best.as_ref().is_none_or(|(b, ..)| eer < *b) {
                let f_store = match &pipeline {
                    Pipeline::Joint { forecaster, .. } => Some(forecaster.store.clone()),
                    _ => None,
                };
                best = Some((eer, epoch, model.classifier.store.clone(), f_store));
            }
        } else {
            info!("classifier {} epoch {epoch}: loss {mean:.6}", split.user_id);
        }
    }
    if let Some((_, epoch, store, f_store)) = best {
        model.classifier.store.load_from(&store)?;
        if let (Pipeline::Joint { forecaster, .. }, Some(fs)) = (&mut pipeline, f_store) {
            forecaster.store.load_from(&fs)?;
        }
        report.best_epoch = Some(epoch);
    }
    model.metadata = Some(TrainingMetadata {
        seed: settings.seed,
        epochs: settings.epochs,
        best_epoch: report.best_epoch,
        split_fingerprint: split.fingerprint(),
        mode: pipeline.mode(),
        spec,
    });
    Ok(report)
}

/// Composite loss for joint training: BCE on the label plus the weighted
/// forecasting terms, the latter over genuine windows that have ground
/// truth after them (others are masked out and the mean rescaled).
#[allow(clippy::too_many_arguments)]
fn joint_loss(
    g: &mut Graph<f32>,
    classifier: &Classifier<f32>,
    forecaster: &Forecaster<f32>,
    spec: &ForecastSpec,
    batch: &[&LabeledWindow],
    labels: &Tensor<f32>,
    weights: LossWeights,
    ctx: &mut Ctx,
) -> Result<Var> {
    let h = spec.l_forecasting;
    let views: Vec<_> = batch.iter().map(|w| w.values.view()).collect();
    let starts: Vec<_> = batch.iter().map(|w| w.start_timestamp).collect();
    let vars = forecaster.forward(g, &views, &starts, spec, ctx)?;
    let fut = g.concat(vars.positions, vars.trigger, 2)?;
    let x = g.constant(batch_tensor(&views)?);
    let input = g.concat(x, fut, 1)?;
    let (probs, _) = classifier.forward(g, input, ctx)?;
    let genuine = g.slice(probs, 1, 1, 1)?;
    let label_loss = g.bce(genuine, labels, BCE_EPS as f32)?;

    let keep: Vec<bool> = batch.iter().map(|w| w.label.is_genuine() && w.has_tail_room(h)).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return Ok(label_loss);
    }
    let rescale = batch.len() as f32 / kept as f32;
    let mut pos_t = Vec::with_capacity(batch.len() * h * N_POSITION);
    let mut trig_t = Vec::with_capacity(batch.len() * h);
    let (mut pos_m, mut trig_m) = (Vec::new(), Vec::new());
    for (w, &k) in batch.iter().zip(&keep) {
        let m = if k { 1.0f32 } else { 0.0 };
        for r in 0..h {
            let row = if k { w.continuation.row(r).to_vec() } else { vec![0.0; N_FEATURES] };
            pos_t.extend(row[..N_POSITION].iter().map(|&v| v as f32 * m));
            trig_t.push(if row[N_POSITION] >= 0.5 { m } else { 0.0 });
            pos_m.extend([m; N_POSITION]);
            trig_m.push(m);
        }
    }
    let b = batch.len();
    let pos_target = Tensor::new(&[b, h, N_POSITION], pos_t)?;
    let trig_target = Tensor::new(&[b, h, 1], trig_t)?;
    let masked = crate::forecaster::ForecastVars {
        positions: g.mul_const(vars.positions, pos_m)?,
        trigger: g.mul_const(vars.trigger, trig_m)?,
    };
    let scaled =
        LossWeights { lambda_f: weights.lambda_f * rescale as f64, lambda_t: weights.lambda_t * rescale as f64 };
    match forecast_loss(g, &masked, &pos_target, &trig_target, scaled)? {
        Some(f) => Ok(g.weighted_sum(&[(label_loss, 1.0), (f, 1.0)])?),
        None => Ok(label_loss),
    }
}

/// Scores every test window of `split` through the same input pipeline.
pub fn score_split(
    model: &AuthModel,
    windows: &[LabeledWindow],
    forecaster: Option<(&Forecaster<f32>, &ForecastSpec)>,
    forecast_impostors: bool,
) -> Result<Vec<AuthScore>> {
    let inputs = prepare_inputs(windows, forecaster, forecast_impostors)?;
    model.score_many(&inputs)
}
