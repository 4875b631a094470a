//! One-shot encoder-decoder trajectory forecaster.
//!
//! The encoder reads the embedded window (plus positional and temporal
//! encodings). The decoder input is the last `l_overlap` window rows
//! followed by `l_forecasting` zero rows; one decoder pass emits the whole
//! horizon. Positions come out of a linear head, trigger out of a logistic
//! head.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::{info, warn};
use motionauth_nn::{
    positional_encoding, AdamConfig, AdamState, Ctx, DecoderLayer, EncoderLayer, Graph, Initializer, Linear,
    LossWeights, Mask, ModelConfig, ParamId, ParamStore, Real, Tensor, Var, BCE_EPS,
};
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, LabeledWindow, N_FEATURES, N_POSITION, SESSION_LEN};
use crate::error::{CoreError, Result};
use crate::seed;

/// Largest `l_window + l_forecasting` on the sweep grid.
pub const WINDOW_ENVELOPE: usize = 95;
pub const OVERLAP_STEP: usize = 5;
/// Inference batch size.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForecastSpec {
    pub l_window: usize,
    pub l_initial: usize,
    pub l_overlap: usize,
    pub l_forecasting: usize,
}

impl ForecastSpec {
    pub fn new(l_window: usize, l_overlap: usize, l_forecasting: usize) -> Result<Self> {
        let spec = ForecastSpec { l_window, l_initial: l_window.saturating_sub(l_overlap), l_overlap, l_forecasting };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec whose overlap is the lower median of `{5, 10, ..., l_window - 5}`.
    pub fn with_median_overlap(l_window: usize, l_forecasting: usize) -> Result<Self> {
        Self::new(l_window, median_overlap(l_window)?, l_forecasting)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_initial + self.l_overlap != self.l_window {
            return Err(CoreError::Config(format!(
                "l_initial ({}) + l_overlap ({}) must equal l_window ({})",
                self.l_initial, self.l_overlap, self.l_window
            )));
        }
        if self.l_overlap < OVERLAP_STEP || self.l_overlap + OVERLAP_STEP > self.l_window {
            return Err(CoreError::Config(format!(
                "l_overlap {} outside [5, l_window - 5] for l_window {}",
                self.l_overlap, self.l_window
            )));
        }
        if self.l_window + self.l_forecasting > WINDOW_ENVELOPE {
            return Err(CoreError::Config(format!(
                "l_window + l_forecasting = {} exceeds {WINDOW_ENVELOPE}",
                self.l_window + self.l_forecasting
            )));
        }
        Ok(())
    }

    pub fn decoder_len(&self) -> usize {
        self.l_overlap + self.l_forecasting
    }
}

/// Lower median of the overlap grid `{5, 10, ..., l_window - 5}`.
pub fn median_overlap(l_window: usize) -> Result<usize> {
    let grid = overlap_grid(l_window);
    if grid.is_empty() {
        return Err(CoreError::Config(format!("l_window {l_window} leaves no room for an overlap")));
    }
    Ok(grid[(grid.len() - 1) / 2])
}

pub fn overlap_grid(l_window: usize) -> Vec<usize> {
    (OVERLAP_STEP..=l_window.saturating_sub(OVERLAP_STEP)).step_by(OVERLAP_STEP).collect()
}

/// Last `l_overlap` window rows followed by `l_forecasting` zero rows.
pub fn build_decoder_input(window: ArrayView2<'_, f64>, spec: &ForecastSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    check_window(window, spec)?;
    let mut out = Array2::zeros((spec.decoder_len(), N_FEATURES));
    out.slice_mut(s![..spec.l_overlap, ..]).assign(&window.slice(s![spec.l_initial.., ..]));
    Ok(out)
}

fn check_window(window: ArrayView2<'_, f64>, spec: &ForecastSpec) -> Result<()> {
    if window.nrows() != spec.l_window || window.ncols() != N_FEATURES {
        return Err(CoreError::Shape(format!(
            "window is {}x{}, spec expects {}x{N_FEATURES}",
            window.nrows(),
            window.ncols(),
            spec.l_window
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOutput {
    /// `l_forecasting x 3`, meters.
    pub positions: Array2<f64>,
    /// Trigger probabilities in (0, 1).
    pub trigger: Vec<f64>,
}

impl ForecastOutput {
    pub fn empty() -> Self {
        ForecastOutput { positions: Array2::zeros((0, N_POSITION)), trigger: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.trigger.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trigger.is_empty()
    }

    /// Positions with the trigger probability as a 4th column.
    pub fn as_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), N_FEATURES));
        out.slice_mut(s![.., ..N_POSITION]).assign(&self.positions);
        for (r, &p) in self.trigger.iter().enumerate() {
            out[[r, N_POSITION]] = p;
        }
        out
    }
}

/// `t / total - 0.5`. Decoder positions of late windows can run past the
/// end of the session; the linear form is extended there rather than clamped.
fn time_feature(t: usize, total: usize) -> f64 {
    t as f64 / total as f64 - 0.5
}

fn time_table<T: Real>(starts: &[usize], len: usize, total: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(starts.len() * len * d);
    for &s in starts {
        for t in s..s + len {
            data.extend(std::iter::repeat_n(T::of(time_feature(t, total)), d));
        }
    }
    Tensor::new(&[starts.len(), len, d], data).expect("finite time table")
}

/// Row-major `[B, rows, 4]` tensor from matrices.
pub(crate) fn batch_tensor<T: Real>(mats: &[ArrayView2<'_, f64>]) -> Result<Tensor<T>> {
    let rows = mats.first().map_or(0, |m| m.nrows());
    let mut data = Vec::with_capacity(mats.len() * rows * N_FEATURES);
    for m in mats {
        if m.nrows() != rows || m.ncols() != N_FEATURES {
            return Err(CoreError::Shape(format!("batch mixes {}x{} with {rows}x{N_FEATURES}", m.nrows(), m.ncols())));
        }
        data.extend(m.iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(&[mats.len(), rows, N_FEATURES], data)?)
}

/// Self mask (strictly causal over decoder positions) and cross mask
/// (decoder position `p` sees encoder rows `0..=l_initial + p`).
pub fn decoder_masks(spec: &ForecastSpec) -> (Mask, Mask) {
    let n = spec.decoder_len();
    (Mask::causal(n), Mask::causal_offset(n, spec.l_window, spec.l_initial))
}

pub struct Forecaster<T: Real = f32> {
    pub config: ModelConfig,
    /// Session length used by the temporal encoding.
    pub session_len: usize,
    pub store: ParamStore<T>,
    enc_embed: Linear,
    dec_embed: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    position_head: Linear,
    trigger_head: Linear,
    encoder_calls: AtomicUsize,
    decoder_calls: AtomicUsize,
}

impl<T: Real> Clone for Forecaster<T> {
    fn clone(&self) -> Self {
        let mut out = Forecaster::new(self.config, 0).expect("config already validated");
        out.session_len = self.session_len;
        out.store.load_from(&self.store).expect("same layout");
        out
    }
}

/// Graph handles of a forward pass.
pub struct ForecastVars {
    /// `[B, l_forecasting, 3]`.
    pub positions: Var,
    /// `[B, l_forecasting, 1]`, after the logistic.
    pub trigger: Var,
}

impl<T: Real> Forecaster<T> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        if config.n_encoder_layers == 0 || config.n_decoder_layers == 0 {
            return Err(CoreError::Config("forecaster needs at least one encoder and one decoder layer".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Initializer::new(init_seed);
        let d = config.d_model;
        let enc_embed = Linear::new(&mut store, &mut init, "encoder.embed", N_FEATURES, d, true);
        let encoder = (0..config.n_encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &mut init, &format!("encoder.layer{i}"), &config))
            .collect();
        let dec_embed = Linear::new(&mut store, &mut init, "decoder.embed", N_FEATURES, d, true);
        let decoder = (0..config.n_decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &mut init, &format!("decoder.layer{i}"), &config))
            .collect();
        let position_head = Linear::new(&mut store, &mut init, "head.position", d, N_POSITION, true);
        let trigger_head = Linear::new(&mut store, &mut init, "head.trigger", d, 1, true);
        Ok(Forecaster {
            config,
            session_len: SESSION_LEN,
            store,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            position_head,
            trigger_head,
            encoder_calls: AtomicUsize::new(0),
            decoder_calls: AtomicUsize::new(0),
        })
    }

    /// Encoder-stack and decoder-stack invocations since construction.
    pub fn call_counts(&self) -> (usize, usize) {
        (self.encoder_calls.load(Ordering::Relaxed), self.decoder_calls.load(Ordering::Relaxed))
    }

    pub fn trigger_head_params(&self) -> Vec<ParamId> {
        self.trigger_head.b.into_iter().chain([self.trigger_head.w]).collect()
    }

    pub fn position_head_params(&self) -> Vec<ParamId> {
        self.position_head.b.into_iter().chain([self.position_head.w]).collect()
    }

    fn embed(&self, g: &mut Graph<T>, layer: &Linear, x: Tensor<T>, starts: &[usize], ctx: &mut Ctx) -> Result<Var> {
        let (b, len) = (x.shape()[0], x.shape()[1]);
        let d = self.config.d_model;
        let xv = g.constant(x);
        let e = layer.forward(g, &self.store, xv)?;
        let pe = g.constant(positional_encoding(len, d)?);
        let e = g.add(e, pe)?;
        debug_assert_eq!(starts.len(), b);
        let te = g.constant(time_table(starts, len, self.session_len, d));
        let e = g.add(e, te)?;
        Ok(ctx.dropout(g, e)?)
    }

    /// Batched forward pass over windows starting at `starts` in their
    /// sessions. One encoder and one decoder invocation per call.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        windows: &[ArrayView2<'_, f64>],
        starts: &[usize],
        spec: &ForecastSpec,
        ctx: &mut Ctx,
    ) -> Result<ForecastVars> {
        spec.validate()?;
        if spec.l_forecasting == 0 {
            return Err(CoreError::Config("forward needs a positive horizon".into()));
        }
        if windows.is_empty() || windows.len() != starts.len() {
            return Err(CoreError::Shape("forward needs one start per window and at least one window".into()));
        }
        let mut dec_in = Vec::with_capacity(windows.len());
        for w in windows {
            check_window(*w, spec)?;
            dec_in.push(build_decoder_input(*w, spec)?);
        }
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let mut h = self.embed(g, &self.enc_embed, batch_tensor(windows)?, starts, ctx)?;
        for layer in &self.encoder {
            h = layer.forward(g, &self.store, h, ctx)?;
        }

        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        let dec_views: Vec<_> = dec_in.iter().map(|m| m.view()).collect();
        let dec_starts: Vec<usize> = starts.iter().map(|s| s + spec.l_initial).collect();
        let mut y = self.embed(g, &self.dec_embed, batch_tensor(&dec_views)?, &dec_starts, ctx)?;
        let (self_mask, cross_mask) = decoder_masks(spec);
        for layer in &self.decoder {
            y = layer.forward(g, &self.store, y, h, &self_mask, &cross_mask, ctx)?;
        }
        let tail = g.slice(y, 1, spec.l_overlap, spec.l_forecasting)?;
        let positions = self.position_head.forward(g, &self.store, tail)?;
        let logit = self.trigger_head.forward(g, &self.store, tail)?;
        Ok(ForecastVars { positions, trigger: g.sigmoid(logit) })
    }

    /// Forecasts for many windows; inference mode, batched internally.
    pub fn forecast_batch(
        &self,
        windows: &[ArrayView2<'_, f64>],
        starts: &[usize],
        spec: &ForecastSpec,
    ) -> Result<Vec<ForecastOutput>> {
        if windows.len() != starts.len() {
            return Err(CoreError::Shape("one start per window".into()));
        }
        spec.validate()?;
        if spec.l_forecasting == 0 {
            for w in windows {
                check_window(*w, spec)?;
            }
            return Ok(vec![ForecastOutput::empty(); windows.len()]);
        }
        let mut out = Vec::with_capacity(windows.len());
        for (ws, ss) in windows.chunks(CHUNK).zip(starts.chunks(CHUNK)) {
            let mut g = Graph::new();
            let vars = self.forward(&mut g, ws, ss, spec, &mut Ctx::eval())?;
            let (pos, trig) = (g.value(vars.positions), g.value(vars.trigger));
            let h = spec.l_forecasting;
            for b in 0..ws.len() {
                let p = &pos.data()[b * h * N_POSITION..][..h * N_POSITION];
                let positions = Array2::from_shape_vec((h, N_POSITION), p.iter().map(|v| v.as_f64()).collect())
                    .expect("head width");
                let trigger = trig.data()[b * h..][..h].iter().map(|v| v.as_f64()).collect();
                out.push(ForecastOutput { positions, trigger });
            }
        }
        Ok(out)
    }

    /// Forecast for one window whose first row sits at `start` in its session.
    pub fn forecast(&self, window: ArrayView2<'_, f64>, start: usize, spec: &ForecastSpec) -> Result<ForecastOutput> {
        Ok(self.forecast_batch(&[window], &[start], spec)?.pop().expect("one output"))
    }

    pub fn cast<U: Real>(&self) -> Forecaster<U> {
        let mut out = Forecaster::new(self.config, 0).expect("config already validated");
        out.session_len = self.session_len;
        out.store.load_from(&self.store.cast()).expect("same layout");
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for ForecasterTraining {
    fn default() -> Self {
        ForecasterTraining {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl ForecasterTraining {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch size must be positive".into()));
        }
        self.weights.validate()?;
        AdamConfig::with_lr(self.learning_rate).validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrainReport {
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Windows used for training.
    pub used: usize,
    /// Windows dropped for lacking `l_forecasting` rows after them.
    pub excluded: usize,
}

/// Ground-truth targets for a batch: positions `[B, h, 3]` and binarized
/// trigger `[B, h, 1]`.
pub(crate) fn targets<T: Real>(windows: &[&LabeledWindow], h: usize) -> (Tensor<T>, Tensor<T>) {
    let mut pos = Vec::with_capacity(windows.len() * h * N_POSITION);
    let mut trig = Vec::with_capacity(windows.len() * h);
    for w in windows {
        let fut = w.future(h).expect("caller filtered on tail room");
        for row in fut.rows() {
            pos.extend(row.iter().take(N_POSITION).map(|&v| T::of(v)));
            trig.push(if row[N_POSITION] >= 0.5 { T::one() } else { T::zero() });
        }
    }
    let b = windows.len();
    (
        Tensor::new(&[b, h, N_POSITION], pos).expect("finite targets"),
        Tensor::new(&[b, h, 1], trig).expect("finite targets"),
    )
}

/// `lambda_F * MSE(positions) + lambda_T * BCE(trigger)` on the graph.
/// Terms with a zero weight are left out.
pub(crate) fn forecast_loss<T: Real>(
    g: &mut Graph<T>,
    vars: &ForecastVars,
    pos_target: &Tensor<T>,
    trig_target: &Tensor<T>,
    weights: LossWeights,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if weights.lambda_f > 0.0 {
        terms.push((g.mse(vars.positions, pos_target)?, T::of(weights.lambda_f)));
    }
    if weights.lambda_t > 0.0 {
        terms.push((g.bce(vars.trigger, trig_target, T::of(BCE_EPS))?, T::of(weights.lambda_t)));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.weighted_sum(&terms)?))
}

impl<T: Real> Forecaster<T> {
    /// Loss and per-parameter gradients for one batch (training mode, no dropout).
    pub fn batch_gradients(
        &self,
        windows: &[&LabeledWindow],
        spec: &ForecastSpec,
        weights: LossWeights,
    ) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let mut g = Graph::new();
        let views: Vec<_> = windows.iter().map(|w| w.values.view()).collect();
        let starts: Vec<_> = windows.iter().map(|w| w.start_timestamp).collect();
        let vars = self.forward(&mut g, &views, &starts, spec, &mut Ctx::train_no_dropout())?;
        let (pt, tt) = targets::<T>(windows, spec.l_forecasting);
        let Some(loss) = forecast_loss(&mut g, &vars, &pt, &tt, weights)? else {
            return Ok((0.0, vec![None; self.store.len()]));
        };
        g.backward(loss)?;
        Ok((g.value(loss).data()[0].as_f64(), g.param_grads(&self.store)))
    }
}

/// Trains on the genuine windows of `split.train`.
pub fn train_forecaster(
    model: &mut Forecaster<f32>,
    split: &DatasetSplit,
    spec: &ForecastSpec,
    settings: &ForecasterTraining,
) -> Result<ForecastTrainReport> {
    let windows: Vec<&LabeledWindow> = split.genuine_train().collect();
    train_forecaster_on(model, &windows, spec, settings)
}

/// Trains on an explicit window list (labels ignored).
pub fn train_forecaster_on(
    model: &mut Forecaster<f32>,
    windows: &[&LabeledWindow],
    spec: &ForecastSpec,
    settings: &ForecasterTraining,
) -> Result<ForecastTrainReport> {
    settings.validate()?;
    spec.validate()?;
    if spec.l_forecasting == 0 {
        return Err(CoreError::Config("cannot train a forecaster for a zero horizon".into()));
    }
    let (usable, dropped): (Vec<&LabeledWindow>, Vec<&LabeledWindow>) =
        windows.iter().partition(|w| w.has_tail_room(spec.l_forecasting) && w.len() == spec.l_window);
    if !dropped.is_empty() {
        warn!(
            "forecaster: excluded {} of {} windows without {} rows of tail room",
            dropped.len(),
            windows.len(),
            spec.l_forecasting
        );
    }
    if usable.is_empty() {
        return Err(CoreError::Training("no window has enough tail room for the requested horizon".into()));
    }
    let mut adam = AdamState::new(AdamConfig::with_lr(settings.learning_rate), &model.store)?;
    let mut rng = seed::rng(settings.seed);
    let mut dropout_rng = seed::rng(seed::derive(settings.seed, &[1]));
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut trace = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<&LabeledWindow> = chunk.iter().map(|&i| usable[i]).collect();
            let mut g = Graph::new();
            let views: Vec<_> = batch.iter().map(|w| w.values.view()).collect();
            let starts: Vec<_> = batch.iter().map(|w| w.start_timestamp).collect();
            let mut ctx = Ctx { training: true, dropout_rate: model.config.dropout_rate, rng: Some(&mut dropout_rng) };
            let vars = model.forward(&mut g, &views, &starts, spec, &mut ctx)?;
            let (pt, tt) = targets::<f32>(&batch, spec.l_forecasting);
            let Some(loss) = forecast_loss(&mut g, &vars, &pt, &tt, settings.weights)? else {
                return Err(CoreError::Config("both forecasting loss weights are zero".into()));
            };
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(CoreError::Numeric(format!("forecaster loss diverged at epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads = g.param_grads(&model.store);
            adam.step(&mut model.store, &grads)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        info!("forecaster epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(ForecastTrainReport { loss_trace: trace, used: usable.len(), excluded: dropped.len() })
}

/// Mean over windows of the position-channel MSE. Windows without enough
/// rows after them are skipped; an empty remainder is an error.
pub fn evaluate_forecaster_mse<T: Real>(
    model: &Forecaster<T>,
    windows: &[&LabeledWindow],
    spec: &ForecastSpec,
) -> Result<f64> {
    evaluate_mse_with(windows, spec, |views, starts| {
        Ok(model.forecast_batch(views, starts, spec)?.into_iter().map(|f| f.positions).collect())
    })
}

/// Same metric for the zero-velocity baseline that repeats the last observed row.
pub fn persistence_mse(windows: &[&LabeledWindow], spec: &ForecastSpec) -> Result<f64> {
    evaluate_mse_with(windows, spec, |views, _| {
        Ok(views
            .iter()
            .map(|w| {
                let last = w.row(w.nrows() - 1);
                Array2::from_shape_fn((spec.l_forecasting, N_POSITION), |(_, c)| last[c])
            })
            .collect())
    })
}

/// Shared scorer: `predict` maps windows to `l_forecasting x 3` matrices.
pub fn evaluate_mse_with(
    windows: &[&LabeledWindow],
    spec: &ForecastSpec,
    predict: impl Fn(&[ArrayView2<'_, f64>], &[usize]) -> Result<Vec<Array2<f64>>>,
) -> Result<f64> {
    let h = spec.l_forecasting;
    let usable: Vec<&&LabeledWindow> = windows.iter().filter(|w| h > 0 && w.has_tail_room(h)).collect();
    if usable.is_empty() {
        return Err(CoreError::Evaluation("no test window with tail room for the horizon".into()));
    }
    let views: Vec<_> = usable.iter().map(|w| w.values.view()).collect();
    let starts: Vec<_> = usable.iter().map(|w| w.start_timestamp).collect();
    let preds = predict(&views, &starts)?;
    let mut total = 0.0;
    for (w, p) in usable.iter().zip(&preds) {
        let truth = w.future(h).expect("filtered").slice_move(s![.., ..N_POSITION]);
        total += (p - &truth).mapv(|d| d * d).mean().expect("non-empty");
    }
    Ok(total / usable.len() as f64)
}
