//! The two generative forecasters and their training and inference
//! procedures: sliding windows in, trained parameters and 4-step series
//! extensions out.

mod brainlm;
mod lstm;

pub use brainlm::{BrainLm, BrainLmShape};
pub use lstm::{LstmForecaster, LSTM_HIDDEN};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{IcnRecord, CHANNELS};
use crate::numerics::{ParamSet, Tape, Tensor, TensorError};
use crate::seeds::{hash_str, mix2, mix3};
use crate::windows::{mask_tail, WindowBatch, CONTEXT_LEN, TARGET_LEN, WINDOW_LEN};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("need at least 2 windows to train, got {0}")]
    TooFewWindows(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("bad model shape: {msg}")]
    BadShape { msg: String },
    #[error("bad checkpoint: {msg}")]
    BadCheckpoint { msg: String },
    #[error("bad mask: {msg}")]
    MaskShape { msg: String },
    #[error("subject {subject}: need at least {needed} timestamps to extend, got {t}")]
    ContextTooShort {
        subject: String,
        t: usize,
        needed: usize,
    },
    #[error("forecaster emits {model} steps, {requested} requested")]
    BadSteps { model: usize, requested: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which generative forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lstm,
    BrainLm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::BrainLm => "brainlm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lstm" => Some(ModelKind::Lstm),
            "brainlm" => Some(ModelKind::BrainLm),
            _ => None,
        }
    }
}

/// A trained (or freshly initialized) forecaster of either kind.
#[derive(Debug, Clone)]
pub enum Forecaster {
    Lstm(LstmForecaster),
    BrainLm(Box<BrainLm>),
}

impl Forecaster {
    pub fn kind(&self) -> ModelKind {
        match self {
            Forecaster::Lstm(_) => ModelKind::Lstm,
            Forecaster::BrainLm(_) => ModelKind::BrainLm,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Forecaster::Lstm(m) => &m.params,
            Forecaster::BrainLm(m) => &m.params,
        }
    }

    pub fn from_params(kind: ModelKind, params: ParamSet) -> Result<Self, ForecastError> {
        match kind {
            ModelKind::Lstm => Ok(Forecaster::Lstm(LstmForecaster::from_params(params)?)),
            ModelKind::BrainLm => Ok(Forecaster::BrainLm(Box::new(BrainLm::from_params(params)?))),
        }
    }

    /// Forecast steps emitted per window.
    pub fn steps(&self) -> usize {
        match self {
            Forecaster::Lstm(m) => m.steps,
            Forecaster::BrainLm(m) => m.shape.masked(),
        }
    }
}

/// Training protocol constants and knobs.
#[derive(Debug, Clone)]
pub struct ForecastTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub lr: f64,
    pub seed: u64,
    /// Reconstruction loss restricted to masked positions (transformer
    /// only); the alternative covers the whole window.
    pub masked_loss_only: bool,
    pub brainlm: BrainLmShape,
}

impl Default for ForecastTrainConfig {
    fn default() -> Self {
        ForecastTrainConfig {
            batch_size: 32,
            epochs: 500,
            train_fraction: 0.8,
            lr: 1e-3,
            seed: 0,
            masked_loss_only: true,
            brainlm: BrainLmShape::default(),
        }
    }
}

/// Training output: final parameters plus per-epoch loss curves. The
/// validation metric for both model kinds is the MSE over the forecast
/// (tail) positions, making curves comparable across models.
#[derive(Debug)]
pub struct TrainedForecaster {
    pub model: Forecaster,
    pub train_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Time-major input tensor [B, end-start, C] for the selected windows.
pub fn window_tensor(batch: &WindowBatch, indices: &[usize], start: usize, end: usize) -> Tensor {
    let span = end - start;
    let mut values = Vec::with_capacity(indices.len() * span * CHANNELS);
    for &w in indices {
        for t in start..end {
            for c in 0..CHANNELS {
                values.push(batch.get(w, c, t));
            }
        }
    }
    Tensor::new(vec![indices.len(), span, CHANNELS], values).expect("window tensor shape")
}

/// Trains a forecaster on segmented windows under the 80/20 window-level
/// split. Deterministic given `config.seed`.
pub fn train_forecaster(
    kind: ModelKind,
    batch: &WindowBatch,
    config: &ForecastTrainConfig,
) -> Result<TrainedForecaster, ForecastError> {
    if batch.len() < 2 {
        return Err(ForecastError::TooFewWindows(batch.len()));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(ForecastError::BadFraction(config.train_fraction));
    }
    if batch.window_len != WINDOW_LEN {
        return Err(ForecastError::BadShape {
            msg: format!("expected window length {WINDOW_LEN}, got {}", batch.window_len),
        });
    }

    // Window-level split, shuffled once.
    let mut indices: Vec<usize> = (0..batch.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(mix3(config.seed, 0xda7a, 0));
    indices.shuffle(&mut split_rng);
    let train_n = ((batch.len() as f64 * config.train_fraction).round() as usize)
        .clamp(1, batch.len() - 1);
    let train_indices = indices[..train_n].to_vec();
    let val_indices = indices[train_n..].to_vec();

    let mut model = match kind {
        ModelKind::Lstm => Forecaster::Lstm(LstmForecaster::new(mix3(config.seed, 0x111, 0))),
        ModelKind::BrainLm => Forecaster::BrainLm(Box::new(BrainLm::new(
            config.brainlm,
            mix3(config.seed, 0x111, 0),
        )?)),
    };

    let mut adam = crate::numerics::AdamState::new(config.lr, model.params());
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_mse = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order = train_indices.clone();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix3(config.seed, 0x222, epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let loss = train_step(&mut model, batch, chunk, config, &mut adam)?;
            if !loss.is_finite() {
                return Err(ForecastError::NanLoss { epoch, batch: batch_idx });
            }
            loss_sum += loss * chunk.len() as f64;
        }
        train_loss.push(loss_sum / train_indices.len() as f64);
        val_mse.push(forecast_mse(&model, batch, &val_indices, config.batch_size)?);
    }

    Ok(TrainedForecaster { model, train_loss, val_mse, train_indices, val_indices })
}

fn train_step(
    model: &mut Forecaster,
    batch: &WindowBatch,
    chunk: &[usize],
    config: &ForecastTrainConfig,
    adam: &mut crate::numerics::AdamState,
) -> Result<f64, ForecastError> {
    let mut tape = Tape::new();
    let loss_value;
    match model {
        Forecaster::Lstm(m) => {
            let bound = m.params.bind(&mut tape);
            let context = tape.constant(window_tensor(batch, chunk, 0, CONTEXT_LEN));
            let target = tape.constant(window_tensor(batch, chunk, CONTEXT_LEN, WINDOW_LEN));
            let pred = m.graph(&mut tape, &bound, context)?;
            let loss = tape.mse(pred, target)?;
            loss_value = tape.value(loss).item();
            tape.backward(loss)?;
            let grads = bound.collect_grads(&tape)?;
            adam.step(&mut m.params, &grads)?;
        }
        Forecaster::BrainLm(m) => {
            let bound = m.params.bind(&mut tape);
            let window = tape.constant(window_tensor(batch, chunk, 0, WINDOW_LEN));
            let recon = m.graph(&mut tape, &bound, window, None)?;
            let masked_from = WINDOW_LEN - m.shape.masked();
            let loss = if config.masked_loss_only {
                let recon_tail = tape.slice(recon, 1, masked_from, WINDOW_LEN)?;
                let target = tape.constant(window_tensor(batch, chunk, masked_from, WINDOW_LEN));
                tape.mse(recon_tail, target)?
            } else {
                let target = tape.constant(window_tensor(batch, chunk, 0, WINDOW_LEN));
                tape.mse(recon, target)?
            };
            loss_value = tape.value(loss).item();
            tape.backward(loss)?;
            let grads = bound.collect_grads(&tape)?;
            adam.step(&mut m.params, &grads)?;
        }
    }
    Ok(loss_value)
}

/// Mean squared error over the forecast (tail) positions of the given
/// windows; the skill metric shared by both model kinds.
pub fn forecast_mse(
    model: &Forecaster,
    batch: &WindowBatch,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64, ForecastError> {
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size) {
        let pred = predict_tail(model, batch, chunk)?;
        let target = window_tensor(batch, chunk, CONTEXT_LEN, WINDOW_LEN);
        sq_sum += pred
            .values()
            .iter()
            .zip(target.values())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>();
        count += pred.numel();
    }
    Ok(sq_sum / count as f64)
}

/// Model predictions at the tail positions, [B, TARGET_LEN, C].
fn predict_tail(
    model: &Forecaster,
    batch: &WindowBatch,
    chunk: &[usize],
) -> Result<Tensor, ForecastError> {
    match model {
        Forecaster::Lstm(m) => Ok(m.forward(&window_tensor(batch, chunk, 0, CONTEXT_LEN))?),
        Forecaster::BrainLm(m) => {
            let mask = mask_tail(m.shape.window, 6).expect("window divisible by 6");
            let recon = m.forward(&window_tensor(batch, chunk, 0, WINDOW_LEN), &mask)?;
            // Cut the tail out of the reconstruction.
            let mut tape = Tape::new();
            let r = tape.constant(recon);
            let masked_from = m.shape.window - m.shape.masked();
            let tail = tape.slice(r, 1, masked_from, m.shape.window)?;
            Ok(tape.value(tail).clone())
        }
    }
}

/// Appends `steps` forecasted timestamps to a record. The prefix is
/// preserved bit-exactly; the result is a pure function of
/// (record, model parameters, seed).
pub fn extend_series(
    record: &IcnRecord,
    model: &Forecaster,
    steps: usize,
    seed: u64,
) -> Result<IcnRecord, ForecastError> {
    if steps != model.steps() {
        return Err(ForecastError::BadSteps { model: model.steps(), requested: steps });
    }
    let t = record.t_len;
    if t < CONTEXT_LEN {
        return Err(ForecastError::ContextTooShort {
            subject: record.subject_id.clone(),
            t,
            needed: CONTEXT_LEN,
        });
    }

    // Context = the last CONTEXT_LEN timestamps, time-major.
    let mut context = Vec::with_capacity(CONTEXT_LEN * CHANNELS);
    for ts in (t - CONTEXT_LEN)..t {
        for c in 0..CHANNELS {
            context.push(record.get(c, ts));
        }
    }

    let forecast: Tensor = match model {
        Forecaster::Lstm(m) => {
            if m.channels != CHANNELS {
                return Err(ForecastError::BadShape {
                    msg: format!("forecaster expects {} channels", m.channels),
                });
            }
            let ctx = Tensor::new(vec![1, CONTEXT_LEN, CHANNELS], context)?;
            m.forward(&ctx)?
        }
        Forecaster::BrainLm(m) => {
            if m.shape.channels != CHANNELS || m.shape.window != WINDOW_LEN {
                return Err(ForecastError::BadShape {
                    msg: format!("forecaster expects shape {:?}", m.shape),
                });
            }
            // Placeholder timestamps fill the masked slots so the input
            // has full window length; their values are replaced by the
            // mask token and cannot influence the reconstruction.
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix2(seed, hash_str(&record.subject_id)));
            let mut values = context;
            for _ in 0..(TARGET_LEN * CHANNELS) {
                values.push(rng.sample::<f64, _>(StandardNormal));
            }
            let window = Tensor::new(vec![1, WINDOW_LEN, CHANNELS], values)?;
            let mask = mask_tail(WINDOW_LEN, 6).expect("window divisible by 6");
            let recon = m.forward(&window, &mask)?;
            let mut tape = Tape::new();
            let r = tape.constant(recon);
            let tail = tape.slice(r, 1, CONTEXT_LEN, WINDOW_LEN)?;
            tape.value(tail).clone()
        }
    };

    // forecast is [1, steps, C] time-major; records are channel-major.
    let new_t = t + steps;
    let mut values = Vec::with_capacity(CHANNELS * new_t);
    for c in 0..CHANNELS {
        values.extend_from_slice(record.channel(c));
        for s in 0..steps {
            values.push(forecast.values()[s * CHANNELS + c]);
        }
    }
    Ok(record.with_series(new_t, values))
}
