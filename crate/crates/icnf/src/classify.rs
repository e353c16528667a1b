//! Time-attention LSTM classifier (CN vs AD) over full-length series.
//!
//! Three stacked LSTM layers produce hidden states for every timestep;
//! scaled dot-product attention against a learned query reduces them to
//! one score per timestep. The default head forms the attention-weighted
//! context vector and maps it to a single logit; the literal variant
//! instead feeds the raw per-timestep scores through the output layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{IcnRecord, Label, CHANNELS};
use crate::layers::{linear, linear_init, split_time_steps, stack_time_steps, LstmLayer};
use crate::numerics::{
    uniform_init, AdamState, BoundParams, ParamSet, Tape, Tensor, TensorError, Var,
};
use crate::seeds::mix3;

pub const TA_HIDDEN: usize = 64;
pub const TA_LAYERS: usize = 3;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("records disagree on length: found T={a} and T={b}")]
    MixedLengths { a: usize, b: usize },
    #[error("{split} split contains only the {label} class")]
    SingleClass { split: &'static str, label: &'static str },
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("bad checkpoint: {msg}")]
    BadCheckpoint { msg: String },
    #[error("literal attention head is sized for T={expected}, got T={found}")]
    LiteralLength { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How attention scores reach the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Softmax weights form a context vector over hidden states
    /// (dimension-independent of T).
    Context,
    /// The raw per-timestep scores feed the output layer directly.
    Literal,
}

impl AttentionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::Context => "context",
            AttentionMode::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "context" => Some(AttentionMode::Context),
            "literal" => Some(AttentionMode::Literal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaLstm {
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub mode: AttentionMode,
    /// Timestep count the literal head was sized for.
    pub literal_len: Option<usize>,
    pub params: ParamSet,
}

impl TaLstm {
    /// Production shape: 53 -> 3 x LSTM(64) -> attention -> 1 logit.
    pub fn new(mode: AttentionMode, literal_len: Option<usize>, seed: u64) -> Self {
        Self::with_shape(CHANNELS, TA_HIDDEN, TA_LAYERS, mode, literal_len, seed)
    }

    pub fn with_shape(
        channels: usize,
        hidden: usize,
        layers: usize,
        mode: AttentionMode,
        literal_len: Option<usize>,
        seed: u64,
    ) -> Self {
        assert!(layers >= 1);
        if mode == AttentionMode::Literal {
            assert!(literal_len.is_some(), "literal mode requires the series length");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let meta = vec![
            channels as f64,
            hidden as f64,
            layers as f64,
            match mode {
                AttentionMode::Context => 0.0,
                AttentionMode::Literal => 1.0,
            },
            literal_len.unwrap_or(0) as f64,
        ];
        params.insert("meta.shape", Tensor::new(vec![5], meta).expect("meta shape"));
        for i in 0..layers {
            let input = if i == 0 { channels } else { hidden };
            LstmLayer::new(format!("layer{i}"), input, hidden).init_into(&mut params, &mut rng);
        }
        params.insert("attn_q", uniform_init(&mut rng, vec![hidden, 1], hidden));
        let head_in = match mode {
            AttentionMode::Context => hidden,
            AttentionMode::Literal => literal_len.expect("checked above"),
        };
        linear_init(&mut params, &mut rng, "head", head_in, 1);
        TaLstm { channels, hidden, layers, mode, literal_len, params }
    }

    pub fn from_params(params: ParamSet) -> Result<Self, ClassifyError> {
        let meta = params.get("meta.shape").ok_or_else(|| ClassifyError::BadCheckpoint {
            msg: "missing parameter `meta.shape`".into(),
        })?;
        if meta.shape() != [5] {
            return Err(ClassifyError::BadCheckpoint {
                msg: format!("meta.shape has shape {:?}, expected [5]", meta.shape()),
            });
        }
        let v = meta.values();
        let mode = if v[3] == 0.0 { AttentionMode::Context } else { AttentionMode::Literal };
        let literal_len = if v[4] == 0.0 { None } else { Some(v[4] as usize) };
        let expected = TaLstm::with_shape(
            v[0] as usize,
            v[1] as usize,
            v[2] as usize,
            mode,
            literal_len,
            0,
        );
        if expected.params.len() != params.len() {
            return Err(ClassifyError::BadCheckpoint {
                msg: format!(
                    "expected {} parameters, found {}",
                    expected.params.len(),
                    params.len()
                ),
            });
        }
        for (name, tensor) in expected.params.iter() {
            let found = params.get(name).ok_or_else(|| ClassifyError::BadCheckpoint {
                msg: format!("missing parameter `{name}`"),
            })?;
            if found.shape() != tensor.shape() {
                return Err(ClassifyError::BadCheckpoint {
                    msg: format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        found.shape(),
                        tensor.shape()
                    ),
                });
            }
        }
        Ok(TaLstm {
            channels: expected.channels,
            hidden: expected.hidden,
            layers: expected.layers,
            mode,
            literal_len,
            params,
        })
    }

    /// Builds the graph for series [B, T, C]; returns (logit [B, 1],
    /// attention weights [B, T]).
    pub fn graph(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        series: Var,
    ) -> Result<(Var, Var), TensorError> {
        let shape = tape.shape(series).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(TensorError::InvalidArgument {
                op: "ta_lstm_forward",
                msg: format!("expected [B, T, {}], got {:?}", self.channels, shape),
            });
        }
        let (b, t) = (shape[0], shape[1]);
        if let Some(expected) = self.literal_len {
            if self.mode == AttentionMode::Literal && t != expected {
                return Err(TensorError::InvalidArgument {
                    op: "ta_lstm_forward",
                    msg: format!("literal head sized for T={expected}, got T={t}"),
                });
            }
        }

        let mut steps = split_time_steps(tape, series)?;
        for i in 0..self.layers {
            let input = if i == 0 { self.channels } else { self.hidden };
            let layer = LstmLayer::new(format!("layer{i}"), input, self.hidden);
            steps = layer.unroll(tape, bound, &steps)?;
        }
        let states = stack_time_steps(tape, &steps)?; // [B, T, H]

        let flat = tape.reshape(states, &[b * t, self.hidden])?;
        let scores = tape.matmul(flat, bound.var("attn_q"))?;
        let scores = tape.reshape(scores, &[b, t])?;
        let scores = tape.scale(scores, 1.0 / (self.hidden as f64).sqrt());
        let alpha = tape.softmax(scores, 1)?;

        let logit = match self.mode {
            AttentionMode::Context => {
                let alpha_row = tape.reshape(alpha, &[b, 1, t])?;
                let context = tape.bmm(alpha_row, states)?;
                let context = tape.reshape(context, &[b, self.hidden])?;
                linear(tape, bound, "head", context)?
            }
            AttentionMode::Literal => linear(tape, bound, "head", scores)?,
        };
        Ok((logit, alpha))
    }

    /// Inference over series values [B, T, C].
    pub fn forward(&self, series: &Tensor) -> Result<ClassifierOutput, TensorError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(series.clone());
        let (logit, alpha) = self.graph(&mut tape, &bound, x)?;
        let sig = tape.sigmoid(logit);
        let b = series.shape()[0];
        let t = series.shape()[1];
        let p = tape.value(sig).values().to_vec();
        let logits = tape.value(logit).values().to_vec();
        let a = tape.value(alpha).values().to_vec();
        Ok(ClassifierOutput {
            p,
            logits,
            attention: (0..b).map(|i| a[i * t..(i + 1) * t].to_vec()).collect(),
        })
    }
}

/// Class probabilities and per-timestep attention weights.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    /// P(AD) per subject.
    pub p: Vec<f64>,
    /// Decision scores (pre-sigmoid). Monotone in `p`, so rankings and
    /// AUC agree, but they cannot saturate into ties the way extreme
    /// probabilities do in floating point.
    pub logits: Vec<f64>,
    /// Simplex attention vector per subject.
    pub attention: Vec<Vec<f64>>,
}

/// Training protocol constants and knobs.
#[derive(Debug, Clone)]
pub struct ClassifyTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: AttentionMode,
}

impl Default for ClassifyTrainConfig {
    fn default() -> Self {
        ClassifyTrainConfig {
            batch_size: 32,
            epochs: 800,
            lr: 1e-3,
            seed: 0,
            mode: AttentionMode::Context,
        }
    }
}

#[derive(Debug)]
pub struct TrainedClassifier {
    /// Parameters from the epoch with the best validation AUC.
    pub model: TaLstm,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub train_loss: Vec<f64>,
    pub val_auc: Vec<f64>,
}

/// Time-major tensor [B, T, C] for uniform-length records.
pub fn records_tensor(records: &[&IcnRecord]) -> Result<Tensor, ClassifyError> {
    let t_len = records[0].t_len;
    for r in records {
        if r.t_len != t_len {
            return Err(ClassifyError::MixedLengths { a: t_len, b: r.t_len });
        }
    }
    let mut values = Vec::with_capacity(records.len() * t_len * CHANNELS);
    for r in records {
        for t in 0..t_len {
            for c in 0..CHANNELS {
                values.push(r.get(c, t));
            }
        }
    }
    Ok(Tensor::new(vec![records.len(), t_len, CHANNELS], values).expect("records tensor shape"))
}

fn check_split(records: &[&IcnRecord], split: &'static str) -> Result<(), ClassifyError> {
    if records.is_empty() {
        return Err(ClassifyError::EmptySplit { split });
    }
    let has = |label: Label| records.iter().any(|r| r.label == label);
    if !has(Label::Ad) {
        return Err(ClassifyError::SingleClass { split, label: "CN" });
    }
    if !has(Label::Cn) {
        return Err(ClassifyError::SingleClass { split, label: "AD" });
    }
    Ok(())
}

/// Ranking scores (logits) for `records`, in evaluation batches.
pub fn score_records(
    model: &TaLstm,
    records: &[&IcnRecord],
    batch_size: usize,
) -> Result<Vec<f64>, ClassifyError> {
    let mut scores = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let tensor = records_tensor(chunk)?;
        scores.extend(model.forward(&tensor)?.logits);
    }
    Ok(scores)
}

/// Trains on `train`, tracks AUC on `val` every epoch, and returns the
/// best-validation checkpoint. Both splits must contain both classes.
pub fn train_classifier(
    train: &[&IcnRecord],
    val: &[&IcnRecord],
    config: &ClassifyTrainConfig,
) -> Result<TrainedClassifier, ClassifyError> {
    check_split(train, "train")?;
    check_split(val, "validation")?;
    let t_len = train[0].t_len;
    for r in train.iter().chain(val) {
        if r.t_len != t_len {
            return Err(ClassifyError::MixedLengths { a: t_len, b: r.t_len });
        }
    }

    let literal_len =
        (config.mode == AttentionMode::Literal).then_some(t_len);
    let mut model = TaLstm::new(config.mode, literal_len, mix3(config.seed, 0x444, 0));
    let mut adam = AdamState::new(config.lr, &model.params);

    let mut best_params = model.params.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut train_loss_curve = Vec::with_capacity(config.epochs);
    let mut val_auc_curve = Vec::with_capacity(config.epochs);

    let val_labels: Vec<f64> = val.iter().map(|r| r.label.target()).collect();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix3(config.seed, 0x555, epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let rows: Vec<&IcnRecord> = chunk.iter().map(|&i| train[i]).collect();
            let targets: Vec<f64> = rows.iter().map(|r| r.label.target()).collect();

            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let x = tape.constant(records_tensor(&rows)?);
            let (logit, _) = model.graph(&mut tape, &bound, x)?;
            let y = tape.constant(
                Tensor::new(vec![rows.len(), 1], targets).expect("targets shape"),
            );
            let loss = tape.bce_with_logits(logit, y)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(ClassifyError::NanLoss { epoch, batch: batch_idx });
            }
            loss_sum += loss_value * rows.len() as f64;
            tape.backward(loss)?;
            let grads = bound.collect_grads(&tape)?;
            adam.step(&mut model.params, &grads)?;
        }
        train_loss_curve.push(loss_sum / train.len() as f64);

        let val_scores = score_records(&model, val, config.batch_size)?;
        let auc = crate::experiment::auc(&val_scores, &val_labels)
            .expect("validation split holds both classes");
        val_auc_curve.push(auc);
        if auc > best_val {
            best_val = auc;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
    }

    if config.epochs > 0 {
        model.params = best_params;
    } else {
        best_val = f64::NAN;
    }
    Ok(TrainedClassifier {
        model,
        best_epoch,
        best_val_auc: best_val,
        train_loss: train_loss_curve,
        val_auc: val_auc_curve,
    })
}
