//! Stateless LSTM forecaster: one LSTM layer over the context window,
//! then a linear head that emits all forecast steps at once. Hidden and
//! cell states reset on every window.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layers::{linear, linear_init, split_time_steps, LstmLayer};
use crate::numerics::{BoundParams, ParamSet, Tape, Tensor, TensorError, Var};

use super::ForecastError;

/// Default hidden width.
pub const LSTM_HIDDEN: usize = 50;

#[derive(Debug, Clone)]
pub struct LstmForecaster {
    pub channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub params: ParamSet,
}

impl LstmForecaster {
    /// Production shape: 53 channels -> hidden 50 -> 4 x 53 head.
    pub fn new(seed: u64) -> Self {
        Self::with_shape(crate::data::CHANNELS, LSTM_HIDDEN, crate::windows::TARGET_LEN, seed)
    }

    /// Arbitrary shape, used by gradient checks on tiny configurations.
    pub fn with_shape(channels: usize, hidden: usize, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        Self::layer(channels, hidden).init_into(&mut params, &mut rng);
        linear_init(&mut params, &mut rng, "head", hidden, steps * channels);
        LstmForecaster { channels, hidden, steps, params }
    }

    /// Rebuilds a forecaster from checkpointed parameters.
    pub fn from_params(params: ParamSet) -> Result<Self, ForecastError> {
        let require = |name: &str| {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| ForecastError::BadCheckpoint {
                    msg: format!("missing parameter `{name}`"),
                })
        };
        let wx = require("lstm.wx")?;
        let head = require("head.weight")?;
        require("lstm.wh")?;
        require("lstm.bias")?;
        require("head.bias")?;
        let (channels, hidden) = (wx[0], wx[1] / 4);
        if head[0] != hidden || head[1] % channels != 0 {
            return Err(ForecastError::BadCheckpoint {
                msg: format!("head shape {:?} inconsistent with lstm {:?}", head, wx),
            });
        }
        let steps = head[1] / channels;
        Ok(LstmForecaster { channels, hidden, steps, params })
    }

    fn layer(channels: usize, hidden: usize) -> LstmLayer {
        LstmLayer::new("lstm", channels, hidden)
    }

    /// Builds the prediction graph: context [B, context_len, C] ->
    /// [B, steps, C] from the final hidden state.
    pub fn graph(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        context: Var,
    ) -> Result<Var, TensorError> {
        let shape = tape.shape(context).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(TensorError::InvalidArgument {
                op: "lstm_forward",
                msg: format!("expected [B, T, {}], got {:?}", self.channels, shape),
            });
        }
        let b = shape[0];
        let steps = split_time_steps(tape, context)?;
        let hidden = Self::layer(self.channels, self.hidden).unroll(tape, bound, &steps)?;
        let last = *hidden.last().expect("context is non-empty");
        let out = linear(tape, bound, "head", last)?;
        tape.reshape(out, &[b, self.steps, self.channels])
    }

    /// Inference: context values [B, context_len, C] -> [B, steps, C].
    pub fn forward(&self, context: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(context.clone());
        let out = self.graph(&mut tape, &bound, x)?;
        Ok(tape.value(out).clone())
    }
}
