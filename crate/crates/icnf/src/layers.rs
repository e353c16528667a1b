//! Shared building blocks for the sequence models: packed-gate LSTM
//! layers, linear projections, and layer-norm parameter plumbing.

use rand_chacha::ChaCha8Rng;

use crate::numerics::{uniform_init, BoundParams, ParamSet, Tape, Tensor, TensorError, Var};

/// One LSTM layer with gates packed [input, forget, cell, output] along
/// the last axis of the weight matrices.
#[derive(Debug, Clone)]
pub(crate) struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    pub prefix: String,
}

impl LstmLayer {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        LstmLayer { input, hidden, prefix: prefix.into() }
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Registers wx [input, 4H], wh [hidden, 4H], bias [4H] with the
    /// forget-gate bias set to 1.
    pub fn init_into(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let h = self.hidden;
        params.insert(self.name("wx"), uniform_init(rng, vec![self.input, 4 * h], self.input));
        params.insert(self.name("wh"), uniform_init(rng, vec![h, 4 * h], h));
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(1.0);
        params.insert(self.name("bias"), Tensor::new(vec![4 * h], bias).expect("bias shape"));
    }

    /// Unrolls over `steps` (each [B, input]); initial states are zero.
    /// Returns the hidden state after every step.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        steps: &[Var],
    ) -> Result<Vec<Var>, TensorError> {
        let wx = bound.var(&self.name("wx"));
        let wh = bound.var(&self.name("wh"));
        let bias = bound.var(&self.name("bias"));
        let h = self.hidden;
        let batch = tape.shape(steps[0])[0];

        let mut h_state = tape.constant(Tensor::zeros(vec![batch, h]));
        let mut c_state = tape.constant(Tensor::zeros(vec![batch, h]));
        let mut hidden_states = Vec::with_capacity(steps.len());
        for &x_t in steps {
            let zx = tape.matmul(x_t, wx)?;
            let zh = tape.matmul(h_state, wh)?;
            let z = tape.add(zx, zh)?;
            let z = tape.add_bias(z, bias)?;
            let gate_i = tape.slice(z, 1, 0, h)?;
            let gate_f = tape.slice(z, 1, h, 2 * h)?;
            let gate_g = tape.slice(z, 1, 2 * h, 3 * h)?;
            let gate_o = tape.slice(z, 1, 3 * h, 4 * h)?;
            let i = tape.sigmoid(gate_i);
            let f = tape.sigmoid(gate_f);
            let g = tape.tanh(gate_g);
            let o = tape.sigmoid(gate_o);
            let fc = tape.mul(f, c_state)?;
            let ig = tape.mul(i, g)?;
            c_state = tape.add(fc, ig)?;
            let tc = tape.tanh(c_state);
            h_state = tape.mul(o, tc)?;
            hidden_states.push(h_state);
        }
        Ok(hidden_states)
    }
}

/// Registers weight [in, out] and zero bias [out] under `prefix`.
pub(crate) fn linear_init(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    params.insert(format!("{prefix}.weight"), uniform_init(rng, vec![in_dim, out_dim], in_dim));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![out_dim]));
}

/// x [N, in] -> x @ weight + bias.
pub(crate) fn linear(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var, TensorError> {
    let xw = tape.matmul(x, bound.var(&format!("{prefix}.weight")))?;
    tape.add_bias(xw, bound.var(&format!("{prefix}.bias")))
}

/// Registers gamma = 1, beta = 0 of width `dim` under `prefix`.
pub(crate) fn layer_norm_init(params: &mut ParamSet, prefix: &str, dim: usize) {
    params.insert(
        format!("{prefix}.gamma"),
        Tensor::new(vec![dim], vec![1.0; dim]).expect("gamma shape"),
    );
    params.insert(format!("{prefix}.beta"), Tensor::zeros(vec![dim]));
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn layer_norm(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
) -> Result<Var, TensorError> {
    tape.layer_norm(
        x,
        bound.var(&format!("{prefix}.gamma")),
        bound.var(&format!("{prefix}.beta")),
        LAYER_NORM_EPS,
    )
}

/// Splits x [B, T, C] into T tensors of shape [B, C].
pub(crate) fn split_time_steps(tape: &mut Tape, x: Var) -> Result<Vec<Var>, TensorError> {
    let shape = tape.shape(x).to_vec();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let mut steps = Vec::with_capacity(t);
    for i in 0..t {
        let s = tape.slice(x, 1, i, i + 1)?;
        steps.push(tape.reshape(s, &[b, c])?);
    }
    Ok(steps)
}

/// Stacks T tensors of shape [B, H] into [B, T, H].
pub(crate) fn stack_time_steps(tape: &mut Tape, steps: &[Var]) -> Result<Var, TensorError> {
    let shape = tape.shape(steps[0]).to_vec();
    let (b, h) = (shape[0], shape[1]);
    let mut expanded = Vec::with_capacity(steps.len());
    for &s in steps {
        expanded.push(tape.reshape(s, &[b, 1, h])?);
    }
    tape.concat(&expanded, 1)
}
