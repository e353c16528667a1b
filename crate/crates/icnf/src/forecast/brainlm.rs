//! Masked-reconstruction transformer, after the BrainLM lineage with the
//! spatial branch removed: tokens are per-timestep channel vectors, the
//! final sixth of each window is replaced by a learned mask token before
//! encoding, and an encoder-decoder stack reconstructs the full window.
//!
//! Blocks are pre-norm (x + sublayer(norm(x))) with a final norm after
//! each stack; the decoder queries are the learned position embeddings
//! and cross-attend to the encoder output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layers::{layer_norm, layer_norm_init, linear, linear_init};
use crate::numerics::{uniform_init, BoundParams, ParamSet, Tape, Tensor, TensorError, Var};

use super::ForecastError;

/// Architecture dimensions. The feed-forward width is 4 x d_model and
/// the masked span is window / 6.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrainLmShape {
    pub channels: usize,
    pub window: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
}

impl Default for BrainLmShape {
    fn default() -> Self {
        BrainLmShape {
            channels: crate::data::CHANNELS,
            window: crate::windows::WINDOW_LEN,
            d_model: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
        }
    }
}

impl BrainLmShape {
    pub fn masked(&self) -> usize {
        self.window / 6
    }

    pub fn ff(&self) -> usize {
        4 * self.d_model
    }

    fn validate(&self) -> Result<(), ForecastError> {
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ForecastError::BadShape {
                msg: format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            });
        }
        if !self.window.is_multiple_of(6) {
            return Err(ForecastError::BadShape {
                msg: format!("window {} not divisible by 6", self.window),
            });
        }
        Ok(())
    }

    fn to_meta(self) -> Tensor {
        let v = vec![
            self.channels as f64,
            self.window as f64,
            self.d_model as f64,
            self.heads as f64,
            self.enc_blocks as f64,
            self.dec_blocks as f64,
        ];
        Tensor::new(vec![6], v).expect("meta shape")
    }

    fn from_meta(t: &Tensor) -> Result<Self, ForecastError> {
        if t.shape() != [6] {
            return Err(ForecastError::BadCheckpoint {
                msg: format!("meta.shape has shape {:?}, expected [6]", t.shape()),
            });
        }
        let v = t.values();
        Ok(BrainLmShape {
            channels: v[0] as usize,
            window: v[1] as usize,
            d_model: v[2] as usize,
            heads: v[3] as usize,
            enc_blocks: v[4] as usize,
            dec_blocks: v[5] as usize,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BrainLm {
    pub shape: BrainLmShape,
    pub params: ParamSet,
}

impl BrainLm {
    pub fn new(shape: BrainLmShape, seed: u64) -> Result<Self, ForecastError> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = shape.d_model;
        params.insert("meta.shape", shape.to_meta());
        linear_init(&mut params, &mut rng, "embed", shape.channels, d);
        params.insert("pos", uniform_init(&mut rng, vec![shape.window, d], d));
        params.insert("mask_token", uniform_init(&mut rng, vec![1, d], d));
        for i in 0..shape.enc_blocks {
            let p = format!("enc{i}");
            layer_norm_init(&mut params, &format!("{p}.ln1"), d);
            Self::attn_init(&mut params, &mut rng, &format!("{p}.attn"), d);
            layer_norm_init(&mut params, &format!("{p}.ln2"), d);
            linear_init(&mut params, &mut rng, &format!("{p}.ff1"), d, shape.ff());
            linear_init(&mut params, &mut rng, &format!("{p}.ff2"), shape.ff(), d);
        }
        layer_norm_init(&mut params, "enc_norm", d);
        for i in 0..shape.dec_blocks {
            let p = format!("dec{i}");
            layer_norm_init(&mut params, &format!("{p}.ln1"), d);
            Self::attn_init(&mut params, &mut rng, &format!("{p}.self"), d);
            layer_norm_init(&mut params, &format!("{p}.ln2"), d);
            Self::attn_init(&mut params, &mut rng, &format!("{p}.cross"), d);
            layer_norm_init(&mut params, &format!("{p}.ln3"), d);
            linear_init(&mut params, &mut rng, &format!("{p}.ff1"), d, shape.ff());
            linear_init(&mut params, &mut rng, &format!("{p}.ff2"), shape.ff(), d);
        }
        layer_norm_init(&mut params, "dec_norm", d);
        linear_init(&mut params, &mut rng, "head", d, shape.channels);
        Ok(BrainLm { shape, params })
    }

    /// Rebuilds from a checkpoint; the architecture is read back from the
    /// embedded `meta.shape` tensor and validated against the layout.
    pub fn from_params(params: ParamSet) -> Result<Self, ForecastError> {
        let meta = params.get("meta.shape").ok_or_else(|| ForecastError::BadCheckpoint {
            msg: "missing parameter `meta.shape`".into(),
        })?;
        let shape = BrainLmShape::from_meta(meta)?;
        let expected = BrainLm::new(shape, 0)?;
        if expected.params.len() != params.len() {
            return Err(ForecastError::BadCheckpoint {
                msg: format!(
                    "expected {} parameters for {:?}, found {}",
                    expected.params.len(),
                    shape,
                    params.len()
                ),
            });
        }
        for (name, tensor) in expected.params.iter() {
            let found = params.get(name).ok_or_else(|| ForecastError::BadCheckpoint {
                msg: format!("missing parameter `{name}`"),
            })?;
            if found.shape() != tensor.shape() {
                return Err(ForecastError::BadCheckpoint {
                    msg: format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        found.shape(),
                        tensor.shape()
                    ),
                });
            }
        }
        Ok(BrainLm { shape, params })
    }

    fn attn_init(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
        for proj in ["q", "k", "v", "o"] {
            linear_init(params, rng, &format!("{prefix}.{proj}"), d, d);
        }
    }

    /// Multi-head scaled dot-product attention. `q_in` is [B, Tq, d],
    /// `kv_in` is [B, Tk, d]. Softmax rows over keys are appended to
    /// `trace` when provided.
    fn attention(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        trace: &mut Option<&mut Vec<Var>>,
    ) -> Result<Var, TensorError> {
        let d = self.shape.d_model;
        let h = self.shape.heads;
        let dh = d / h;
        let (b, tq) = (tape.shape(q_in)[0], tape.shape(q_in)[1]);
        let tk = tape.shape(kv_in)[1];

        let to_heads = |tape: &mut Tape, x: Var, t: usize| -> Result<Var, TensorError> {
            let x = tape.reshape(x, &[b, t, h, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * h, t, dh])
        };

        let q_flat = tape.reshape(q_in, &[b * tq, d])?;
        let kv_flat = tape.reshape(kv_in, &[b * tk, d])?;
        let q = linear(tape, bound, &format!("{prefix}.q"), q_flat)?;
        let k = linear(tape, bound, &format!("{prefix}.k"), kv_flat)?;
        let v = linear(tape, bound, &format!("{prefix}.v"), kv_flat)?;
        let q = tape.reshape(q, &[b, tq, d])?;
        let q = to_heads(tape, q, tq)?;
        let k = tape.reshape(k, &[b, tk, d])?;
        let k = to_heads(tape, k, tk)?;
        let v = tape.reshape(v, &[b, tk, d])?;
        let v = to_heads(tape, v, tk)?;

        let k_t = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, k_t)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 2)?;
        if let Some(trace) = trace.as_deref_mut() {
            trace.push(attn);
        }
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[b, h, tq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * tq, d])?;
        let out = linear(tape, bound, &format!("{prefix}.o"), ctx)?;
        tape.reshape(out, &[b, tq, d])
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        prefix: &str,
        x: Var,
    ) -> Result<Var, TensorError> {
        let shape = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let h = linear(tape, bound, &format!("{prefix}.ff1"), flat)?;
        let h = tape.tanh(h);
        let out = linear(tape, bound, &format!("{prefix}.ff2"), h)?;
        tape.reshape(out, &shape)
    }

    /// Builds the reconstruction graph: window [B, W, C] -> [B, W, C].
    /// The final `masked()` positions of the input are never read.
    pub fn graph(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        window: Var,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var, TensorError> {
        let s = &self.shape;
        let in_shape = tape.shape(window).to_vec();
        if in_shape.len() != 3 || in_shape[1] != s.window || in_shape[2] != s.channels {
            return Err(TensorError::InvalidArgument {
                op: "brainlm_forward",
                msg: format!("expected [B, {}, {}], got {:?}", s.window, s.channels, in_shape),
            });
        }
        let b = in_shape[0];
        let d = s.d_model;
        let n_vis = s.window - s.masked();

        // Embed visible tokens only; masked slots take the mask token.
        let vis = tape.slice(window, 1, 0, n_vis)?;
        let vis_flat = tape.reshape(vis, &[b * n_vis, s.channels])?;
        let emb = linear(tape, bound, "embed", vis_flat)?;
        let emb = tape.reshape(emb, &[b, n_vis, d])?;
        let mask_rows =
            tape.embedding_lookup(bound.var("mask_token"), &vec![0usize; b * s.masked()])?;
        let mask_rows = tape.reshape(mask_rows, &[b, s.masked(), d])?;
        let tokens = tape.concat(&[emb, mask_rows], 1)?;

        let pos_indices: Vec<usize> = (0..b).flat_map(|_| 0..s.window).collect();
        let pos_rows = tape.embedding_lookup(bound.var("pos"), &pos_indices)?;
        let pos_rows = tape.reshape(pos_rows, &[b, s.window, d])?;
        let mut x = tape.add(tokens, pos_rows)?;

        for i in 0..s.enc_blocks {
            let p = format!("enc{i}");
            let normed = layer_norm(tape, bound, &format!("{p}.ln1"), x)?;
            let attn = self.attention(tape, bound, &format!("{p}.attn"), normed, normed, &mut trace)?;
            x = tape.add(x, attn)?;
            let normed = layer_norm(tape, bound, &format!("{p}.ln2"), x)?;
            let ff = self.feed_forward(tape, bound, &p, normed)?;
            x = tape.add(x, ff)?;
        }
        let memory = layer_norm(tape, bound, "enc_norm", x)?;

        // Decoder queries are the position embeddings.
        let mut y = pos_rows;
        for i in 0..s.dec_blocks {
            let p = format!("dec{i}");
            let normed = layer_norm(tape, bound, &format!("{p}.ln1"), y)?;
            let attn = self.attention(tape, bound, &format!("{p}.self"), normed, normed, &mut trace)?;
            y = tape.add(y, attn)?;
            let normed = layer_norm(tape, bound, &format!("{p}.ln2"), y)?;
            let attn =
                self.attention(tape, bound, &format!("{p}.cross"), normed, memory, &mut trace)?;
            y = tape.add(y, attn)?;
            let normed = layer_norm(tape, bound, &format!("{p}.ln3"), y)?;
            let ff = self.feed_forward(tape, bound, &p, normed)?;
            y = tape.add(y, ff)?;
        }
        let y = layer_norm(tape, bound, "dec_norm", y)?;
        let y_flat = tape.reshape(y, &[b * s.window, d])?;
        let out = linear(tape, bound, "head", y_flat)?;
        tape.reshape(out, &[b, s.window, s.channels])
    }

    /// Inference over window values [B, W, C]. `mask` must mark exactly
    /// the final window/6 positions.
    pub fn forward(&self, window: &Tensor, mask: &[bool]) -> Result<Tensor, ForecastError> {
        self.validate_mask(mask)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(window.clone());
        let out = self.graph(&mut tape, &bound, x, None)?;
        Ok(tape.value(out).clone())
    }

    /// Inference that also returns every attention-probability tensor.
    pub fn forward_traced(
        &self,
        window: &Tensor,
        mask: &[bool],
    ) -> Result<(Tensor, Vec<Tensor>), ForecastError> {
        self.validate_mask(mask)?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(window.clone());
        let mut trace = Vec::new();
        let out = self.graph(&mut tape, &bound, x, Some(&mut trace))?;
        let attn = trace.into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((tape.value(out).clone(), attn))
    }

    pub fn validate_mask(&self, mask: &[bool]) -> Result<(), ForecastError> {
        let expected = crate::windows::mask_tail(self.shape.window, 6)
            .expect("validated window divisibility");
        if mask != expected.as_slice() {
            return Err(ForecastError::MaskShape {
                msg: format!(
                    "mask must mark exactly the final {} of {} positions",
                    self.shape.masked(),
                    self.shape.window
                ),
            });
        }
        Ok(())
    }
}
