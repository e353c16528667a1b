//! Operation tape: forward evaluation with recorded edges, reverse-mode
//! gradient accumulation.

use super::{gemm, Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    /// Batched matmul over the leading axis: [B,m,k] x [B,k,n] -> [B,m,n].
    Bmm(Var, Var),
    Add(Var, Var),
    /// Broadcasts `bias` (length = last axis) over all leading axes.
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Mse(Var, Var),
    BceWithLogits(Var, Var),
    Sum(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    EmbeddingLookup {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run computation graph. Build one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    /// Registers an input value. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Registers a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer of `v`, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(id)
    }

    fn track(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `op` if any input is tracked, otherwise stores a plain value.
    fn emit(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        if self.track(inputs) {
            self.push(value, true, op)
        } else {
            self.push(value, false, Op::Leaf)
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.values(a), false, self.values(b), false, 0.0, &mut out);
        let value = Tensor { shape: vec![m, n], values: out };
        Ok(self.emit(value, &[a, b], Op::Matmul(a, b)))
    }

    /// Batched matrix product [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            gemm(
                m,
                k,
                n,
                1.0,
                &self.values(a)[i * m * k..(i + 1) * m * k],
                false,
                &self.values(b)[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor { shape: vec![bsz, m, n], values: out };
        Ok(self.emit(value, &[a, b], Op::Bmm(a, b)))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor { shape: self.shape(a).to_vec(), values };
        Ok(self.emit(value, &[a, b], op))
    }

    /// Adds a vector (length = last axis of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        let d = *sa.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: sa, rhs: sb });
        }
        let bv = self.values(bias);
        let values = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % d])
            .collect();
        let value = Tensor { shape: sa, values };
        Ok(self.emit(value, &[a, bias], Op::AddBias(a, bias)))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let values = self.values(a).iter().map(|&x| x * c).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), values };
        self.emit(value, &[a], Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let values = self.values(a).iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), values };
        self.emit(value, &[a], Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let values = self.values(a).iter().map(|&x| x.tanh()).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), values };
        self.emit(value, &[a], Op::Tanh(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, shape),
            });
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let x = self.values(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * mid * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..mid {
                    max = max.max(x[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..mid {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..mid {
                    out[at(j)] /= denom;
                }
            }
        }
        let value = Tensor { shape, values: out };
        Ok(self.emit(value, &[a], Op::Softmax(a, axis)))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.values(x);
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();
        let mut out = vec![0.0; xv.len()];
        for (row_out, row) in out.chunks_mut(d).zip(xv.chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let value = Tensor { shape, values: out };
        Ok(self.emit(value, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let n = self.value(pred).numel() as f64;
        let sum: f64 = self
            .values(pred)
            .iter()
            .zip(self.values(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / n);
        Ok(self.emit(value, &[pred, target], Op::Mse(pred, target)))
    }

    /// Mean binary cross-entropy of logits against {0,1} targets, as a
    /// scalar. Computed in the stable max(z,0) - z*y + ln(1+e^-|z|) form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, TensorError> {
        if self.shape(logits) != self.shape(targets) {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: self.shape(targets).to_vec(),
            });
        }
        let n = self.value(logits).numel() as f64;
        let sum: f64 = self
            .values(logits)
            .iter()
            .zip(self.values(targets))
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(sum / n);
        Ok(self.emit(value, &[logits, targets], Op::BceWithLogits(logits, targets)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.values(a).iter().sum());
        self.emit(value, &[a], Op::Sum(a))
    }

    /// Contiguous sub-range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {}..{} on axis {} of shape {:?}", start, end, axis, shape),
            });
        }
        let len = end - start;
        let (outer, mid, inner) = split_axis(&shape, axis);
        let xv = self.values(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor { shape: out_shape, values: out };
        Ok(self.emit(value, &[x], Op::Slice { x, axis, start, len }))
    }

    /// Concatenation along `axis`; shapes must match on other axes.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {} out of range for shape {:?}", axis, first),
            });
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out_shape = first;
        out_shape[axis] = axis_total;
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &v in inputs {
            let mid = self.shape(v)[axis];
            let xv = self.values(v);
            for o in 0..outer {
                let src = o * mid * inner;
                let dst = o * axis_total * inner + offset * inner;
                out[dst..dst + mid * inner].copy_from_slice(&xv[src..src + mid * inner]);
            }
            offset += mid;
        }
        let value = Tensor { shape: out_shape, values: out };
        Ok(self.emit(value, inputs, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", self.shape(x)),
            });
        }
        self.permute(x, &[1, 0])
    }

    /// Reorders axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| {
                if a >= shape.len() || seen[a] {
                    false
                } else {
                    seen[a] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("axes {:?} invalid for shape {:?}", axes, shape),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let values = permute_values(self.values(x), &shape, axes);
        let value = Tensor { shape: out_shape, values };
        Ok(self.emit(value, &[x], Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Reinterprets the value buffer under a new shape with equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::InvalidArgument {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape(x), shape),
            });
        }
        let value = Tensor { shape: shape.to_vec(), values: self.values(x).to_vec() };
        Ok(self.emit(value, &[x], Op::Reshape(x)))
    }

    /// Gathers rows of `table` ([rows, d]) at `indices` -> [len(indices), d].
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("table must be rank 2, got {:?}", shape),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "embedding_lookup",
                msg: format!("index {} out of range for {} rows", bad, rows),
            });
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor { shape: vec![indices.len(), d], values: out };
        Ok(self.emit(
            value,
            &[table],
            Op::EmbeddingLookup { table, indices: indices.to_vec() },
        ))
    }

    fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar `loss` into every tracked
    /// ancestor. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        self.backward_done = true;
        // A parameter the loss never touches still reports a zero gradient.
        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    fn wants_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, grad: &[f64]) {
        match *op {
            Op::Leaf => {}

            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants_grad(a) {
                    // dA = dC * B^T
                    let bv = self.nodes[b.0].value.values().to_vec();
                    if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                        gemm(m, n, k, 1.0, grad, false, &bv, true, 1.0, ga);
                    }
                }
                if self.wants_grad(b) {
                    // dB = A^T * dC
                    let av = self.nodes[a.0].value.values().to_vec();
                    if let Some(gb) = self.nodes[b.0].grad.as_mut() {
                        gemm(k, m, n, 1.0, &av, true, grad, false, 1.0, gb);
                    }
                }
            }

            Op::Bmm(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.wants_grad(a) {
                    let bv = self.nodes[b.0].value.values().to_vec();
                    if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                        for i in 0..bsz {
                            gemm(
                                m,
                                n,
                                k,
                                1.0,
                                &grad[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                true,
                                1.0,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                }
                if self.wants_grad(b) {
                    let av = self.nodes[a.0].value.values().to_vec();
                    if let Some(gb) = self.nodes[b.0].grad.as_mut() {
                        for i in 0..bsz {
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                &av[i * m * k..(i + 1) * m * k],
                                true,
                                &grad[i * m * n..(i + 1) * m * n],
                                false,
                                1.0,
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                }
            }

            Op::Add(a, b) => {
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }

            Op::AddBias(a, bias) => {
                self.accumulate(a, grad);
                if self.wants_grad(bias) {
                    let d = self.nodes[bias.0].value.numel();
                    if let Some(gb) = self.nodes[bias.0].grad.as_mut() {
                        for (i, g) in grad.iter().enumerate() {
                            gb[i % d] += g;
                        }
                    }
                }
            }

            Op::Mul(a, b) => {
                if self.wants_grad(a) {
                    let bv = self.nodes[b.0].value.values().to_vec();
                    if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                        for ((gi, g), bi) in ga.iter_mut().zip(grad).zip(&bv) {
                            *gi += g * bi;
                        }
                    }
                }
                if self.wants_grad(b) {
                    let av = self.nodes[a.0].value.values().to_vec();
                    if let Some(gb) = self.nodes[b.0].grad.as_mut() {
                        for ((gi, g), ai) in gb.iter_mut().zip(grad).zip(&av) {
                            *gi += g * ai;
                        }
                    }
                }
            }

            Op::Scale(a, c) => {
                if self.wants_grad(a) {
                    if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                        for (gi, g) in ga.iter_mut().zip(grad) {
                            *gi += g * c;
                        }
                    }
                }
            }

            Op::Sigmoid(a) => {
                let out = self.nodes[out_idx].value.values().to_vec();
                if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                    for ((gi, g), s) in ga.iter_mut().zip(grad).zip(&out) {
                        *gi += g * s * (1.0 - s);
                    }
                }
            }

            Op::Tanh(a) => {
                let out = self.nodes[out_idx].value.values().to_vec();
                if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                    for ((gi, g), t) in ga.iter_mut().zip(grad).zip(&out) {
                        *gi += g * (1.0 - t * t);
                    }
                }
            }

            Op::Softmax(a, axis) => {
                let out = self.nodes[out_idx].value.values().to_vec();
                let shape = self.nodes[out_idx].value.shape().to_vec();
                let (outer, mid, inner) = split_axis(&shape, axis);
                if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * mid * inner + j * inner + i;
                            let mut dot = 0.0;
                            for j in 0..mid {
                                dot += grad[at(j)] * out[at(j)];
                            }
                            for j in 0..mid {
                                ga[at(j)] += out[at(j)] * (grad[at(j)] - dot);
                            }
                        }
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.nodes[x.0].value.values().to_vec();
                let gv = self.nodes[gamma.0].value.values().to_vec();
                let d = gv.len();
                let rows = xv.len() / d;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let g_out = &grad[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += g_out[j] * xhat[j];
                        dbeta[j] += g_out[j];
                        dxhat[j] = g_out[j] * gv[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }

            Op::Mse(pred, target) => {
                let pv = self.nodes[pred.0].value.values().to_vec();
                let tv = self.nodes[target.0].value.values().to_vec();
                let n = pv.len() as f64;
                let g = grad[0];
                if self.wants_grad(pred) {
                    if let Some(gp) = self.nodes[pred.0].grad.as_mut() {
                        for (i, gi) in gp.iter_mut().enumerate() {
                            *gi += g * 2.0 * (pv[i] - tv[i]) / n;
                        }
                    }
                }
                if self.wants_grad(target) {
                    if let Some(gt) = self.nodes[target.0].grad.as_mut() {
                        for (i, gi) in gt.iter_mut().enumerate() {
                            *gi -= g * 2.0 * (pv[i] - tv[i]) / n;
                        }
                    }
                }
            }

            Op::BceWithLogits(logits, targets) => {
                let zv = self.nodes[logits.0].value.values().to_vec();
                let yv = self.nodes[targets.0].value.values().to_vec();
                let n = zv.len() as f64;
                let g = grad[0];
                if self.wants_grad(logits) {
                    if let Some(gz) = self.nodes[logits.0].grad.as_mut() {
                        for (i, gi) in gz.iter_mut().enumerate() {
                            *gi += g * (sigmoid(zv[i]) - yv[i]) / n;
                        }
                    }
                }
                if self.wants_grad(targets) {
                    if let Some(gy) = self.nodes[targets.0].grad.as_mut() {
                        for (i, gi) in gy.iter_mut().enumerate() {
                            *gi -= g * zv[i] / n;
                        }
                    }
                }
            }

            Op::Sum(a) => {
                let g = grad[0];
                if let Some(ga) = self.nodes[a.0].grad.as_mut() {
                    for gi in ga.iter_mut() {
                        *gi += g;
                    }
                }
            }

            Op::Slice { x, axis, start, len } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (outer, mid, inner) = split_axis(&shape, axis);
                if let Some(gx) = self.nodes[x.0].grad.as_mut() {
                    for o in 0..outer {
                        let dst = o * mid * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += grad[src + j];
                        }
                    }
                }
            }

            Op::Concat { ref inputs, axis } => {
                let out_shape = self.nodes[out_idx].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for &v in inputs {
                    let mid = self.shape(v)[axis];
                    if self.wants_grad(v) {
                        if let Some(gv) = self.nodes[v.0].grad.as_mut() {
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                let dst = o * mid * inner;
                                for j in 0..mid * inner {
                                    gv[dst + j] += grad[src + j];
                                }
                            }
                        }
                    }
                    offset += mid;
                }
            }

            Op::Permute { x, ref axes } => {
                let out_shape = self.nodes[out_idx].value.shape().to_vec();
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = permute_values(grad, &out_shape, &inverse);
                self.accumulate(x, &dx);
            }

            Op::Reshape(x) => {
                self.accumulate(x, grad);
            }

            Op::EmbeddingLookup { table, ref indices } => {
                let d = self.shape(table)[1];
                if let Some(gt) = self.nodes[table.0].grad.as_mut() {
                    for (i, &row) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[row * d + j] += grad[i * d + j];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// (product of dims before `axis`, dim at `axis`, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_values(values: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // Stride of the input along each output axis.
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; values.len()];
    let mut coords = vec![0usize; rank];
    let mut in_idx = 0usize;
    for slot in out.iter_mut() {
        *slot = values[in_idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            in_idx += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            in_idx -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).values(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]), false);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).values(), &[0.5]);
    }

    #[test]
    fn mse_identity_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.5, -2.0, 0.25]), false);
        let y = tape.leaf(t(&[3], &[1.5, -2.0, 0.25]), false);
        let l = tape.mse(x, y).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn softmax_rows_form_simplex() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 4.0, -1.0]), false);
        let s = tape.softmax(x, 1).unwrap();
        let v = tape.value(s).values();
        for row in v.chunks(3) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_derivative_of_squared_error() {
        // loss = (w*x - y)^2 with w=0, x=1, y=1 -> dloss/dw = -2
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1, 1], &[0.0]), true);
        let x = tape.leaf(t(&[1, 1], &[1.0]), false);
        let y = tape.leaf(t(&[1, 1], &[1.0]), false);
        let wx = tape.matmul(w, x).unwrap();
        let loss = tape.mse(wx, y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[-2.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1], &[2.0]), true);
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::BackwardAlreadyRun);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sigmoid(w);
        assert!(matches!(tape.backward(s), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1.0]), false);
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::DetachedGraph);
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // loss = sum(w + w) -> dloss/dw = 2 per element
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[0.3, -0.7]), true);
        let d = tape.add(w, w).unwrap();
        let loss = tape.sum(d);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
        );
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]), false);
        let left = tape.slice(x, 1, 0, 2).unwrap();
        let right = tape.slice(x, 1, 2, 4).unwrap();
        let glued = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(glued), tape.value(x));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.leaf(t(&[2, 3, 4], &vals), false);
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn embedding_lookup_gathers_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]), true);
        let out = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(out).values(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn bce_with_logits_matches_naive_formula() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[2], &[0.8, -1.3]), false);
        let y = tape.leaf(t(&[2], &[1.0, 0.0]), false);
        let l = tape.bce_with_logits(z, y).unwrap();
        let naive = |z: f64, y: f64| -(y * sigmoid(z).ln() + (1.0 - y) * (1.0 - sigmoid(z)).ln());
        let expected = (naive(0.8, 1.0) + naive(-1.3, 0.0)) / 2.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
    }
}
