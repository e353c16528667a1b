//! Adam optimizer with bias correction.

use super::{ParamSet, TensorError};

/// Per-parameter first/second moment buffers plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialized moments shaped like `params`.
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m,
            v,
        }
    }

    /// One bias-corrected Adam update. `grads` must be in parameter order,
    /// as returned by `BoundParams::collect_grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<(), TensorError> {
        if grads.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for ((name, tensor), grad) in params.iter_mut().zip(grads) {
            if grad.len() != tensor.numel() {
                return Err(TensorError::InvalidArgument {
                    op: "adam_step",
                    msg: format!(
                        "gradient for `{}` has {} values, parameter has {}",
                        name,
                        grad.len(),
                        tensor.numel()
                    ),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, p) in tensor.values_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
