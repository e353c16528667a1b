//! Named parameter collections shared by every model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// An ordered, named set of parameter tensors. Order is insertion order
/// and is part of the checkpoint contract.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics on duplicate names: parameter layouts are
    /// fixed at model construction, so a duplicate is a programming error.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every parameter on `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), true)))
            .collect();
        BoundParams { vars }
    }

    /// Registers every parameter as an untracked constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), false)))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for one binding of a [`ParamSet`].
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Handle for a parameter. Panics on unknown names (fixed layouts).
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Gradients in parameter order, as produced by `Tape::backward`.
    pub fn collect_grads(&self, tape: &Tape) -> Result<Vec<Vec<f64>>, TensorError> {
        self.vars
            .iter()
            .map(|(n, v)| {
                tape.grad(*v)
                    .map(|g| g.to_vec())
                    .ok_or_else(|| TensorError::MissingGradient(n.clone()))
            })
            .collect()
    }
}

/// Matrix initialization: uniform(-a, a) with a = 1/sqrt(fan_in).
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let values = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, values).expect("init shape")
}
