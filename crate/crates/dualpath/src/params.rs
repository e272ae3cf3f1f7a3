//! Named trainable parameters and the SGD-with-momentum update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor plus its optimizer state.
///
/// The momentum buffer always has the value's shape and starts at zero.
/// Frozen parameters are never mutated by an optimizer step.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub momentum: Vec<f64>,
    pub frozen: bool,
}

impl Parameter {
    fn new(name: String, mut value: Tensor) -> Self {
        let momentum = vec![0.0; value.numel()];
        value.set_requires_grad(true);
        Parameter {
            name,
            value,
            momentum,
            frozen: false,
        }
    }
}

/// Ordered collection of named parameters.
///
/// Registration order is the serialization order, so checkpoints written
/// from the same architecture are byte-stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name.
    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter::new(name.to_string(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let p = &mut self.params[id.0];
        p.frozen = frozen;
        if frozen {
            p.value.zero_grad();
        }
    }

    /// SGD with momentum: `v <- momentum*v + g; p <- p - lr*v`.
    ///
    /// Frozen parameters are untouched. An unfrozen parameter without a
    /// populated gradient is a state error: it means the caller never ran
    /// a backward pass that reaches it.
    pub fn sgd_momentum_step(&mut self, lr: f64, momentum: f64) -> Result<()> {
        for p in &mut self.params {
            if p.frozen {
                continue;
            }
            let grad = p.value.grad().ok_or_else(|| {
                Error::State(format!("missing gradient on unfrozen parameter {}", p.name))
            })?;
            let grad = grad.to_vec();
            for ((v, g), x) in p
                .momentum
                .iter_mut()
                .zip(&grad)
                .zip(p.value.data_mut().iter_mut())
            {
                *v = momentum * *v + g;
                *x -= lr * *v;
            }
        }
        Ok(())
    }
}
