//! Named parameters and the AdamW optimizer.

use crate::autograd::tape::{Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};

/// Identifier of a parameter within a [`ParamSet`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with a unique name and an optional accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Registry of all parameters of a model, in registration order.
///
/// Registration order is the serialization order of checkpoints, so it must
/// be deterministic for a given model configuration.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!(
                "parameter name `{name}` already registered"
            )));
        }
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Inject a parameter into a tape as a differentiable leaf.
    ///
    /// With `trainable = false` the leaf is constant: values still feed the
    /// forward pass but no gradient is accumulated for this parameter.
    pub fn var(&self, tape: &mut Tape, id: ParamId, trainable: bool) -> Var {
        let v = if trainable {
            let v = tape.leaf_grad(self.params[id.0].value.clone());
            tape.link_param(v, id.0);
            v
        } else {
            tape.leaf(self.params[id.0].value.clone())
        };
        v
    }

    /// Accumulate gradients from a finished backward pass into the
    /// parameters that were injected via [`ParamSet::var`].
    pub fn accumulate(
        &mut self,
        tape: &Tape,
        grads: &crate::autograd::tape::Gradients,
    ) -> Result<()> {
        for &(node, pidx) in tape.param_links() {
            if let Some(g) = grads.get_node(node) {
                match &mut self.params[pidx].grad {
                    Some(acc) => acc.add_assign(g)?,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Largest absolute gradient entry across all parameters, for diagnostics.
    pub fn max_abs_grad(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter().copied())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One optimizer step over `ids`. Every listed parameter must carry a
    /// gradient; gradients are left in place and cleared by an explicit
    /// [`ParamSet::zero_grads`] call.
    pub fn step(&mut self, params: &mut ParamSet, ids: &[ParamId]) -> Result<()> {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &id in ids {
            let grad = params.params[id.0]
                .grad
                .clone()
                .ok_or_else(|| Error::MissingGrad(params.params[id.0].name.clone()))?;
            let p = &mut params.params[id.0];
            let slot = &mut self.moments[id.0];
            if slot.is_none() {
                *slot = Some((Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            }
            let (m, v) = slot.as_mut().unwrap();
            for i in 0..p.value.numel() {
                let g = grad.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                let w = p.value.data()[i];
                p.value.data_mut()[i] =
                    w - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w);
            }
        }
        Ok(())
    }
}
