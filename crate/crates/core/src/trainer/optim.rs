//! Adam with optional decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Optimizer state. Moments are keyed by parameter name, so the update of a
/// parameter never depends on the order parameters are presented in.
///
/// Each parameter keeps its own bias-correction count, which matters for
/// parameters that only start training part-way through a run.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    weight_decay: f64,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn adam(lr: f64) -> Result<Self> {
        Self::adamw(lr, 0.0)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(invalid(format!("learning rate {lr} must be positive")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(invalid(format!("weight decay {weight_decay} must be nonnegative")));
        }
        Ok(Self { lr, weight_decay, steps: 0, moments: BTreeMap::new() })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    /// Number of completed [`AdamState::step`] calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every `(name, parameter, gradient)` triple.
    /// Nothing is modified if any gradient is non-finite or misshaped.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        for (name, param, grad) in updates {
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; grad.len()],
                second: vec![0.0; grad.len()],
                steps: 0,
            });
            if m.first.len() != grad.len() {
                return Err(invalid(format!("parameter {name} changed size")));
            }
            m.steps += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(m.steps as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(m.steps as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((w, &g), mf), ms) in
                param.data_mut().iter_mut().zip(grad.data()).zip(&mut m.first).zip(&mut m.second)
            {
                *mf = ADAM_BETA1 * *mf + (1.0 - ADAM_BETA1) * g;
                *ms = ADAM_BETA2 * *ms + (1.0 - ADAM_BETA2) * g * g;
                *w *= decay;
                *w -= self.lr * (*mf / c1) / ((*ms / c2).sqrt() + ADAM_EPS);
            }
        }
        self.steps += 1;
        Ok(())
    }
}
