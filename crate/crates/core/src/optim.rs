//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to the parameter groups that opt in.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it freezes the parameters, which the tests use.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adam lr must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("adam {name} must lie in (0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("adam eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// The same hyperparameters with decay switched off.
    pub fn without_decay(self) -> Self {
        Self {
            weight_decay: 0.0,
            ..self
        }
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// m ← β₁m + (1−β₁)g
/// v ← β₂v + (1−β₂)g²
/// θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ
/// ```
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.len() {
        return Err(Error::Dimension(format!(
            "adam_step: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = hyper.lr;
    let eps = hyper.eps;
    let decay = lr * hyper.weight_decay;
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = f64::from(g);
        let mi = b1 * f64::from(*m) + (1.0 - b1) * g;
        let vi = b2 * f64::from(*v) + (1.0 - b2) * g * g;
        *m = mi as f32;
        *v = vi as f32;
        let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        let old = f64::from(*p);
        *p = (old - update - decay * old) as f32;
    }
    Ok(())
}
