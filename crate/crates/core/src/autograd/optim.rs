use serde::{Deserialize, Serialize};

use super::array::Array;
use crate::error::{Error, Result};

/// A named trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub grad: Option<Array>,
    /// Frozen parameters are bound as constants and skipped by [`opt_step`].
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Self { name: name.into(), value, grad: None, frozen: false }
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate(&mut self, g: &Array) {
        match &mut self.grad {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// `v ← μv + g + λθ; θ ← θ − ηv`
    Sgd { momentum: f64 },
    /// Bias-corrected Adam with L2 weight decay folded into the gradient.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    /// Momentum buffer (SGD) or first moment (Adam), one per parameter.
    first: Vec<Array>,
    /// Second moment (Adam only).
    second: Vec<Array>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {weight_decay} must be finite and non-negative")));
        }
        Ok(Self { kind, lr, weight_decay, step: 0, first: Vec::new(), second: Vec::new() })
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd { momentum }, lr, weight_decay)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr, weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn ensure_slots(&mut self, params: &[&mut Param]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array::zeros(p.value.shape())).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
            return Ok(());
        }
        if self.first.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer holds state for {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (slot, p) in self.first.iter().zip(params) {
            if slot.shape() != p.value.shape() {
                return Err(Error::Usage(format!(
                    "optimizer state shape {:?} does not match parameter {} {:?}",
                    slot.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Applies one update to every non-frozen parameter, then clears all gradients.
pub fn opt_step(params: &mut [&mut Param], state: &mut OptimizerState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| !p.frozen && p.grad.is_none()) {
        return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
    }
    state.ensure_slots(params)?;
    state.step += 1;
    let (lr, wd) = (state.lr, state.weight_decay);
    let t = state.step as i32;
    for (i, p) in params.iter_mut().enumerate() {
        if p.frozen {
            p.zero_grad();
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let theta = p.value.data_mut();
        let g = grad.data();
        match state.kind {
            OptimizerKind::Sgd { momentum } => {
                let v = state.first[i].data_mut();
                for j in 0..theta.len() {
                    v[j] = momentum * v[j] + g[j] + wd * theta[j];
                    theta[j] -= lr * v[j];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = state.first[i].data_mut();
                let v = state.second[i].data_mut();
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for j in 0..theta.len() {
                    let gj = g[j] + wd * theta[j];
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
