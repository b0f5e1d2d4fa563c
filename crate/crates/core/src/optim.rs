//! Adam-style optimizer with the reciprocal learning-rate schedule
//! lr(t) = base / max(t, w) and explicit reset semantics: every training run
//! starts from t = 0 so the warmup plateau is repeated after each rewind.

use crate::error::{Error, Result};
use crate::model::ParamRegistry;

/// Hyperparameters of the adaptive update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            base_lr: crate::config::DEFAULT_BASE_LR,
        }
    }
}

/// Learning rate at step `t`: constant `base/w` on the warmup plateau,
/// then decaying as `base/t`.
pub fn lr(t: u64, warmup: u64, base: f64) -> f64 {
    let w = warmup.max(1);
    base / (t.max(w) as f64)
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: u64,
    pub warmup: u64,
    pub params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Fresh state aligned with the registry: t = 0, zero moments.
    pub fn new(reg: &ParamRegistry, params: AdamParams, warmup: u64) -> Self {
        let m = reg
            .entries()
            .map(|e| vec![0.0; e.tensor.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        OptimizerState {
            t: 0,
            warmup: warmup.max(1),
            params,
            m,
            v,
        }
    }

    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &[f64] {
        &self.v[idx]
    }

    /// Replace the moment buffers of one parameter (deserialization path).
    pub fn load_moments(&mut self, idx: usize, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if idx >= self.m.len() || m.len() != self.m[idx].len() || v.len() != self.v[idx].len() {
            return Err(Error::Contract(format!(
                "moment buffers for parameter {idx} do not match the registry"
            )));
        }
        self.m[idx] = m;
        self.v[idx] = v;
        Ok(())
    }

    /// Zero the moment buffers of one parameter at the given flat positions.
    /// Used when a mask is applied so adaptive state cannot keep pushing a
    /// pruned weight away from zero.
    pub fn zero_moments_at(&mut self, idx: usize, positions: impl Iterator<Item = usize>) {
        for p in positions {
            self.m[idx][p] = 0.0;
            self.v[idx][p] = 0.0;
        }
    }

    pub fn moment_count(&self) -> usize {
        self.m.len()
    }
}

/// Reset to a pre-training state: t = 0 and all moments zeroed.
pub fn reset_optimizer(state: &mut OptimizerState) {
    state.t = 0;
    for buf in state.m.iter_mut().chain(state.v.iter_mut()) {
        for x in buf.iter_mut() {
            *x = 0.0;
        }
    }
}

/// One bias-corrected adaptive update over every registry parameter.
/// Requires a populated gradient on each parameter; increments `state.t`.
pub fn optimizer_step(reg: &mut ParamRegistry, state: &mut OptimizerState) -> Result<()> {
    if state.m.len() != reg.len() {
        return Err(Error::Contract(format!(
            "optimizer state covers {} parameters but registry has {}",
            state.m.len(),
            reg.len()
        )));
    }
    let step_lr = lr(state.t, state.warmup, state.params.base_lr);
    let tpow = (state.t + 1) as i32;
    let AdamParams {
        beta1, beta2, eps, ..
    } = state.params;
    let bc1 = 1.0 - beta1.powi(tpow);
    let bc2 = 1.0 - beta2.powi(tpow);
    for (idx, entry) in reg.entries_mut().enumerate() {
        let name = entry.name.clone();
        let grad = entry
            .tensor
            .grad()
            .ok_or_else(|| Error::Contract(format!("missing gradient for parameter '{name}'")))?
            .to_vec();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let values = entry.tensor.values_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= step_lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.t += 1;
    Ok(())
}
