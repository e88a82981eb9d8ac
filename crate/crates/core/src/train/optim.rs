use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Matrix;

/// Adaptive-moment hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let z: Vec<Matrix> = params
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            first: z.clone(),
            second: z,
            step: 0,
        }
    }
}

/// One bias-corrected update:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::TrainingDiverged("non-finite gradient".into()));
    }
    let values = params.values_mut();
    if values.len() != grads.as_slice().len() || values.len() != state.first.len() {
        return Err(Error::invalid("optimizer state does not match the parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in values
        .iter_mut()
        .zip(grads.as_slice())
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::invalid("gradient shape does not match its parameter"));
        }
        for (((pv, gv), mv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps) + lr * cfg.weight_decay * *pv;
        }
    }
    Ok(())
}

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total_steps`;
/// steps past the end stay at `lr_min`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 && total_steps == 0 { lr0 } else { lr_min };
    }
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}
