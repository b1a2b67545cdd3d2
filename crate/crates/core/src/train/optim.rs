//! Adam with per-module weight decay, global-norm clipping and a cosine
//! learning-rate schedule.
//!
//! Decay coupling depends on the optimizer:
//!
//! - `adam`: classic L2, `g ← g + λ·w` before the moment update;
//! - `adamw`: decoupled, `w ← w·(1 − lr·λ)` after the Adam update.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::model::ParamSet;
use super::TrainError;
use crate::schedule::DecayPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        OptimizerState { m: zeros(), v: zeros(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradients (1 when no clipping happened).
    pub clip_scale: f64,
}

/// Scales `grads` in place so the global norm is at most `clip`.
pub fn clip_global_norm(grads: &mut ParamSet, clip: f64) -> StepStats {
    let grad_norm = grads.global_norm();
    let clip_scale = if grad_norm > clip { clip / grad_norm } else { 1.0 };
    if clip_scale != 1.0 {
        grads.tensors_mut().iter_mut().for_each(|g| g.mapv_inplace(|x| x * clip_scale));
    }
    StepStats { grad_norm, clip_scale }
}

/// One optimizer update. Clipping happens first, then decay and moments.
/// Decay coefficients come from `plan`, per module.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &mut ParamSet,
    state: &mut OptimizerState,
    lr: f64,
    plan: &DecayPlan,
    mode: OptimizerKind,
    clip: f64,
) -> Result<StepStats, TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((id, p), g) in params.iter().zip(grads.tensors()) {
        if p.dim() != g.dim() {
            return Err(TrainError::Shape(format!("`{id}`: parameter {:?} vs gradient {:?}", p.dim(), g.dim())));
        }
    }
    let stats = clip_global_norm(grads, clip);

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let ids = params.ids().to_vec();
    let decays: Vec<f64> = ids.iter().map(|id| plan.decay_for(id)).collect();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let decay = decays[i];
        let coupled = if mode == OptimizerKind::Adam { decay } else { 0.0 };
        Zip::from(&mut *p)
            .and(&grads.tensors()[i])
            .and(&mut state.m[i])
            .and(&mut state.v[i])
            .for_each(|w, &g, m, v| {
                let g = g + coupled * *w;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        if mode == OptimizerKind::AdamW && decay != 0.0 {
            let shrink = 1.0 - lr * decay;
            p.mapv_inplace(|w| w * shrink);
        }
        if p.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::NonFiniteUpdate(ids[i].clone()));
        }
    }
    Ok(stats)
}

/// Linear warmup over `ceil(warmup_fraction·T)` steps, then cosine decay to
/// `min_ratio·peak` at `t = T`.
pub fn lr_at(t: usize, total: usize, warmup_fraction: f64, peak: f64, min_ratio: f64) -> f64 {
    let warmup = (warmup_fraction * total as f64).ceil() as usize;
    let floor = min_ratio * peak;
    if t < warmup {
        return peak * t as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}
