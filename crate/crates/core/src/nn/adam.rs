use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub name: String,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Optimizer state; moments are created (as zeros) on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<AdamMoments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update of every learnable group of `params`.
/// Fails without touching anything if a gradient is non-finite.
pub fn adam_step<T: Real, P: ParamSet<T>>(params: &mut P, grads: &P, state: &mut AdamState<T>) -> Result<()> {
    let mut gs: Vec<(String, Vec<T>)> = Vec::new();
    grads.visit_params(&mut |name, _, g| gs.push((name.to_string(), g.to_vec())));
    for (name, g) in &gs {
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{k}] is not finite")));
        }
    }
    if state.moments.is_empty() {
        state.moments = gs
            .iter()
            .map(|(name, g)| AdamMoments {
                name: name.clone(),
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            })
            .collect();
    }
    let mut mismatch = None;
    let mut idx = 0;
    params.visit_params_mut(&mut |name, _, p| {
        let ok = gs.get(idx).is_some_and(|(n, g)| n == name && g.len() == p.len())
            && state
                .moments
                .get(idx)
                .is_some_and(|m| m.name == name && m.m.len() == p.len());
        if !ok && mismatch.is_none() {
            mismatch = Some(name.to_string());
        }
        idx += 1;
    });
    if let Some(name) = mismatch.or_else(|| (idx != gs.len()).then(|| "<count>".to_string())) {
        return Err(Error::shape(format!(
            "parameter group {name} does not match gradient/optimizer state"
        )));
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc1 = T::from_f64_lossy(1.0 - c.beta1.powf(t));
    let bc2 = T::from_f64_lossy(1.0 - c.beta2.powf(t));
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (lr, eps) = (T::from_f64_lossy(c.lr), T::from_f64_lossy(c.epsilon));
    let one = T::one();
    let mut idx = 0;
    params.visit_params_mut(&mut |_, _, p| {
        let g = &gs[idx].1;
        let mom = &mut state.moments[idx];
        for k in 0..p.len() {
            mom.m[k] = b1 * mom.m[k] + (one - b1) * g[k];
            mom.v[k] = b2 * mom.v[k] + (one - b2) * g[k] * g[k];
            let m_hat = mom.m[k] / bc1;
            let v_hat = mom.v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    Ok(())
}
