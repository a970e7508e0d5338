use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup to `lr_base` at `warmup`, then inverse square-root decay.
pub fn lr_schedule(step: u64, lr_base: f64, warmup: u64) -> Result<f64> {
    if warmup < 1 {
        return Err(Error::Config("warmup must be at least 1".into()));
    }
    if step < 1 {
        return Err(Error::Config("steps are numbered from 1".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(lr_base * (s / w).min((w / s).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// Bias-corrected Adam update of every parameter that has a gradient.
/// Updated values are rounded to the store's precision.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let precision = store.precision();
    for (name, g) in grads {
        let n = g.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let p = store.get_mut(name)?.data_mut();
        for i in 0..n {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] = precision.round(p[i] - lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
