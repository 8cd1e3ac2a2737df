use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nnet::{Gradients, ModelParams};

/// Inverse-square-root schedule with linear warmup:
/// `scale · d_model^(−1/2) · min(step^(−1/2), step · warmup^(−3/2))`.
pub fn lr_at(step: usize, warmup_steps: usize, d_model: usize, lr_scale: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup_steps.max(1) as f64;
    lr_scale * (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moment estimates per trainable tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

/// One bias-corrected Adam update, in place.
///
/// The first call adopts the gradient keyset; later calls must present the
/// same keys.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if state.m.is_empty() {
        for (k, g) in grads.iter() {
            state.m.insert(k.to_string(), Array2::zeros(g.raw_dim()));
            state.v.insert(k.to_string(), Array2::zeros(g.raw_dim()));
        }
    }
    if !state.m.keys().map(String::as_str).eq(grads.keys()) {
        return Err(Error::shape("gradient keyset differs from optimizer state"));
    }
    for (k, g) in grads.iter() {
        match params.get(k) {
            Some(p) if p.dim() == g.dim() => {}
            Some(p) => return Err(Error::shape(format!("{k}: param {:?} vs grad {:?}", p.dim(), g.dim()))),
            None => return Err(Error::shape(format!("gradient for unknown parameter {k}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, g) in grads.iter() {
        let m = state.m.get_mut(k).unwrap();
        let v = state.v.get_mut(k).unwrap();
        let p = params.get_mut(k).unwrap();
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    }
    Ok(())
}
