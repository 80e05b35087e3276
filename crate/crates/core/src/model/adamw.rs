//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use super::{FlowModel, Gradients, Layer};
use crate::error::{FodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, weight_decay: 0.0, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &FlowModel, config: AdamWConfig) -> Result<Self> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !(config.lr > 0.0) || !ok(config.beta1) || !ok(config.beta2) || !(config.eps > 0.0) || !(config.weight_decay >= 0.0) {
            return Err(FodError::InvalidArgument(format!("invalid AdamW settings {config:?}")));
        }
        let zeros: Vec<Layer> = model.layers().iter().map(Layer::zeros_like).collect();
        Ok(Self { config, m: zeros.clone(), v: zeros, step: 0 })
    }
}

fn shapes_match(a: &[Layer], b: &[Layer]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.weight.dim() == y.weight.dim() && x.bias.len() == y.bias.len())
}

/// One AdamW update in place; `opt.step` advances by one.
pub fn adamw_step(model: &mut FlowModel, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if !shapes_match(model.layers(), &grads.layers)
        || !shapes_match(model.layers(), &opt.m)
        || !shapes_match(model.layers(), &opt.v)
    {
        return Err(FodError::InvalidArgument("gradient or moment shapes do not match the model".into()));
    }
    if !grads.is_finite() {
        return Err(FodError::NonFinite("gradients"));
    }

    let AdamWConfig { lr, beta1, beta2, weight_decay, eps } = opt.config;
    opt.step += 1;
    let bc1 = 1.0 - beta1.powf(opt.step as f64);
    let bc2 = 1.0 - beta2.powf(opt.step as f64);
    let decay = 1.0 - lr * weight_decay;

    for (((p, g), m), v) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
    {
        for (((p, g), m), v) in p
            .slices_mut()
            .into_iter()
            .zip(g.slices())
            .zip(m.slices_mut())
            .zip(v.slices_mut())
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= decay;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
