use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conformer::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One AdamW update: decoupled decay `θ ← θ(1 - lr·wd)`, then the
/// bias-corrected Adam step. Parameters without a gradient entry are
/// treated as having a zero gradient.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.dims() != g.dims() {
            return Err(Error::Contract(format!(
                "gradient {:?} for parameter `{name}` of {:?}",
                g.dims(),
                p.dims()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
        if m.len() != p.numel() {
            return Err(Error::Contract(format!("optimizer state for `{name}` has {} entries", m.len())));
        }
        let g = grads.get(name).map(Tensor::data);
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            *theta *= decay;
            *theta -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
