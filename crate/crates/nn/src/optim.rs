use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update over every trainable parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, entry) in params.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != entry.tensor.shape() {
            return Err(NnError::Shape(format!(
                "gradient {} for parameter {name} of shape {}",
                g.shape(),
                entry.tensor.shape()
            )));
        }
        let n = g.len();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (((p, &gi), mi), vi) in entry
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi as f64;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}
