use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::freezing::MomentStore;
use crate::model::{ParameterRegistry, TaggedParam};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First and second moments, kept only for trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    /// Zeroed moments for every currently trainable parameter.
    pub fn new(params: &ParameterRegistry) -> Self {
        let moments = params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| {
                let n = p.numel();
                (
                    p.name().to_string(),
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self { moments }
    }

    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Scalars held across all buffers.
    pub fn numel(&self) -> usize {
        self.moments.values().map(|b| b.m.len() + b.v.len()).sum()
    }
}

impl MomentStore for AdamState {
    fn discard(&mut self, name: &str) {
        self.moments.remove(name);
    }
}

/// One bias-corrected Adam update at step `t` (counting from 1) using the
/// gradients stored on the parameters. A trainable parameter without a
/// gradient buffer is treated as having a zero gradient.
pub fn adam_step(
    params: &mut ParameterRegistry,
    state: &mut AdamState,
    t: u64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if t == 0 {
        return Err(TrainError::Optimizer("step counter starts at 1".into()));
    }
    let trainable = params.iter().filter(|p| p.trainable()).count();
    if trainable != state.moments.len() {
        return Err(TrainError::Optimizer(format!(
            "{} moment buffers for {trainable} trainable parameters",
            state.moments.len()
        )));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for p in params.iter_mut().filter(|p| p.trainable()) {
        let name = p.name().to_string();
        let numel = p.numel();
        let buf = state
            .moments
            .get_mut(&name)
            .filter(|b| b.m.len() == numel)
            .ok_or_else(|| {
                TrainError::Optimizer(format!("no matching moment buffer for {name}"))
            })?;
        let (x, g) = p.data_and_grad_mut();
        for i in 0..numel {
            let gi = g.map_or(0.0, |g| g[i]);
            buf.m[i] = cfg.beta1 * buf.m[i] + (1.0 - cfg.beta1) * gi;
            buf.v[i] = cfg.beta2 * buf.v[i] + (1.0 - cfg.beta2) * gi * gi;
            x[i] -= cfg.learning_rate * (buf.m[i] / c1) / ((buf.v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
