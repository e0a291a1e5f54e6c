use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Which part of the joint model a parameter belongs to. Training stages
/// freeze and unfreeze whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Text encoder weights.
    Lm,
    /// DistMult relations used while pre-fine-tuning the text encoder.
    LmDecoder,
    /// Graph encoder weights, including featureless-type embedding tables.
    Gnn,
    /// Task heads on top of the graph encoder.
    Head,
}

impl ParamGroup {
    pub(crate) fn bit(self) -> u8 {
        match self {
            ParamGroup::Lm => 1,
            ParamGroup::LmDecoder => 2,
            ParamGroup::Gnn => 4,
            ParamGroup::Head => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    group: ParamGroup,
    value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        Param {
            name: name.into(),
            group,
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) {
            return Err(Error::contract("Adam learning rate must be positive"));
        }
        Ok(Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[(String, Tensor)]) -> Result<()> {
        let index: HashMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for p in params.iter() {
            if let Some(g) = index.get(p.name()) {
                if g.shape() != p.value().shape() {
                    return Err(Error::shape("adam_step", p.value().shape(), g.shape()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in params.iter_mut() {
            let Some(g) = index.get(p.name()) else {
                continue;
            };
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, w) in p.value_mut().data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
