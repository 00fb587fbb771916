use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;

fn adam_decay() -> f32 {
    0.98
}
fn momentum() -> f32 {
    0.9
}
fn sgd_weight_decay() -> f32 {
    5e-4
}
fn yes() -> bool {
    true
}
fn step_gamma() -> f32 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Adam with per-epoch exponential learning-rate decay.
    Adam {
        lr: f32,
        #[serde(default = "adam_decay")]
        decay: f32,
        #[serde(default)]
        weight_decay: f32,
    },
    /// SGD with (Nesterov) momentum and step decay at `milestones`.
    Sgd {
        lr: f32,
        #[serde(default = "momentum")]
        momentum: f32,
        #[serde(default = "sgd_weight_decay")]
        weight_decay: f32,
        #[serde(default = "yes")]
        nesterov: bool,
        #[serde(default)]
        milestones: Vec<usize>,
        #[serde(default = "step_gamma")]
        gamma: f32,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 0.01,
            decay: adam_decay(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lr, ok) = match self {
            OptimizerConfig::Adam { lr, decay, weight_decay } => (*lr, *decay > 0.0 && *weight_decay >= 0.0),
            OptimizerConfig::Sgd { lr, momentum, weight_decay, gamma, .. } => {
                (*lr, (0.0..1.0).contains(momentum) && *weight_decay >= 0.0 && *gamma > 0.0)
            }
        };
        if !(lr >= 0.0 && lr.is_finite()) || !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f32 {
        match self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => *lr,
        }
    }

    pub fn with_lr(&self, new: f32) -> Self {
        let mut c = self.clone();
        match &mut c {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => *lr = new,
        }
        c
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self {
            OptimizerConfig::Adam { lr, decay, .. } => (*lr as f64 * (*decay as f64).powi(epoch as i32)) as f32,
            OptimizerConfig::Sgd { lr, milestones, gamma, .. } => {
                let k = milestones.iter().filter(|&&m| m <= epoch).count();
                (*lr as f64 * (*gamma as f64).powi(k as i32)) as f32
            }
        }
    }
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Optimizer state over every parameter of a network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Optimizer {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update; `grads[i]` is `None` for parameters that got no gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f32>>], lr: f32) {
        self.t += 1;
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = p.decay;
            let w = p.tensor.data_mut();
            match &self.cfg {
                OptimizerConfig::Adam { weight_decay, .. } => {
                    let wd = if decay { *weight_decay } else { 0.0 };
                    let bc1 = 1.0 - BETA1.powi(self.t);
                    let bc2 = 1.0 - BETA2.powi(self.t);
                    let (m, v) = (&mut self.m[id], &mut self.v[id]);
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        w[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerConfig::Sgd { momentum, weight_decay, nesterov, .. } => {
                    let wd = if decay { *weight_decay } else { 0.0 };
                    let buf = &mut self.m[id];
                    for i in 0..w.len() {
                        let gi = g[i] + wd * w[i];
                        buf[i] = momentum * buf[i] + gi;
                        let d = if *nesterov { gi + momentum * buf[i] } else { buf[i] };
                        w[i] -= lr * d;
                    }
                }
            }
        }
    }
}
