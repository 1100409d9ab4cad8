//! Optimizers (SGD with momentum, Adam) and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::model::{DenseNet, ParamGradients};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum OptimizerConfig {
    #[serde(rename = "SGD")]
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    #[serde(rename = "ADAM")]
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum, weight_decay } => {
                lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps, weight_decay } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Learning-rate schedule. `lr_at` maps a zero-based epoch index to the
/// multiplier-adjusted rate for that epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Schedule {
    #[serde(rename = "CONSTANT")]
    Constant,
    /// Multiply the rate by `factor` at each epoch listed in `at_epochs`.
    #[serde(rename = "STEP_DECAY")]
    StepDecay { at_epochs: Vec<usize>, factor: f64 },
    /// Single triangular cycle: 0 at epoch 0, peak multiplier 1 at the
    /// midpoint of training, back toward 0 at the end.
    #[serde(rename = "CYCLIC")]
    Cyclic { total_epochs: usize },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::StepDecay { at_epochs, factor } => {
                if *factor <= 0.0 || at_epochs.windows(2).any(|w| w[0] >= w[1]) {
                    Err(Error::Config("step decay needs factor > 0 and strictly increasing epochs".into()))
                } else {
                    Ok(())
                }
            }
            Schedule::Cyclic { total_epochs } => {
                if *total_epochs == 0 {
                    Err(Error::Config("cyclic schedule needs total_epochs > 0".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base_lr,
            Schedule::StepDecay { at_epochs, factor } => {
                let hits = at_epochs.iter().filter(|&&e| epoch >= e).count();
                base_lr * factor.powi(hits as i32)
            }
            Schedule::Cyclic { total_epochs } => {
                let t = *total_epochs as f64;
                let half = t / 2.0;
                // evaluate at the epoch midpoint so epoch 0 gets a nonzero rate
                let pos = epoch as f64 + 0.5;
                let frac = if pos <= half { pos / half } else { (t - pos).max(0.0) / half };
                base_lr * frac
            }
        }
    }
}

/// Stateful optimizer mirroring the parameter shapes of one network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    momentum_buf: Option<ParamGradients>,
    adam_m: Option<ParamGradients>,
    adam_v: Option<ParamGradients>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, momentum_buf: None, adam_m: None, adam_v: None })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Apply one update to `net` in place using gradients `grads` and the
    /// effective learning rate `lr` for this step.
    pub fn step(&mut self, net: &mut DenseNet, grads: &ParamGradients, lr: f64) -> Result<()> {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { momentum, weight_decay, .. } => {
                let mut g = grads.clone();
                if weight_decay > 0.0 {
                    add_decay(&mut g, net, weight_decay);
                }
                if momentum > 0.0 {
                    let buf = self
                        .momentum_buf
                        .get_or_insert_with(|| ParamGradients::zeros_like(net));
                    buf.scale(momentum);
                    buf.add_scaled(&g, 1.0)?;
                    net.apply_update(buf, -lr)?;
                } else {
                    net.apply_update(&g, -lr)?;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, weight_decay, .. } => {
                let mut g = grads.clone();
                if weight_decay > 0.0 {
                    add_decay(&mut g, net, weight_decay);
                }
                let m = self.adam_m.get_or_insert_with(|| ParamGradients::zeros_like(net));
                m.scale(beta1);
                m.add_scaled(&g, 1.0 - beta1)?;
                let v = self.adam_v.get_or_insert_with(|| ParamGradients::zeros_like(net));
                v.scale(beta2);
                square_add_scaled(v, &g, 1.0 - beta2)?;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let mut update = m.clone();
                adam_combine(&mut update, v, bc1, bc2, eps);
                net.apply_update(&update, -lr)?;
            }
        }
        Ok(())
    }
}

fn add_decay(g: &mut ParamGradients, net: &DenseNet, wd: f64) {
    for (gl, nl) in g.layers.iter_mut().zip(net.layers()) {
        for (gr, nr) in gl.weights.iter_mut().zip(&nl.weights) {
            for (gv, nv) in gr.iter_mut().zip(nr) {
                *gv += wd * nv;
            }
        }
        for (gb, nb) in gl.biases.iter_mut().zip(&nl.biases) {
            *gb += wd * nb;
        }
    }
}

fn square_add_scaled(v: &mut ParamGradients, g: &ParamGradients, scale: f64) -> crate::Result<()> {
    if v.layers.len() != g.layers.len() {
        return Err(Error::DimensionMismatch { expected: v.layers.len(), got: g.layers.len() });
    }
    for (vl, gl) in v.layers.iter_mut().zip(&g.layers) {
        for (vr, gr) in vl.weights.iter_mut().zip(&gl.weights) {
            for (vv, gv) in vr.iter_mut().zip(gr) {
                *vv += scale * gv * gv;
            }
        }
        for (vb, gb) in vl.biases.iter_mut().zip(&gl.biases) {
            *vb += scale * gb * gb;
        }
    }
    Ok(())
}

fn adam_combine(m: &mut ParamGradients, v: &ParamGradients, bc1: f64, bc2: f64, eps: f64) {
    for (ml, vl) in m.layers.iter_mut().zip(&v.layers) {
        for (mr, vr) in ml.weights.iter_mut().zip(&vl.weights) {
            for (mv, vv) in mr.iter_mut().zip(vr) {
                *mv = (*mv / bc1) / ((vv / bc2).sqrt() + eps);
            }
        }
        for (mb, vb) in ml.biases.iter_mut().zip(&vl.biases) {
            *mb = (*mb / bc1) / ((vb / bc2).sqrt() + eps);
        }
    }
}
