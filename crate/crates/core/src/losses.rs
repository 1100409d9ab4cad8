//! The three training objectives (AT, TRADES, BAT) with exact parameter
//! gradients, plus linear path construction for the bridged loss.
//!
//! Gradients flow through every network evaluation the loss touches: for
//! TRADES both arguments of KL(p(x) || p(x*)) feed the network, and for
//! BAT every path point contributes. The adversarial example itself is a
//! fixed point once the inner attack has returned.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig, InnerLoss};
use crate::model::{DenseNet, ParamGradients};
use crate::numerics::{cross_entropy, kl_div, log_alpha, softmax, OneHotLabel, ProbVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "AT")]
    At,
    #[serde(rename = "TRADES")]
    Trades,
    #[serde(rename = "BAT")]
    Bat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    #[serde(rename = "LINEAR")]
    Linear,
}

/// Objective selector. `beta` is ignored for AT; `bridges_m` only matters for BAT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub method: Method,
    pub beta: f64,
    pub bridges_m: usize,
    pub path: PathKind,
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidInput(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.bridges_m == 0 {
            return Err(Error::InvalidInput("bridges_m must be >= 1".into()));
        }
        Ok(())
    }

    /// Inner maximization objective the training attack must use.
    pub fn required_inner_loss(&self) -> InnerLoss {
        match self.method {
            Method::At | Method::Bat => InnerLoss::CrossEntropy,
            Method::Trades => InnerLoss::KlFromClean,
        }
    }
}

/// Linear path gamma with gamma(0) = x and gamma(1) = x_star.
#[derive(Debug, Clone)]
pub struct BridgePath {
    pub x: Vec<f64>,
    pub x_star: Vec<f64>,
    pub m: usize,
}

impl BridgePath {
    pub fn new(x: Vec<f64>, x_star: Vec<f64>, m: usize) -> Result<Self> {
        if x.len() != x_star.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: x_star.len(),
            });
        }
        if m == 0 {
            return Err(Error::InvalidInput("bridge count m must be >= 1".into()));
        }
        Ok(Self { x, x_star, m })
    }

    /// gamma(t) = (1-t) x + t x_star, clamped into [0,1]^d as a safety net.
    pub fn path_point(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("path parameter t={t} outside [0,1]")));
        }
        if t == 0.0 {
            return Ok(self.x.clone());
        }
        if t == 1.0 {
            return Ok(self.x_star.clone());
        }
        Ok(self
            .x
            .iter()
            .zip(&self.x_star)
            .map(|(&a, &b)| ((1.0 - t) * a + t * b).clamp(0.0, 1.0))
            .collect())
    }

    /// The m+1 sample points gamma(k/m), k = 0..=m.
    pub fn sample_points(&self) -> Result<Vec<Vec<f64>>> {
        (0..=self.m)
            .map(|k| self.path_point(k as f64 / self.m as f64))
            .collect()
    }
}

/// Loss value and parameter gradients, plus the adversarial example used.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamGradients,
    pub x_star: Vec<f64>,
}

fn label_for(net: &DenseNet, y: usize) -> Result<OneHotLabel> {
    OneHotLabel::new(y, net.output_dim())
}

fn ce_logit_grad(p: &ProbVector, y: usize) -> Vec<f64> {
    p.values()
        .iter()
        .enumerate()
        .map(|(i, &pi)| pi - if i == y { 1.0 } else { 0.0 })
        .collect()
}

/// d KL(p || q) / d z_p where p = softmax(z_p): p_i (log a_i - sum_j p_j log a_j).
fn kl_p_side_grad(p: &ProbVector, la: &[f64]) -> Vec<f64> {
    let mean: f64 = p.values().iter().zip(la).map(|(&pi, &l)| pi * l).sum();
    p.values().iter().zip(la).map(|(&pi, &l)| pi * (l - mean)).collect()
}

/// d KL(p || q) / d z_q where q = softmax(z_q): q - p.
fn kl_q_side_grad(p: &ProbVector, q: &ProbVector) -> Vec<f64> {
    q.values().iter().zip(p.values()).map(|(&qi, &pi)| qi - pi).collect()
}

/// AT objective at a fixed adversarial example: CE(y, p(x*)).
pub fn at_terms(net: &DenseNet, y: usize, x_star: &[f64]) -> Result<(f64, ParamGradients)> {
    let label = label_for(net, y)?;
    let trace = net.forward(x_star)?;
    let p = softmax(trace.logits())?;
    let loss = cross_entropy(&label, &p)?;
    let grads = net.backward_params(&trace, &ce_logit_grad(&p, y))?;
    Ok((loss, grads))
}

/// TRADES objective at a fixed adversarial example:
/// CE(y, p(x)) + beta * KL(p(x) || p(x*)), gradients through both KL arguments.
pub fn trades_terms(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    beta: f64,
    x_star: &[f64],
) -> Result<(f64, ParamGradients)> {
    let label = label_for(net, y)?;
    let trace_x = net.forward(x)?;
    let p = softmax(trace_x.logits())?;
    let trace_star = net.forward(x_star)?;
    let p_star = softmax(trace_star.logits())?;

    let loss = cross_entropy(&label, &p)? + beta * kl_div(&p, &p_star)?;

    let la = log_alpha(&p, &p_star)?;
    let mut dl_x = ce_logit_grad(&p, y);
    for (d, k) in dl_x.iter_mut().zip(kl_p_side_grad(&p, &la)) {
        *d += beta * k;
    }
    let mut grads = net.backward_params(&trace_x, &dl_x)?;
    let dl_star: Vec<f64> = kl_q_side_grad(&p, &p_star).iter().map(|v| beta * v).collect();
    net.backward_params_into(&trace_star, &dl_star, &mut grads, 1.0)?;
    Ok((loss, grads))
}

/// BAT objective at a fixed adversarial example:
/// CE(y, p(x)) + beta * sum_k KL(p(gamma(k/m)) || p(gamma((k+1)/m))).
pub fn bat_terms(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    beta: f64,
    m: usize,
    x_star: &[f64],
) -> Result<(f64, ParamGradients)> {
    let label = label_for(net, y)?;
    let path = BridgePath::new(x.to_vec(), x_star.to_vec(), m)?;
    let points = path.sample_points()?;

    let traces: Vec<_> = points.iter().map(|p| net.forward(p)).collect::<Result<_>>()?;
    let probs: Vec<ProbVector> = traces
        .iter()
        .map(|t| softmax(t.logits()))
        .collect::<Result<_>>()?;

    let mut loss = cross_entropy(&label, &probs[0])?;
    let mut logit_grads: Vec<Vec<f64>> = vec![vec![0.0; net.output_dim()]; m + 1];
    logit_grads[0] = ce_logit_grad(&probs[0], y);

    for k in 0..m {
        let (p, q) = (&probs[k], &probs[k + 1]);
        loss += beta * kl_div(p, q)?;
        let la = log_alpha(p, q)?;
        for (d, g) in logit_grads[k].iter_mut().zip(kl_p_side_grad(p, &la)) {
            *d += beta * g;
        }
        for (d, g) in logit_grads[k + 1].iter_mut().zip(kl_q_side_grad(p, q)) {
            *d += beta * g;
        }
    }

    let mut grads = ParamGradients::zeros_like(net);
    for (trace, dl) in traces.iter().zip(&logit_grads) {
        net.backward_params_into(trace, dl, &mut grads, 1.0)?;
    }
    Ok((loss, grads))
}

fn run_attack(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    required: InnerLoss,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.inner_loss != required {
        return Err(Error::InvalidInput(format!(
            "attack inner loss {:?} does not match the objective's required {:?}",
            cfg.inner_loss, required
        )));
    }
    Ok(pgd(net, x, y, cfg, seed)?.x_star)
}

pub fn at_loss(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    attack_cfg: &AttackConfig,
    seed: u64,
) -> Result<LossOutput> {
    let x_star = run_attack(net, x, y, attack_cfg, InnerLoss::CrossEntropy, seed)?;
    let (loss, grads) = at_terms(net, y, &x_star)?;
    Ok(LossOutput { loss, grads, x_star })
}

pub fn trades_loss(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    beta: f64,
    attack_cfg: &AttackConfig,
    seed: u64,
) -> Result<LossOutput> {
    let x_star = run_attack(net, x, y, attack_cfg, InnerLoss::KlFromClean, seed)?;
    let (loss, grads) = trades_terms(net, x, y, beta, &x_star)?;
    Ok(LossOutput { loss, grads, x_star })
}

pub fn bat_loss(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    beta: f64,
    m: usize,
    attack_cfg: &AttackConfig,
    seed: u64,
) -> Result<LossOutput> {
    if m == 0 {
        return Err(Error::InvalidInput("bridge count m must be >= 1".into()));
    }
    let x_star = run_attack(net, x, y, attack_cfg, InnerLoss::CrossEntropy, seed)?;
    let (loss, grads) = bat_terms(net, x, y, beta, m, &x_star)?;
    Ok(LossOutput { loss, grads, x_star })
}

/// Evaluate the configured objective at a fixed x_star.
pub fn loss_terms(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    spec: &LossSpec,
    x_star: &[f64],
) -> Result<(f64, ParamGradients)> {
    spec.validate()?;
    match spec.method {
        Method::At => at_terms(net, y, x_star),
        Method::Trades => trades_terms(net, x, y, spec.beta, x_star),
        Method::Bat => bat_terms(net, x, y, spec.beta, spec.bridges_m, x_star),
    }
}
