//! L-infinity adversarial example generation: FGSM and multi-step PGD
//! with ball projection, [0,1] clamping, random starts, and restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::DenseNet;
use crate::numerics::{cross_entropy, kl_div, softmax, OneHotLabel, ProbVector};
use crate::{Error, Result};

/// Objective maximized by the attack inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerLoss {
    /// KL(y || p(x^t)), i.e. cross-entropy to the label.
    #[serde(rename = "CE")]
    CrossEntropy,
    /// KL(p(x) || p(x^t)) with the clean distribution held fixed.
    #[serde(rename = "KL_FROM_CLEAN")]
    KlFromClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity radius in normalized pixel units.
    pub epsilon: f64,
    /// Number of PGD steps.
    pub steps: usize,
    /// Step size per PGD step.
    pub step_size: f64,
    /// Independent restarts; the one with the highest final inner loss wins.
    pub restarts: usize,
    /// Start each restart uniformly inside the epsilon ball.
    pub random_start: bool,
    pub inner_loss: InnerLoss,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::InvalidInput(format!(
                "step_size must be > 0 when steps > 0, got {}",
                self.step_size
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// The feasible set {x' : ||x'-x||_inf <= eps} intersected with [0,1]^d.
#[derive(Debug, Clone)]
pub struct PerturbationBall {
    pub center: Vec<f64>,
    pub epsilon: f64,
}

impl PerturbationBall {
    pub fn new(center: Vec<f64>, epsilon: f64) -> Self {
        Self { center, epsilon }
    }

    /// Coordinatewise clip into the ball, then into [0,1]. Total and idempotent.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.center
            .iter()
            .zip(x)
            .map(|(&c, &v)| {
                v.clamp(c - self.epsilon, c + self.epsilon).clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.center
            .iter()
            .zip(x)
            .all(|(&c, &v)| (v - c).abs() <= self.epsilon + tol && (-tol..=1.0 + tol).contains(&v))
    }
}

/// Outcome of one attack: the adversarial example and its inner-loss value.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_star: Vec<f64>,
    pub inner_loss: f64,
}

struct InnerObjective<'a> {
    net: &'a DenseNet,
    label: OneHotLabel,
    clean_prob: Option<ProbVector>,
}

impl<'a> InnerObjective<'a> {
    fn new(net: &'a DenseNet, x: &[f64], y: usize, kind: InnerLoss) -> Result<Self> {
        let label = OneHotLabel::new(y, net.output_dim())?;
        let clean_prob = match kind {
            InnerLoss::CrossEntropy => None,
            InnerLoss::KlFromClean => Some(softmax(net.forward(x)?.logits())?),
        };
        Ok(Self { net, label, clean_prob })
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let p = softmax(self.net.forward(x)?.logits())?;
        match &self.clean_prob {
            None => cross_entropy(&self.label, &p),
            Some(clean) => kl_div(clean, &p),
        }
    }

    /// Gradient of the inner loss with respect to x.
    fn input_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = self.net.forward(x)?;
        let p = softmax(trace.logits())?;
        let dl: Vec<f64> = match &self.clean_prob {
            // d CE / d logits = p - y
            None => p
                .values()
                .iter()
                .enumerate()
                .map(|(i, &pi)| pi - if i == self.label.class_index() { 1.0 } else { 0.0 })
                .collect(),
            // d KL(clean || p) / d logits = p - clean
            Some(clean) => p
                .values()
                .iter()
                .zip(clean.values())
                .map(|(&pi, &ci)| pi - ci)
                .collect(),
        };
        self.net.input_gradient_from_trace(&trace, &dl)
    }
}

/// PGD sign ascent inside the epsilon ball, seeded for determinism.
pub fn pgd(net: &DenseNet, x: &[f64], y: usize, cfg: &AttackConfig, seed: u64) -> Result<AttackResult> {
    cfg.validate()?;
    if x.len() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            got: x.len(),
        });
    }
    let objective = InnerObjective::new(net, x, y, cfg.inner_loss)?;
    let ball = PerturbationBall::new(x.to_vec(), cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best: Option<AttackResult> = None;
    for _restart in 0..cfg.restarts {
        let mut cur: Vec<f64> = if cfg.random_start && cfg.epsilon > 0.0 {
            let noisy: Vec<f64> = x
                .iter()
                .map(|&v| v + rng.random_range(-cfg.epsilon..=cfg.epsilon))
                .collect();
            ball.project(&noisy)
        } else {
            x.to_vec()
        };
        for _step in 0..cfg.steps {
            let grad = objective.input_grad(&cur)?;
            for (c, g) in cur.iter_mut().zip(&grad) {
                *c += cfg.step_size * g.signum() * if *g == 0.0 { 0.0 } else { 1.0 };
            }
            cur = ball.project(&cur);
        }
        let loss = objective.loss(&cur)?;
        // strict > keeps the lowest restart index on ties
        if best.as_ref().map_or(true, |b| loss > b.inner_loss) {
            best = Some(AttackResult { x_star: cur, inner_loss: loss });
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Single-step sign attack: PGD with one step of size epsilon, no random start.
pub fn fgsm(net: &DenseNet, x: &[f64], y: usize, epsilon: f64) -> Result<Vec<f64>> {
    let cfg = AttackConfig {
        epsilon,
        steps: 1,
        step_size: epsilon,
        restarts: 1,
        random_start: false,
        inner_loss: InnerLoss::CrossEntropy,
    };
    if epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(pgd(net, x, y, &cfg, 0)?.x_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenseLayer;
    use rand::Rng;

    fn cfg(epsilon: f64, steps: usize, step_size: f64) -> AttackConfig {
        AttackConfig {
            epsilon,
            steps,
            step_size,
            restarts: 1,
            random_start: false,
            inner_loss: InnerLoss::CrossEntropy,
        }
    }

    #[test]
    fn project_examples() {
        let ball = PerturbationBall::new(vec![0.5], 0.1);
        assert!((ball.project(&[0.75])[0] - 0.6).abs() < 1e-15);
        let ball = PerturbationBall::new(vec![0.05], 0.1);
        assert_eq!(ball.project(&[-0.02])[0], 0.0);
        let ball = PerturbationBall::new(vec![0.5, 0.2], 0.1);
        let feasible = vec![0.45, 0.25];
        assert_eq!(ball.project(&feasible), feasible);
        // idempotence
        let p = ball.project(&[0.9, -0.3]);
        assert_eq!(ball.project(&p), p);
    }

    #[test]
    fn zero_steps_no_random_start_is_identity() {
        let net = DenseNet::init(&[2, 3, 2], 0).unwrap();
        let x = [0.3, 0.7];
        let r = pgd(&net, &x, 0, &cfg(0.1, 0, 1.0), 1).unwrap();
        assert_eq!(r.x_star, x.to_vec());
    }

    #[test]
    fn sign_ascent_saturates_linear_model() {
        // single logit pair with constant positive CE input-gradient on coord 0
        let net = DenseNet::from_parts(
            vec![1, 2],
            vec![DenseLayer {
                weights: vec![vec![-2.0], vec![2.0]],
                biases: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        // label 0: pushing x up raises logit 1, raising CE; grad sign is +
        let x = [0.5];
        let r = pgd(&net, &x, 0, &cfg(0.2, 5, 0.06), 3).unwrap();
        assert!((r.x_star[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn fgsm_equals_single_step_pgd() {
        let net = DenseNet::init(&[3, 5, 3], 9).unwrap();
        let x = [0.2, 0.8, 0.5];
        let a = fgsm(&net, &x, 1, 0.07).unwrap();
        let b = pgd(&net, &x, 1, &cfg(0.07, 1, 0.07), 0).unwrap().x_star;
        assert_eq!(a, b);
    }

    #[test]
    fn fgsm_zero_gradient_is_identity() {
        let net = DenseNet::from_parts(
            vec![2, 2],
            vec![DenseLayer {
                weights: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
                biases: vec![0.0, 0.0],
            }],
        )
        .unwrap();
        let x = [0.4, 0.6];
        assert_eq!(fgsm(&net, &x, 0, 0.1).unwrap(), x.to_vec());
    }

    #[test]
    fn feasibility_and_determinism() {
        let net = DenseNet::init(&[4, 6, 3], 11).unwrap();
        let x = [0.1, 0.9, 0.5, 0.02];
        let cfg = AttackConfig {
            epsilon: 0.15,
            steps: 7,
            step_size: 0.04,
            restarts: 4,
            random_start: true,
            inner_loss: InnerLoss::KlFromClean,
        };
        let ball = PerturbationBall::new(x.to_vec(), cfg.epsilon);
        let a = pgd(&net, &x, 2, &cfg, 42).unwrap();
        let b = pgd(&net, &x, 2, &cfg, 42).unwrap();
        assert_eq!(a.x_star, b.x_star);
        assert!(ball.contains(&a.x_star, 1e-9));
    }

    #[test]
    fn restarts_return_max_inner_loss() {
        let net = DenseNet::init(&[3, 8, 3], 17).unwrap();
        let x = [0.5, 0.5, 0.5];
        let base = AttackConfig {
            epsilon: 0.1,
            steps: 3,
            step_size: 0.04,
            restarts: 1,
            random_start: true,
            inner_loss: InnerLoss::CrossEntropy,
        };
        let multi = AttackConfig { restarts: 6, ..base };
        let best = pgd(&net, &x, 0, &multi, 7).unwrap();
        // replay the same rng stream one restart at a time
        let obj = InnerObjective::new(&net, &x, 0, InnerLoss::CrossEntropy).unwrap();
        let ball = PerturbationBall::new(x.to_vec(), base.epsilon);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut max_loss = f64::NEG_INFINITY;
        for _ in 0..6 {
            let noisy: Vec<f64> = x
                .iter()
                .map(|&v| v + rng.random_range(-base.epsilon..=base.epsilon))
                .collect();
            let mut cur = ball.project(&noisy);
            for _ in 0..base.steps {
                let g = obj.input_grad(&cur).unwrap();
                for (c, gi) in cur.iter_mut().zip(&g) {
                    *c += base.step_size * if *gi == 0.0 { 0.0 } else { gi.signum() };
                }
                cur = ball.project(&cur);
            }
            max_loss = max_loss.max(obj.loss(&cur).unwrap());
        }
        assert!((best.inner_loss - max_loss).abs() < 1e-12);
    }

    #[test]
    fn pgd_beats_random_feasible_sampling() {
        // brute-force oracle: PGD's final loss should top 1e4 uniform feasible
        // points in at least 95% of 50 random trials
        let mut wins = 0;
        for trial in 0..50u64 {
            let net = DenseNet::init(&[2, 6, 2], 1000 + trial).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
            let x = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            let cfg = AttackConfig {
                epsilon: 0.1,
                steps: 30,
                step_size: 0.01,
                restarts: 10,
                random_start: true,
                inner_loss: InnerLoss::CrossEntropy,
            };
            let r = pgd(&net, &x, 0, &cfg, 3000 + trial).unwrap();
            let obj = InnerObjective::new(&net, &x, 0, InnerLoss::CrossEntropy).unwrap();
            let ball = PerturbationBall::new(x.to_vec(), cfg.epsilon);
            let mut sampled_max = f64::NEG_INFINITY;
            for _ in 0..10_000 {
                let cand: Vec<f64> = x
                    .iter()
                    .map(|&v| v + rng.random_range(-cfg.epsilon..=cfg.epsilon))
                    .collect();
                let cand = ball.project(&cand);
                sampled_max = sampled_max.max(obj.loss(&cand).unwrap());
            }
            if r.inner_loss >= sampled_max {
                wins += 1;
            }
        }
        assert!(wins >= 48, "PGD beat sampling in only {wins}/50 trials");
    }

    #[test]
    fn config_validation() {
        assert!(cfg(-0.1, 0, 1.0).validate().is_err());
        assert!(cfg(0.1, 3, 0.0).validate().is_err());
        let mut c = cfg(0.1, 3, 0.1);
        c.restarts = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn random_fuzz_feasibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..30u64 {
            let d = rng.random_range(1..5);
            let net = DenseNet::init(&[d, 4, 2], trial).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let cfg = AttackConfig {
                epsilon: rng.random_range(0.0..0.3),
                steps: rng.random_range(0..6),
                step_size: 0.05,
                restarts: rng.random_range(1..4),
                random_start: rng.random_bool(0.5),
                inner_loss: if rng.random_bool(0.5) {
                    InnerLoss::CrossEntropy
                } else {
                    InnerLoss::KlFromClean
                },
            };
            let r = pgd(&net, &x, 0, &cfg, trial).unwrap();
            let ball = PerturbationBall::new(x.clone(), cfg.epsilon);
            assert!(ball.contains(&r.x_star, 1e-9));
        }
    }
}
