//! Training loop, evaluation, and CSV export.
//!
//! Determinism contract: (config, seed) fixes every emitted byte. All
//! randomness flows through ChaCha8 streams keyed by mixing the run seed
//! with epoch and example indices, so batch order or diagnostics cadence
//! cannot perturb the attack seeds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::config::{DatasetSelector, TrainConfig};
use crate::data::{gen_synthetic, load_mnist_idx, Checkpoint, Dataset};
use crate::diagnostics::{
    expected_margin_increase, margin, normalized_grad_norm, quadrant_decomposition,
    smoothness_kl, DiagnosticsRecord,
};
use crate::losses::{LossSpec, Method};
use crate::model::{DenseNet, ParamGradients};
use crate::numerics::softmax;
use crate::optim::Optimizer;
use crate::{Error, Result};

/// SplitMix64 finalizer; decorrelates structured (seed, epoch, index) keys.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One epoch of aggregated training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub mean_margin_clean: f64,
    pub mean_margin_adv: f64,
    pub mean_smoothness_kl: f64,
    pub expected_margin_increase: f64,
    pub normalized_grad_norm: f64,
    pub r_nat: f64,
    pub r_bdy: f64,
    pub r_rob: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,clean_acc,robust_acc,mean_margin_clean,mean_margin_adv,mean_smoothness_kl,expected_margin_increase,normalized_grad_norm,r_nat,r_bdy,r_rob";

pub const DIAGNOSTICS_HEADER: &str =
    "index,margin_clean,margin_adv,smoothness_kl,log_alpha_y,log_alpha_t,quadrant";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.clean_acc,
            r.robust_acc,
            r.mean_margin_clean,
            r.mean_margin_adv,
            r.mean_smoothness_kl,
            r.expected_margin_increase,
            r.normalized_grad_norm,
            r.r_nat,
            r.r_bdy,
            r.r_rob
        ));
    }
    out
}

pub fn diagnostics_csv(records: &[DiagnosticsRecord]) -> String {
    let mut out = String::from(DIAGNOSTICS_HEADER);
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:?}\n",
            i, r.margin_clean, r.margin_adv, r.smoothness_kl, r.log_alpha_y, r.log_alpha_t, r.quadrant
        ));
    }
    out
}

/// Result of a full evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub records: Vec<DiagnosticsRecord>,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the final epoch.
    pub final_checkpoint: Checkpoint,
    /// Parameters at the epoch with the best robust accuracy on a fixed
    /// held-out batch (ties keep the earlier epoch).
    pub best_checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

pub fn load_dataset(selector: &DatasetSelector) -> Result<Dataset> {
    match selector {
        DatasetSelector::Synthetic { shape, n, data_seed } => gen_synthetic(*shape, *n, *data_seed),
        DatasetSelector::MnistIdx { images, labels, limit } => {
            load_mnist_idx(images, labels, *limit)
        }
    }
}

pub fn build_net(cfg: &TrainConfig, data: &Dataset) -> Result<DenseNet> {
    let mut dims = Vec::with_capacity(cfg.hidden_dims.len() + 2);
    dims.push(data.feature_dim());
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(data.num_classes());
    DenseNet::init(&dims, cfg.seed)
}

fn per_example_loss(
    net: &DenseNet,
    x: &[f64],
    y: usize,
    spec: &LossSpec,
    attack: &AttackConfig,
    seed: u64,
) -> Result<(f64, ParamGradients, Vec<f64>)> {
    let out = match spec.method {
        Method::At => crate::losses::at_loss(net, x, y, attack, seed)?,
        Method::Trades => crate::losses::trades_loss(net, x, y, spec.beta, attack, seed)?,
        Method::Bat => {
            crate::losses::bat_loss(net, x, y, spec.beta, spec.bridges_m, attack, seed)?
        }
    };
    Ok((out.loss, out.grads, out.x_star))
}

/// Per-batch training statistics, exposed so callers can probe the loss
/// landscape (normalized gradient norms over the first batches of a run)
/// without a full training loop.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub normalized_grad_norm: Option<f64>,
    pub expected_margin_increase: f64,
}

/// Mean loss/gradient over one batch plus its diagnostics, without
/// touching the parameters.
pub fn batch_terms(
    net: &DenseNet,
    batch: &[(Vec<f64>, usize)],
    spec: &LossSpec,
    attack: &AttackConfig,
    seeds: &[u64],
) -> Result<(f64, ParamGradients, BatchStats)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = ParamGradients::zeros_like(net);
    let mut loss = 0.0;
    for ((x, y), &seed) in batch.iter().zip(seeds) {
        let (l, g, _) = per_example_loss(net, x, *y, spec, attack, seed)?;
        loss += w * l;
        grads.add_scaled(&g, w)?;
    }
    let stats = BatchStats {
        loss,
        grad_norm: grads.l2_norm(),
        normalized_grad_norm: normalized_grad_norm(loss, &grads),
        expected_margin_increase: expected_margin_increase(net, batch, &grads)?,
    };
    Ok((loss, grads, stats))
}

/// Full training loop. Deterministic given (cfg, data).
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = build_net(cfg, data)?;
    if data.feature_dim() != net.layer_dims()[0] {
        return Err(Error::DimensionMismatch {
            expected: net.layer_dims()[0],
            got: data.feature_dim(),
        });
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let base_lr = cfg.optimizer.base_lr();

    // fixed diagnostics subset and held-out selection batch, chosen once
    let mut picker = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD1A6, 0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut picker);
    let diag_idx: Vec<usize> = order.iter().copied().take(cfg.diag_subset.min(data.len())).collect();
    order.shuffle(&mut picker);
    let holdout_idx: Vec<usize> =
        order.iter().copied().take(cfg.batch_size.min(data.len())).collect();
    let diag_set = data.subset(&diag_idx)?;
    let holdout_set = data.subset(&holdout_idx)?;

    let mut metrics = Vec::new();
    let mut best: Option<(f64, DenseNet, usize)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(base_lr, epoch);
        let mut train_attack = cfg.attack.clone();
        if epoch < cfg.attack_ramp_epochs {
            let scale = (epoch + 1) as f64 / (cfg.attack_ramp_epochs + 1) as f64;
            train_attack.epsilon *= scale;
            train_attack.step_size *= scale;
        }
        let mut indices: Vec<usize> = (0..data.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, epoch as u64)));

        let mut epoch_loss = 0.0;
        let mut epoch_emi = 0.0;
        let mut epoch_ngn = 0.0;
        let mut ngn_count = 0usize;
        let mut batches = 0usize;

        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<(Vec<f64>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let (x, y) = data.example(i);
                    (x.to_vec(), y)
                })
                .collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| mix_seed(cfg.seed, 2 + epoch as u64, i as u64))
                .collect();
            let (loss, grads, stats) = batch_terms(&net, &batch, &cfg.loss, &train_attack, &seeds)?;
            epoch_loss += loss;
            epoch_emi += stats.expected_margin_increase;
            if let Some(n) = stats.normalized_grad_norm {
                epoch_ngn += n;
                ngn_count += 1;
            }
            batches += 1;
            opt.step(&mut net, &grads, lr)?;
        }

        let emit_row = (epoch + 1) % cfg.diag_every == 0 || epoch + 1 == cfg.epochs;
        if emit_row {
            let eval = evaluate(&net, &diag_set, &cfg.eval_attack, mix_seed(cfg.seed, 3, epoch as u64))?;
            let decomp = quadrant_decomposition(&eval.records)?;
            let n = eval.records.len() as f64;
            metrics.push(MetricsRow {
                epoch,
                train_loss: epoch_loss / batches as f64,
                clean_acc: eval.clean_acc,
                robust_acc: eval.robust_acc,
                mean_margin_clean: eval.records.iter().map(|r| r.margin_clean).sum::<f64>() / n,
                mean_margin_adv: eval.records.iter().map(|r| r.margin_adv).sum::<f64>() / n,
                mean_smoothness_kl: eval.records.iter().map(|r| r.smoothness_kl).sum::<f64>() / n,
                expected_margin_increase: epoch_emi / batches as f64,
                normalized_grad_norm: if ngn_count > 0 {
                    epoch_ngn / ngn_count as f64
                } else {
                    0.0
                },
                r_nat: decomp.r_nat,
                r_bdy: decomp.r_bdy,
                r_rob: decomp.r_rob,
            });

            let sel = evaluate(&net, &holdout_set, &cfg.eval_attack, mix_seed(cfg.seed, 4, epoch as u64))?;
            if best.as_ref().map_or(true, |(acc, _, _)| sel.robust_acc > *acc) {
                best = Some((sel.robust_acc, net.clone(), epoch));
            }
        }
    }

    let cfg_echo = cfg.to_json_value();
    let last_row = metrics
        .last()
        .map(|r| serde_json::to_value(r).expect("metrics row serializes"));
    let final_checkpoint = Checkpoint::from_net(
        &net,
        cfg_echo.clone(),
        cfg.epochs - 1,
        cfg.seed,
        last_row.clone(),
    );
    let (_, best_net, best_epoch) = best.expect("at least one diagnostics epoch runs");
    let best_checkpoint = Checkpoint::from_net(&best_net, cfg_echo, best_epoch, cfg.seed, last_row);

    Ok(TrainOutcome { final_checkpoint, best_checkpoint, metrics })
}

/// Evaluate clean and robust accuracy with per-example diagnostics.
///
/// The clean input is always a feasible point of its own perturbation
/// ball, so the effective adversarial example is whichever of
/// {attack output, x} has the lower margin. This makes robust accuracy
/// <= clean accuracy and rules out second-quadrant records.
pub fn evaluate(
    net: &DenseNet,
    data: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<EvalResult> {
    attack.validate()?;
    if data.feature_dim() != net.layer_dims()[0] {
        return Err(Error::DimensionMismatch {
            expected: net.layer_dims()[0],
            got: data.feature_dim(),
        });
    }
    let mut records = Vec::with_capacity(data.len());
    let mut clean_correct = 0usize;
    let mut robust_correct = 0usize;
    for (i, (x, y)) in data.iter().enumerate() {
        let p_clean = softmax(net.forward(x)?.logits())?;
        let m_clean = margin(&p_clean, y)?;

        let adv = pgd(net, x, y, attack, mix_seed(seed, 5, i as u64))?;
        let p_adv = softmax(net.forward(&adv.x_star)?.logits())?;
        let m_attack = margin(&p_adv, y)?;
        let (m_adv, x_star) = if m_attack <= m_clean {
            (m_attack, adv.x_star)
        } else {
            (m_clean, x.to_vec())
        };

        let kl = smoothness_kl(net, x, &x_star)?;
        let p_star = softmax(net.forward(&x_star)?.logits())?;
        let t = p_star
            .values()
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != y)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .unwrap();
        let floor = crate::numerics::PROB_FLOOR;
        let log_alpha_y = (p_clean.values()[y].max(floor) / p_star.values()[y].max(floor)).ln();
        let log_alpha_t = -(p_clean.values()[t].max(floor) / p_star.values()[t].max(floor)).ln();
        records.push(DiagnosticsRecord::new(m_clean, m_adv, kl, log_alpha_y, log_alpha_t)?);

        if m_clean > 0.0 {
            clean_correct += 1;
        }
        if m_adv > 0.0 {
            robust_correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        clean_acc: clean_correct as f64 / n,
        robust_acc: robust_correct as f64 / n,
        records,
    })
}

/// Robust-accuracy sweep over evaluation radii on a fixed model.
/// The attack step size scales as 2.5 * epsilon / steps.
pub fn sweep_epsilon(
    net: &DenseNet,
    data: &Dataset,
    base_attack: &AttackConfig,
    epsilons: &[f64],
    seed: u64,
) -> Result<String> {
    if epsilons.is_empty() {
        return Err(Error::InvalidInput("no epsilons to sweep".into()));
    }
    let mut out = String::from("epsilon,clean_acc,robust_acc,r_nat,r_bdy,r_rob\n");
    for &eps in epsilons {
        let attack = AttackConfig {
            epsilon: eps,
            step_size: if base_attack.steps > 0 {
                2.5 * eps / base_attack.steps as f64
            } else {
                eps
            }
            .max(f64::MIN_POSITIVE),
            ..base_attack.clone()
        };
        attack.validate()?;
        let eval = evaluate(net, data, &attack, seed)?;
        let decomp = quadrant_decomposition(&eval.records)?;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            eps, eval.clean_acc, eval.robust_acc, decomp.r_nat, decomp.r_bdy, decomp.r_rob
        ));
    }
    Ok(out)
}
