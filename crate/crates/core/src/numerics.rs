//! Numerically stable probability and divergence primitives.
//!
//! Everything here is a pure function; all logarithms are natural.
//! Probabilities are floored at [`PROB_FLOOR`] before they appear in a
//! denominator or a log argument, which keeps KL divergences finite on
//! near-one-hot softmax outputs.

use crate::{Error, Result};

/// Floor applied to probabilities inside logs and denominators.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the sum-to-one invariant of [`ProbVector`].
const SUM_TOL: f64 = 1e-6;

/// A c-dimensional probability distribution (c >= 2, entries >= 0, sums to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "probability vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "probability entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate().skip(1) {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// A one-hot label: class `class_index` out of `dimension` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotLabel {
    class_index: usize,
    dimension: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, dimension: usize) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::InvalidInput(format!(
                "label dimension must be >= 2, got {dimension}"
            )));
        }
        if class_index >= dimension {
            return Err(Error::InvalidInput(format!(
                "class index {class_index} out of range for {dimension} classes"
            )));
        }
        Ok(Self {
            class_index,
            dimension,
        })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    Ok(())
}

fn check_same_dim(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    let log_p = log_softmax(z)?;
    ProbVector::new(log_p.iter().map(|l| l.exp()).collect())
}

/// Log-softmax via the shifted log-sum-exp, avoiding exp-then-log round trips.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    if z.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "logit vector needs at least 2 entries, got {}",
            z.len()
        )));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - lse).collect())
}

/// KL(p || q) = sum_i p_i ln(p_i / q_i), with q floored at [`PROB_FLOOR`].
pub fn kl_div(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_dim(p, q)?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.values().iter().zip(q.values()) {
        if pi > 0.0 {
            acc += pi * (pi / qi.max(PROB_FLOOR)).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// KL between the softmax distributions of two logit vectors, computed from
/// log-softmax outputs directly.
pub fn kl_div_logits(zp: &[f64], zq: &[f64]) -> Result<f64> {
    if zp.len() != zq.len() {
        return Err(Error::DimensionMismatch {
            expected: zp.len(),
            got: zq.len(),
        });
    }
    let lp = log_softmax(zp)?;
    let lq = log_softmax(zq)?;
    let mut acc = 0.0;
    for ((&lpi, &lqi), _) in lp.iter().zip(&lq).zip(zp) {
        let pi = lpi.exp();
        acc += pi * (lpi - lqi);
    }
    Ok(acc.max(0.0))
}

/// Cross-entropy H_y(p) = -log p_y; equals KL(onehot(y) || p).
pub fn cross_entropy(y: &OneHotLabel, p: &ProbVector) -> Result<f64> {
    if y.dimension() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: y.dimension(),
            got: p.len(),
        });
    }
    Ok(-p.values()[y.class_index()].max(PROB_FLOOR).ln())
}

/// Elementwise log(p_i / q_i), both sides floored at [`PROB_FLOOR`].
pub fn log_alpha(p: &ProbVector, q: &ProbVector) -> Result<Vec<f64>> {
    check_same_dim(p, q)?;
    Ok(p.values()
        .iter()
        .zip(q.values())
        .map(|(&pi, &qi)| (pi.max(PROB_FLOOR) / qi.max(PROB_FLOOR)).ln())
        .collect())
}
