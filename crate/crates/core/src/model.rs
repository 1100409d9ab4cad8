//! Fully-connected ReLU classifier with analytic forward and backward
//! passes. Both parameter gradients and input gradients are exact; the
//! latter drive the PGD attacks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Dot product with four accumulators so the reduction pipelines on CPUs
/// that will not reassociate float adds on their own.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// One dense layer: row-major weight matrix (rows = output units) plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// A fully-connected ReLU network. Hidden layers apply ReLU; the last
/// layer is linear and produces logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Per-layer pre-activations and activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activations per layer, including the final logits.
    pub pre_activations: Vec<Vec<f64>>,
    /// Post-ReLU activations per hidden layer.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().expect("trace has layers")
    }
}

/// Gradients with the same shape as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<DenseLayer>,
}

impl ParamGradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: l.weights.iter().map(|r| vec![0.0; r.len()]).collect(),
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    /// self += scale * other. Errors if the shapes disagree.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.biases.len() != b.biases.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.biases.len(),
                    got: b.biases.len(),
                });
            }
            for (ra, rb) in a.weights.iter_mut().zip(&b.weights) {
                axpy(ra, scale, rb);
            }
            axpy(&mut a.biases, scale, &b.biases);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for r in &mut l.weights {
                for v in r.iter_mut() {
                    *v *= s;
                }
            }
            for v in &mut l.biases {
                *v *= s;
            }
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (ra, rb) in a.weights.iter().zip(&b.weights) {
                acc += dot(ra, rb);
            }
            acc += dot(&a.biases, &b.biases);
        }
        Ok(acc)
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).expect("same shape").sqrt()
    }
}

impl DenseNet {
    /// Seeded initialization: weights uniform in +-sqrt(6/fan_in), biases zero.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least input and output dims, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("layer dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = (0..fan_out)
                .map(|_| (0..fan_in).map(|_| rng.random_range(-bound..bound)).collect())
                .collect();
            layers.push(DenseLayer {
                weights,
                biases: vec![0.0; fan_out],
            });
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn from_parts(layer_dims: Vec<usize>, layers: Vec<DenseLayer>) -> Result<Self> {
        if layer_dims.len() < 2 || layers.len() != layer_dims.len() - 1 {
            return Err(Error::InvalidInput("inconsistent layer structure".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != layer_dims[i + 1]
                || l.biases.len() != layer_dims[i + 1]
                || l.weights.iter().any(|r| r.len() != layer_dims[i])
            {
                return Err(Error::InvalidInput(format!(
                    "layer {i} shape inconsistent with dims"
                )));
            }
            let finite = l.weights.iter().flatten().all(|v| v.is_finite())
                && l.biases.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidInput(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layer_dims, layers })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let depth = self.layers.len();
        let mut pre_activations = Vec::with_capacity(depth);
        let mut activations = Vec::with_capacity(depth.saturating_sub(1));
        let mut cur: &[f64] = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut pre: Vec<f64> = layer
                .weights
                .iter()
                .zip(&layer.biases)
                .map(|(row, &b)| dot(row, cur) + b)
                .collect();
            if li + 1 < depth {
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                pre_activations.push(std::mem::take(&mut pre));
                activations.push(act);
                cur = activations.last().unwrap();
            } else {
                pre_activations.push(pre);
            }
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre_activations,
            activations,
        })
    }

    /// Backpropagate `dl_dlogits` through the trace and return gradients of
    /// the same scalar loss with respect to every parameter.
    pub fn backward_params(&self, trace: &ForwardTrace, dl_dlogits: &[f64]) -> Result<ParamGradients> {
        let mut grads = ParamGradients::zeros_like(self);
        self.backward_params_into(trace, dl_dlogits, &mut grads, 1.0)?;
        Ok(grads)
    }

    /// As [`backward_params`](Self::backward_params) but accumulating
    /// `scale * grad` into an existing buffer, avoiding reallocation in
    /// batch loops.
    pub fn backward_params_into(
        &self,
        trace: &ForwardTrace,
        dl_dlogits: &[f64],
        grads: &mut ParamGradients,
        scale: f64,
    ) -> Result<()> {
        self.check_trace(trace, dl_dlogits)?;
        let mut delta = dl_dlogits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer_input: &[f64] = if li == 0 {
                &trace.input
            } else {
                &trace.activations[li - 1]
            };
            let g = &mut grads.layers[li];
            for ((row, &d), gb) in g.weights.iter_mut().zip(&delta).zip(&mut g.biases) {
                axpy(row, scale * d, layer_input);
                *gb += scale * d;
            }
            if li > 0 {
                delta = self.backprop_through_layer(li, &delta, &trace.pre_activations[li - 1]);
            }
        }
        Ok(())
    }

    /// Gradient of the scalar loss with respect to the input x.
    pub fn input_gradient(&self, x: &[f64], dl_dlogits: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(x)?;
        self.input_gradient_from_trace(&trace, dl_dlogits)
    }

    pub fn input_gradient_from_trace(
        &self,
        trace: &ForwardTrace,
        dl_dlogits: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_trace(trace, dl_dlogits)?;
        let mut delta = dl_dlogits.to_vec();
        for li in (1..self.layers.len()).rev() {
            delta = self.backprop_through_layer(li, &delta, &trace.pre_activations[li - 1]);
        }
        // First layer: d/dx = W0^T delta, no ReLU mask on the input.
        let layer = &self.layers[0];
        let mut grad = vec![0.0; self.input_dim()];
        for (row, &d) in layer.weights.iter().zip(&delta) {
            axpy(&mut grad, d, row);
        }
        Ok(grad)
    }

    /// One in-place parameter update: params += scale * grads.
    pub fn apply_update(&mut self, grads: &ParamGradients, scale: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: grads.layers.len(),
            });
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (row, grow) in l.weights.iter_mut().zip(&g.weights) {
                axpy(row, scale, grow);
            }
            axpy(&mut l.biases, scale, &g.biases);
        }
        Ok(())
    }

    /// Pull delta back through layer `li`'s weights and the ReLU that fed it.
    fn backprop_through_layer(&self, li: usize, delta: &[f64], pre: &[f64]) -> Vec<f64> {
        let layer = &self.layers[li];
        let mut out = vec![0.0; layer.weights[0].len()];
        for (row, &d) in layer.weights.iter().zip(delta) {
            axpy(&mut out, d, row);
        }
        // ReLU subgradient at 0 is taken as 0.
        for (o, &z) in out.iter_mut().zip(pre) {
            if z <= 0.0 {
                *o = 0.0;
            }
        }
        out
    }

    fn check_trace(&self, trace: &ForwardTrace, dl_dlogits: &[f64]) -> Result<()> {
        if trace.pre_activations.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: trace.pre_activations.len(),
            });
        }
        if dl_dlogits.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: dl_dlogits.len(),
            });
        }
        Ok(())
    }
}
