//! Dense feed-forward network with hand-derived backpropagation and SGD.
//!
//! Layout conventions:
//! - Batches are row-major `(rows, cols)` with one sample per row.
//! - Layer weights are row-major `(in_dim, out_dim)`, so a forward pass is
//!   `X · W + b` without transposes.
//! - Matrix products run through a single-threaded sgemm, which keeps every
//!   run bit-stable for a fixed seed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Row-major matrix of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "tensor data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("tensor data", "non-finite", "all values must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    what: "tensor row",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer `y = act(x · W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
    activation: Activation,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::param("layer dims", format!("{in_dim}x{out_dim}"), "must be positive"));
        }
        if weight.len() != in_dim * out_dim {
            return Err(Error::LengthMismatch {
                what: "layer weight",
                expected: in_dim * out_dim,
                found: weight.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::LengthMismatch {
                what: "layer bias",
                expected: out_dim,
                found: bias.len(),
            });
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::param("layer parameters", "non-finite", "must be finite"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Row-major `(in_dim, out_dim)`.
    #[inline]
    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    #[inline]
    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight_mut(&mut self) -> &mut [f32] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }
}

/// Multi-layer perceptron producing class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations retained by [`Mlp::forward_train`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor2,
    // Post-activation output of every layer; the last entry holds the logits.
    outputs: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor2 {
        self.outputs.last().expect("at least one layer")
    }
}

/// Gradients for one layer, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Mlp {
    /// Builds `input_dim → hidden… → class_count` with ReLU hidden layers and an
    /// identity output layer. Weights are Glorot-uniform, biases zero.
    pub fn new(input_dim: usize, hidden: &[usize], class_count: usize, seed: u64) -> Result<Self> {
        Self::with_stream(input_dim, hidden, class_count, seed, stream::MODEL_INIT)
    }

    pub fn with_stream(
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
        seed: u64,
        stream_id: u64,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::param("class_count", class_count, "need at least two classes"));
        }
        let mut rng = rng::seeded(seed, stream_id);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(class_count);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let weight = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let activation = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Dense::new(fan_in, fan_out, weight, vec![0.0; fan_out], activation)?);
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("mlp layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::DimensionMismatch {
                    layer: i + 1,
                    expected: pair[1].in_dim,
                    found: pair[0].out_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    #[inline]
    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Inference-mode forward pass returning logits.
    pub fn forward(&self, batch: &Tensor2) -> Result<Tensor2> {
        self.check_input(batch)?;
        let mut current: Option<Tensor2> = None;
        for layer in &self.layers {
            let input = current.as_ref().unwrap_or(batch);
            current = Some(layer_forward(layer, input));
        }
        Ok(current.expect("at least one layer"))
    }

    /// Forward pass that keeps intermediate activations for [`Mlp::backward`].
    pub fn forward_train(&self, batch: Tensor2) -> Result<ForwardCache> {
        self.check_input(&batch)?;
        let mut outputs: Vec<Tensor2> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer_forward(layer, outputs.last().unwrap_or(&batch));
            outputs.push(out);
        }
        Ok(ForwardCache {
            input: batch,
            outputs,
        })
    }

    /// Backpropagates `d_logits` (gradient of the batch objective with respect
    /// to the logits) into parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor2) -> Result<Gradients> {
        let logits = cache.logits();
        if d_logits.rows != logits.rows || d_logits.cols != logits.cols {
            return Err(Error::LengthMismatch {
                what: "logit gradient",
                expected: logits.rows * logits.cols,
                found: d_logits.rows * d_logits.cols,
            });
        }
        let batch = d_logits.rows;
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut d_out = d_logits.data.clone();

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.outputs[li];
            if layer.activation == Activation::Relu {
                for (d, &o) in d_out.iter_mut().zip(&out.data) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = if li == 0 {
                &cache.input
            } else {
                &cache.outputs[li - 1]
            };

            // dW = Xᵀ · dY
            let mut d_weight = vec![0.0f32; layer.in_dim * layer.out_dim];
            gemm(
                layer.in_dim,
                batch,
                layer.out_dim,
                (&input.data, 1, layer.in_dim as isize),
                (&d_out, layer.out_dim as isize, 1),
                &mut d_weight,
            );

            let mut d_bias = vec![0.0f64; layer.out_dim];
            for row in d_out.chunks_exact(layer.out_dim) {
                for (acc, &v) in d_bias.iter_mut().zip(row) {
                    *acc += v as f64;
                }
            }

            if li > 0 {
                // dX = dY · Wᵀ
                let mut d_in = vec![0.0f32; batch * layer.in_dim];
                gemm(
                    batch,
                    layer.out_dim,
                    layer.in_dim,
                    (&d_out, layer.out_dim as isize, 1),
                    (&layer.weight, 1, layer.out_dim as isize),
                    &mut d_in,
                );
                d_out = d_in;
            }

            grads.push(LayerGrad {
                weight: d_weight,
                bias: d_bias.into_iter().map(|v| v as f32).collect(),
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    fn check_input(&self, batch: &Tensor2) -> Result<()> {
        if batch.cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                expected: self.input_dim(),
                found: batch.cols,
            });
        }
        Ok(())
    }
}

fn layer_forward(layer: &Dense, input: &Tensor2) -> Tensor2 {
    let rows = input.rows;
    let mut out = vec![0.0f32; rows * layer.out_dim];
    gemm(
        rows,
        layer.in_dim,
        layer.out_dim,
        (&input.data, layer.in_dim as isize, 1),
        (&layer.weight, layer.out_dim as isize, 1),
        &mut out,
    );
    for row in out.chunks_exact_mut(layer.out_dim) {
        for (v, &b) in row.iter_mut().zip(&layer.bias) {
            *v += b;
            if layer.activation == Activation::Relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Tensor2 {
        rows,
        cols: layer.out_dim,
        data: out,
    }
}

/// `C (m×n, row-major) = A (m×k) · B (k×n)` with explicit (row, col) strides for A and B.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], isize, isize),
    b: (&[f32], isize, isize),
    c: &mut [f32],
) {
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the asserts above guarantee every strided access of the
    // (m×k), (k×n) and (m×n) operands stays inside its slice, because each
    // operand is a dense matrix whose strides are a permutation of (cols, 1).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax of `logits / tau`, evaluated in `f64`.
pub fn softmax_temp(logits: &[f32], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", tau, "temperature must be positive"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("logits", "non-finite", "logits must be finite"));
    }
    let mut out = Vec::with_capacity(logits.len());
    softmax_into(logits, tau, &mut out);
    Ok(out)
}

/// Unchecked variant used on hot paths; `tau` must already be validated.
pub(crate) fn softmax_into(logits: &[f32], tau: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut sum = 0.0f64;
    for &v in logits {
        let e = ((v as f64 - max) / tau).exp();
        sum += e;
        out.push(e);
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a frozen optimizer.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("sgd.learning_rate", self.learning_rate, "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("sgd.momentum", self.momentum, "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::param("sgd.weight_decay", self.weight_decay, "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("sgd.batch_size", self.batch_size, "must be positive"));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<LayerGrad>,
}

impl SgdState {
    pub fn new(model: &Mlp) -> Self {
        Self {
            velocity: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
///
/// Gradients are validated before anything is written, so a rejected step
/// leaves both the model and the momentum buffers untouched.
pub fn sgd_step(model: &mut Mlp, grads: &Gradients, state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    if grads.layers.len() != model.layers.len() || state.velocity.len() != model.layers.len() {
        return Err(Error::LengthMismatch {
            what: "gradient layers",
            expected: model.layers.len(),
            found: grads.layers.len(),
        });
    }
    for (i, (layer, g)) in model.layers.iter().zip(&grads.layers).enumerate() {
        if g.weight.len() != layer.weight.len() || g.bias.len() != layer.bias.len() {
            return Err(Error::LengthMismatch {
                what: "gradient block",
                expected: layer.weight.len() + layer.bias.len(),
                found: g.weight.len() + g.bias.len(),
            });
        }
        if g.weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: format!("layer{i}.weight"),
            });
        }
        if g.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: format!("layer{i}.bias"),
            });
        }
    }

    let lr = cfg.learning_rate as f32;
    let momentum = cfg.momentum as f32;
    let wd = cfg.weight_decay as f32;
    for ((layer, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity)
    {
        update_block(&mut layer.weight, &g.weight, &mut v.weight, lr, momentum, wd);
        update_block(&mut layer.bias, &g.bias, &mut v.bias, lr, momentum, wd);
    }
    Ok(())
}

fn update_block(theta: &mut [f32], grad: &[f32], vel: &mut [f32], lr: f32, momentum: f32, wd: f32) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = momentum * *v + (g + wd * *t);
        *t -= lr * *v;
    }
}
