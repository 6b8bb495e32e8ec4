//! Classification losses with per-sample values and analytic logit gradients.
//!
//! Every loss is evaluated on `softmax(z / tau)` in `f64`. Gradients are with
//! respect to the raw logits `z`, so they carry the `1/tau` factor.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::nnkit::{Mlp, Tensor2};
use crate::train;

/// Log of the clamped zero entries of the one-hot target inside reverse CE.
pub const RCE_LOG_ZERO: f64 = -4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Gce { q: f64 },
    Sce { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub kind: LossKind,
    #[serde(default = "unit_tau")]
    pub tau: f64,
}

fn unit_tau() -> f64 {
    1.0
}

impl LossSpec {
    pub const CE: LossSpec = LossSpec {
        kind: LossKind::Ce,
        tau: 1.0,
    };

    pub fn gce(q: f64) -> Self {
        Self {
            kind: LossKind::Gce { q },
            tau: 1.0,
        }
    }

    pub fn sce(alpha: f64, beta: f64) -> Self {
        Self {
            kind: LossKind::Sce { alpha, beta },
            tau: 1.0,
        }
    }

    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        match self.kind {
            LossKind::Ce => Ok(()),
            LossKind::Gce { q } => check_q(q),
            LossKind::Sce { alpha, beta } => check_sce(alpha, beta),
        }
    }

    /// Loss and logit gradient for one sample given `f64` logits.
    pub fn eval_f64(&self, logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        self.validate()?;
        check_label(label, logits.len())?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("logits", "non-finite", "logits must be finite"));
        }
        let mut grad = vec![0.0; logits.len()];
        let mut scratch = Vec::with_capacity(logits.len());
        let loss = eval_into(logits.iter().copied(), label, self, &mut scratch, &mut grad);
        Ok((loss, grad))
    }

    /// Loss and logit gradient for one sample.
    pub fn eval(&self, logits: &[f32], label: usize) -> Result<(f64, Vec<f64>)> {
        let wide: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        self.eval_f64(&wide, label)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", tau, "temperature must be positive"));
    }
    Ok(())
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::param("q", q, "must lie in (0, 1]"));
    }
    Ok(())
}

fn check_sce(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::param("sce.alpha", alpha, "must be non-negative"));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::param("sce.beta", beta, "must be non-negative"));
    }
    Ok(())
}

fn check_label(label: usize, class_count: usize) -> Result<()> {
    if label >= class_count {
        return Err(Error::LabelOutOfRange { label, class_count });
    }
    Ok(())
}

/// Core evaluation on validated input. Leaves `softmax(z/tau)` in `probs`
/// and writes the logit gradient into `grad`.
fn eval_into(
    logits: impl Iterator<Item = f64> + Clone,
    label: usize,
    spec: &LossSpec,
    probs: &mut Vec<f64>,
    grad: &mut [f64],
) -> f64 {
    let tau = spec.tau;
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    probs.clear();
    probs.extend(logits.clone().map(|z| ((z - max) / tau).exp()));
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let z_y = logits.clone().nth(label).expect("label checked");
    // -log p_y via log-sum-exp keeps precision when p_y underflows.
    let ce = sum.ln() - (z_y - max) / tau;
    let p_y = probs[label];

    // Every loss here has gradient of the form s·(p − e_y)/tau + extra.
    let (loss, scale) = match spec.kind {
        LossKind::Ce => (ce, 1.0),
        LossKind::Gce { q } => {
            let log_p = -ce;
            (-(q * log_p).exp_m1() / q, (q * log_p).exp())
        }
        LossKind::Sce { alpha, beta } => {
            // RCE = −A(1 − p_y) with A = RCE_LOG_ZERO; dRCE/dz = −A·p_y·(p − e_y)/tau.
            let a = -RCE_LOG_ZERO;
            (alpha * ce + beta * a * (1.0 - p_y), alpha + beta * a * p_y)
        }
    };
    for (c, (g, &p)) in grad.iter_mut().zip(probs.iter()).enumerate() {
        let onehot = if c == label { 1.0 } else { 0.0 };
        *g = scale * (p - onehot) / tau;
    }
    loss
}

/// `-log softmax(z/tau)[y]` and `(p - e_y)/tau`.
pub fn ce_loss(logits: &[f32], label: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    LossSpec::CE.with_tau(tau).eval(logits, label)
}

/// `(1 - p_y^q)/q` and `p_y^q (p - e_y)/tau`.
pub fn gce_loss(logits: &[f32], label: usize, q: f64, tau: f64) -> Result<(f64, Vec<f64>)> {
    LossSpec::gce(q).with_tau(tau).eval(logits, label)
}

/// `alpha·CE + beta·RCE`, where RCE swaps prediction and target in CE and
/// clamps `log 0` to [`RCE_LOG_ZERO`], giving `RCE = 4(1 - p_y)`.
pub fn sce_loss(logits: &[f32], label: usize, alpha: f64, beta: f64, tau: f64) -> Result<(f64, Vec<f64>)> {
    LossSpec::sce(alpha, beta).with_tau(tau).eval(logits, label)
}

/// Per-sample losses and the gradient of the weighted mean loss
/// `Σ w_i L_i / B` with respect to a batch of logits.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub losses: Vec<f64>,
    pub d_logits: Tensor2,
}

impl BatchLoss {
    pub fn mean(&self) -> f64 {
        if self.losses.is_empty() {
            return 0.0;
        }
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

pub fn batch_loss(logits: &Tensor2, labels: &[usize], weights: Option<&[f64]>, spec: &LossSpec) -> Result<BatchLoss> {
    spec.validate()?;
    let b = logits.rows();
    let c = logits.cols();
    if labels.len() != b {
        return Err(Error::LengthMismatch {
            what: "batch labels",
            expected: b,
            found: labels.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != b {
            return Err(Error::LengthMismatch {
                what: "batch weights",
                expected: b,
                found: w.len(),
            });
        }
    }
    let mut losses = Vec::with_capacity(b);
    let mut d = vec![0.0f32; b * c];
    let mut probs = Vec::with_capacity(c);
    let mut grad = vec![0.0f64; c];
    for (i, &y) in labels.iter().enumerate() {
        check_label(y, c)?;
        let row = logits.row(i);
        losses.push(eval_into(row.iter().map(|&v| v as f64), y, spec, &mut probs, &mut grad));
        let w = weights.map_or(1.0, |w| w[i]) / b as f64;
        for (out, g) in d[i * c..(i + 1) * c].iter_mut().zip(&grad) {
            *out = (g * w) as f32;
        }
    }
    Ok(BatchLoss {
        losses,
        d_logits: Tensor2::new(b, c, d)?,
    })
}

/// One loss per sample against `y_given`, in dataset order.
pub fn per_sample_losses(model: &Mlp, dataset: &LabeledDataset, spec: &LossSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(dataset.len());
    let mut probs = Vec::new();
    let mut grad = vec![0.0; model.class_count()];
    train::for_each_logits(model, dataset, |i, row| {
        let y = dataset.sample(i).y_given;
        out.push(eval_into(row.iter().map(|&v| v as f64), y, spec, &mut probs, &mut grad));
    })?;
    Ok(out)
}

/// Per-sample losses keyed by the epoch at which they were recorded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerSampleLossTable {
    entries: Vec<(usize, Vec<f64>)>,
}

impl PerSampleLossTable {
    pub fn record(&mut self, epoch: usize, losses: Vec<f64>) -> Result<()> {
        if let Some((_, first)) = self.entries.first() {
            if first.len() != losses.len() {
                return Err(Error::LengthMismatch {
                    what: "loss table entry",
                    expected: first.len(),
                    found: losses.len(),
                });
            }
        }
        self.entries.push((epoch, losses));
        Ok(())
    }

    pub fn get(&self, epoch: usize) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, v)| v.as_slice())
    }

    pub fn latest(&self) -> Option<(usize, &[f64])> {
        self.entries.last().map(|(e, v)| (*e, v.as_slice()))
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(e, _)| *e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
