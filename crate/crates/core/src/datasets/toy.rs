//! Two-feature, two-class synthetic fixture with a planted shortcut.
//!
//! Feature 0 carries the target: `±target_shift + N(0, target_sd²)` with the
//! sign given by `y_true`. Feature 1 carries the bias attribute:
//! `±bias_shift + N(0, bias_sd²)` with the sign given by the bias class,
//! which equals `y_true` for aligned samples and differs for conflicting ones.
//! The bias feature has the larger scale, so gradient descent picks it up first.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_unit, flip_labels, LabeledDataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub target_shift: f64,
    pub target_sd: f64,
    pub bias_shift: f64,
    pub bias_sd: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            target_shift: 0.25,
            target_sd: 0.06,
            bias_shift: 1.0,
            bias_sd: 0.1,
        }
    }
}

/// Balanced two-class toy set: `y_true = i mod 2`, exactly
/// `round(alpha · N_class)` conflicting samples per class, then symmetric
/// label noise at rate `eta`.
pub fn make_toy_biased(n: usize, alpha: f64, eta: f64, seed: u64) -> Result<LabeledDataset> {
    make_toy_biased_with(n, alpha, eta, seed, ToyParams::default())
}

pub fn make_toy_biased_with(n: usize, alpha: f64, eta: f64, seed: u64, p: ToyParams) -> Result<LabeledDataset> {
    if n < 4 {
        return Err(Error::param("n", n, "need at least 4 samples to populate all quadrants"));
    }
    check_unit("alpha", alpha)?;
    check_unit("eta", eta)?;

    let mut rng = rng::seeded(seed, stream::TOY);
    let mut bias: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for class in 0..2 {
        let mut members: Vec<usize> = (class..n).step_by(2).collect();
        let k = (alpha * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &i in &members[..k] {
            bias[i] = 1 - class;
        }
    }

    let target = Normal::new(0.0, p.target_sd).map_err(|_| Error::param("target_sd", p.target_sd, "invalid"))?;
    let shortcut = Normal::new(0.0, p.bias_sd).map_err(|_| Error::param("bias_sd", p.bias_sd, "invalid"))?;
    let sign = |c: usize| if c == 1 { 1.0 } else { -1.0 };
    let mut features = Vec::with_capacity(2 * n);
    let mut samples = Vec::with_capacity(n);
    for (i, &b) in bias.iter().enumerate() {
        let y = i % 2;
        features.push((sign(y) * p.target_shift + target.sample(&mut rng)) as f32);
        features.push((sign(b) * p.bias_shift + shortcut.sample(&mut rng)) as f32);
        samples.push(Sample {
            y_true: y,
            y_given: y,
            bias_index: Some(b),
        });
    }
    let prov = Provenance {
        source: "toy".into(),
        alpha: Some(alpha),
        seed: Some(seed),
        steps: vec![format!("make_toy_biased(n={n}, alpha={alpha}, seed={seed})")],
        ..Provenance::default()
    };
    let ds = LabeledDataset::new(2, 2, features, samples, 0.0, prov)?;
    flip_labels(ds, eta, seed)
}
