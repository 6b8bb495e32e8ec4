//! Datasets with a planted bias attribute and symmetric label noise.
//!
//! Features live in one contiguous row-major buffer; per-sample label
//! metadata lives in [`Sample`]. Quadrant flags (aligned/conflicting ×
//! clean/noisy) are never stored separately: they are derived from the raw
//! label fields on demand, so they cannot drift out of sync.

mod colored;
mod idx;
mod store;
mod toy;

pub use colored::{flip_labels, inject_color_bias, make_unbiased_test, ColorTable};
pub use idx::{load_idx, load_mnist, parse_idx, MnistSplit};
pub use store::{
    decode_container, encode_container, load_container, load_container_with_side, save_container,
    save_container_with_side, SideChannels, DATASET_MAGIC,
};
pub use toy::{make_toy_biased, make_toy_biased_with, ToyParams};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::Tensor2;
use crate::rng::{self, stream};

/// Label metadata for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub y_true: usize,
    pub y_given: usize,
    /// Bias-attribute class (the color identity for Colored MNIST). `None`
    /// for data that carries no bias attribute; such samples count as aligned.
    pub bias_index: Option<usize>,
}

impl Sample {
    #[inline]
    pub fn aligned(&self) -> bool {
        self.bias_index.is_none_or(|b| b == self.y_true)
    }

    #[inline]
    pub fn clean(&self) -> bool {
        self.y_given == self.y_true
    }

    #[inline]
    pub fn quadrant(&self) -> Quadrant {
        match (self.aligned(), self.clean()) {
            (true, true) => Quadrant::AlignedClean,
            (true, false) => Quadrant::AlignedNoisy,
            (false, true) => Quadrant::ConflictingClean,
            (false, false) => Quadrant::ConflictingNoisy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    AlignedClean,
    AlignedNoisy,
    ConflictingClean,
    ConflictingNoisy,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::AlignedClean,
        Quadrant::AlignedNoisy,
        Quadrant::ConflictingClean,
        Quadrant::ConflictingNoisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::AlignedClean => "aligned_clean",
            Quadrant::AlignedNoisy => "aligned_noisy",
            Quadrant::ConflictingClean => "conflicting_clean",
            Quadrant::ConflictingNoisy => "conflicting_noisy",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    pub aligned_clean: usize,
    pub aligned_noisy: usize,
    pub conflicting_clean: usize,
    pub conflicting_noisy: usize,
}

impl QuadrantCounts {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut c = Self::default();
        for s in samples {
            *c.get_mut(s.quadrant()) += 1;
        }
        c
    }

    pub fn get(&self, q: Quadrant) -> usize {
        match q {
            Quadrant::AlignedClean => self.aligned_clean,
            Quadrant::AlignedNoisy => self.aligned_noisy,
            Quadrant::ConflictingClean => self.conflicting_clean,
            Quadrant::ConflictingNoisy => self.conflicting_noisy,
        }
    }

    pub fn get_mut(&mut self, q: Quadrant) -> &mut usize {
        match q {
            Quadrant::AlignedClean => &mut self.aligned_clean,
            Quadrant::AlignedNoisy => &mut self.aligned_noisy,
            Quadrant::ConflictingClean => &mut self.conflicting_clean,
            Quadrant::ConflictingNoisy => &mut self.conflicting_noisy,
        }
    }

    pub fn total(&self) -> usize {
        self.aligned_clean + self.aligned_noisy + self.conflicting_clean + self.conflicting_noisy
    }

    pub fn conflicting(&self) -> usize {
        self.conflicting_clean + self.conflicting_noisy
    }

    pub fn noisy(&self) -> usize {
        self.aligned_noisy + self.conflicting_noisy
    }
}

/// How a dataset was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub jitter_sigma: Option<f64>,
    /// Ordered list of transformations applied after loading.
    #[serde(default)]
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    class_count: usize,
    feature_dim: usize,
    features: Vec<f32>,
    samples: Vec<Sample>,
    eta: f64,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        class_count: usize,
        feature_dim: usize,
        features: Vec<f32>,
        samples: Vec<Sample>,
        eta: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::param("class_count", class_count, "need at least two classes"));
        }
        if features.len() != samples.len() * feature_dim {
            return Err(Error::LengthMismatch {
                what: "dataset features",
                expected: samples.len() * feature_dim,
                found: features.len(),
            });
        }
        for s in &samples {
            for label in [Some(s.y_true), Some(s.y_given), s.bias_index].into_iter().flatten() {
                if label >= class_count {
                    return Err(Error::LabelOutOfRange { label, class_count });
                }
            }
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::param("eta", eta, "must lie in [0, 1]"));
        }
        Ok(Self {
            class_count,
            feature_dim,
            features,
            samples,
            eta,
            provenance,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    #[inline]
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    #[inline]
    pub fn features(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn feature_matrix(&self) -> &[f32] {
        &self.features
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Requested symmetric flip rate.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn provenance_mut(&mut self) -> &mut Provenance {
        &mut self.provenance
    }

    /// Realized bias-conflict ratio `|conflicting| / N`.
    pub fn conflict_ratio(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| !s.aligned()).count() as f64 / self.len() as f64
    }

    pub fn noisy_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| !s.clean()).count() as f64 / self.len() as f64
    }

    pub fn quadrant_counts(&self) -> QuadrantCounts {
        QuadrantCounts::from_samples(&self.samples)
    }

    pub fn given_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y_given).collect()
    }

    /// Copies the listed rows (duplicates allowed) into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            data.extend_from_slice(self.features(i));
        }
        Tensor2::new(indices.len(), self.feature_dim, data).expect("features are finite")
    }

    /// New dataset holding the listed samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = self.gather(indices).into_data();
        let samples = indices.iter().map(|&i| self.samples[i]).collect();
        Self {
            class_count: self.class_count,
            feature_dim: self.feature_dim,
            features,
            samples,
            eta: self.eta,
            provenance: self.provenance.clone(),
        }
    }

    /// Drops the feature matrix, keeping labels and provenance.
    pub fn labels_only(&self) -> Self {
        Self {
            class_count: self.class_count,
            feature_dim: 0,
            features: Vec::new(),
            samples: self.samples.clone(),
            eta: self.eta,
            provenance: self.provenance.clone(),
        }
    }

    pub(crate) fn with_samples(mut self, samples: Vec<Sample>, eta: f64) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        self.samples = samples;
        self.eta = eta;
        self
    }

    /// Seeded random subset of `n` samples, kept in original order.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::param("subset size", n, "larger than the dataset"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::seeded(seed, stream::SUBSET));
        idx.truncate(n);
        idx.sort_unstable();
        let mut out = self.subset(&idx);
        out.provenance.steps.push(format!("random_subset(n={n}, seed={seed})"));
        Ok(out)
    }

    /// Seeded shuffle-and-split into `(train, validation)`.
    pub fn train_val_split(&self, val_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::param("val_fraction", val_fraction, "must lie in [0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::seeded(seed, stream::SPLIT));
        let n_val = (val_fraction * self.len() as f64).round() as usize;
        let (val_idx, train_idx) = idx.split_at(n_val);
        let mut train = self.subset(train_idx);
        let mut val = self.subset(val_idx);
        train.provenance.steps.push(format!("split(train, val_fraction={val_fraction}, seed={seed})"));
        val.provenance.steps.push(format!("split(val, val_fraction={val_fraction}, seed={seed})"));
        Ok((train, val))
    }
}

/// Validates a rate parameter in `[0, 1]`.
pub(crate) fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::param(name, v, "must lie in [0, 1]"));
    }
    Ok(())
}
