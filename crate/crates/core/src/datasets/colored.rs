//! Colored-MNIST bias injection and symmetric label noise.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{check_unit, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};

/// One RGB color per class plus the per-channel jitter scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorTable {
    colors: Vec<[f64; 3]>,
    jitter_sigma: f64,
}

impl ColorTable {
    pub const DEFAULT_JITTER: f64 = 0.01;

    pub fn new(colors: Vec<[f64; 3]>, jitter_sigma: f64) -> Result<Self> {
        if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::param("colors", "channel", "every channel must lie in [0, 1]"));
        }
        if !(jitter_sigma >= 0.0) || !jitter_sigma.is_finite() {
            return Err(Error::param("jitter_sigma", jitter_sigma, "must be non-negative"));
        }
        Ok(Self { colors, jitter_sigma })
    }

    /// The ten Colored-MNIST class colors.
    pub fn cmnist() -> Self {
        Self::cmnist_with_jitter(Self::DEFAULT_JITTER).expect("valid table")
    }

    pub fn cmnist_with_jitter(jitter_sigma: f64) -> Result<Self> {
        Self::new(
            vec![
                [0.862_745_1, 0.078_431_37, 0.235_294_12],
                [0.0, 0.501_960_78, 0.501_960_78],
                [0.992_156_86, 0.913_725_49, 0.062_745_1],
                [0.0, 0.584_313_73, 0.713_725_49],
                [0.929_411_765, 0.568_627_451, 0.129_411_765],
                [0.568_627_451, 0.117_647_059, 0.737_254_902],
                [0.274_509_804, 0.941_176_471, 0.941_176_471],
                [0.980_392_157, 0.772_549_02, 0.733_333_333],
                [0.823_529_412, 0.960_784_314, 0.235_294_118],
                [0.501_960_784, 0.0, 0.0],
            ],
            jitter_sigma,
        )
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors[i]
    }

    pub fn jitter_sigma(&self) -> f64 {
        self.jitter_sigma
    }
}

/// Writes `intensity × clamp(color + v, 0, 1)` into three channel planes,
/// with one jitter draw `v ~ N(0, σ²)` per channel.
fn colorize(gray: &[f32], color: [f64; 3], jitter: &Normal<f64>, rng: &mut Rng, out: &mut Vec<f32>) {
    for c in color {
        let tint = (c + jitter.sample(rng)).clamp(0.0, 1.0) as f32;
        out.extend(gray.iter().map(|&g| g * tint));
    }
}

fn check_grayscale(dataset: &LabeledDataset, colors: &ColorTable) -> Result<()> {
    if dataset.samples().iter().any(|s| s.bias_index.is_some()) {
        return Err(Error::param("dataset", "colored", "bias injection expects a grayscale dataset"));
    }
    if colors.len() != dataset.class_count() {
        return Err(Error::LengthMismatch {
            what: "color table",
            expected: dataset.class_count(),
            found: colors.len(),
        });
    }
    Ok(())
}

fn colorize_all(
    dataset: &LabeledDataset,
    bias: &[usize],
    colors: &ColorTable,
    seed: u64,
) -> Vec<f32> {
    let jitter = Normal::new(0.0, colors.jitter_sigma()).expect("validated sigma");
    let mut rng = rng::seeded(seed, stream::JITTER);
    let mut features = Vec::with_capacity(dataset.len() * dataset.feature_dim() * 3);
    for (i, &b) in bias.iter().enumerate() {
        colorize(dataset.features(i), colors.color(b), &jitter, &mut rng, &mut features);
    }
    features
}

/// Colors a grayscale dataset so that, per class, exactly
/// `round(alpha · N_class)` samples get a uniformly chosen color other than
/// their own class color (bias-conflicting); the rest get their class color.
pub fn inject_color_bias(
    dataset: &LabeledDataset,
    alpha: f64,
    colors: &ColorTable,
    seed: u64,
) -> Result<LabeledDataset> {
    check_unit("alpha", alpha)?;
    check_grayscale(dataset, colors)?;
    let c = dataset.class_count();

    let mut rng = rng::seeded(seed, stream::COLOR);
    let mut bias: Vec<usize> = dataset.samples().iter().map(|s| s.y_true).collect();
    for class in 0..c {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.sample(i).y_true == class)
            .collect();
        let n_conflict = (alpha * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &i in &members[..n_conflict] {
            let k = rng.random_range(0..c - 1);
            bias[i] = if k >= class { k + 1 } else { k };
        }
    }

    let features = colorize_all(dataset, &bias, colors, seed);
    let samples = dataset
        .samples()
        .iter()
        .zip(&bias)
        .map(|(s, &b)| Sample {
            bias_index: Some(b),
            ..*s
        })
        .collect();
    let mut prov = dataset.provenance().clone();
    prov.alpha = Some(alpha);
    prov.seed = Some(seed);
    prov.jitter_sigma = Some(colors.jitter_sigma());
    prov.steps.push(format!("inject_color_bias(alpha={alpha}, seed={seed})"));
    LabeledDataset::new(c, dataset.feature_dim() * 3, features, samples, dataset.eta(), prov)
}

/// Symmetric label noise: each sample is selected with probability `eta` and
/// receives a label drawn uniformly from all classes (possibly its own).
pub fn flip_labels(dataset: LabeledDataset, eta: f64, seed: u64) -> Result<LabeledDataset> {
    check_unit("eta", eta)?;
    let c = dataset.class_count();
    let mut rng = rng::seeded(seed, stream::FLIP);
    let samples = dataset
        .samples()
        .iter()
        .map(|s| {
            let selected = rng.random::<f64>() < eta;
            let y_given = if selected { rng.random_range(0..c) } else { s.y_true };
            Sample { y_given, ..*s }
        })
        .collect();
    let mut out = dataset.with_samples(samples, eta);
    let prov = out.provenance_mut();
    prov.eta = Some(eta);
    prov.seed.get_or_insert(seed);
    prov.steps.push(format!("flip_labels(eta={eta}, seed={seed})"));
    Ok(out)
}

/// Colors a grayscale set with colors drawn uniformly over all classes,
/// independent of the digit; labels stay clean.
pub fn make_unbiased_test(dataset: &LabeledDataset, colors: &ColorTable, seed: u64) -> Result<LabeledDataset> {
    check_grayscale(dataset, colors)?;
    let c = dataset.class_count();
    let mut rng = rng::seeded(seed, stream::COLOR);
    let bias: Vec<usize> = (0..dataset.len()).map(|_| rng.random_range(0..c)).collect();
    let features = colorize_all(dataset, &bias, colors, seed);
    let samples = dataset
        .samples()
        .iter()
        .zip(&bias)
        .map(|(s, &b)| Sample {
            y_true: s.y_true,
            y_given: s.y_true,
            bias_index: Some(b),
        })
        .collect();
    let mut prov = dataset.provenance().clone();
    prov.seed = Some(seed);
    prov.jitter_sigma = Some(colors.jitter_sigma());
    prov.steps.push(format!("make_unbiased_test(seed={seed})"));
    LabeledDataset::new(c, dataset.feature_dim() * 3, features, samples, 0.0, prov)
}
