//! Evaluation and diagnostics: accuracy, quadrant-resolved score
//! histograms, rank AUC, and denoiser retention.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, Quadrant, QuadrantCounts, Sample};
use crate::error::{Error, Result};
use crate::losses::{per_sample_losses, LossSpec};
use crate::nnkit::{softmax_into, Mlp};
use crate::pipeline::{self, coteaching_retention, DenoiserSpec, RobustConfig, SamplingDistribution};
use crate::report::RunReport;
use crate::train::{for_each_logits, predict};

/// Fraction of argmax predictions equal to `y_true`.
pub fn unbiased_accuracy(model: &Mlp, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let pred = predict(model, test)?;
    let hits = pred.iter().zip(test.samples()).filter(|(p, s)| **p == s.y_true).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Accuracy against `y_true` within each populated quadrant.
pub fn accuracy_by_quadrant(model: &Mlp, dataset: &LabeledDataset) -> Result<BTreeMap<Quadrant, f64>> {
    let pred = predict(model, dataset)?;
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    for (p, s) in pred.iter().zip(dataset.samples()) {
        let q = s.quadrant().index();
        totals[q] += 1;
        hits[q] += usize::from(*p == s.y_true);
    }
    Ok(Quadrant::ALL
        .into_iter()
        .filter(|q| totals[q.index()] > 0)
        .map(|q| (q, hits[q.index()] as f64 / totals[q.index()] as f64))
        .collect())
}

/// Records accuracy against the given labels and, per quadrant, against the
/// true labels.
pub fn training_accuracy(report: &mut RunReport, model: &Mlp, dataset: &LabeledDataset) -> Result<()> {
    let pred = predict(model, dataset)?;
    let given = pred.iter().zip(dataset.samples()).filter(|(p, s)| **p == s.y_given).count();
    report.push("train", "accuracy_given", None, given as f64 / dataset.len().max(1) as f64);
    for (q, acc) in accuracy_by_quadrant(model, dataset)? {
        report.push("train", "accuracy_true", Some(q), acc);
    }
    Ok(())
}

/// Records unbiased accuracy plus the aligned/conflicting split of a test set.
pub fn evaluate_test(report: &mut RunReport, model: &Mlp, test: &LabeledDataset) -> Result<f64> {
    let acc = unbiased_accuracy(model, test)?;
    report.push("eval", "unbiased_accuracy", None, acc);
    let pred = predict(model, test)?;
    for (name, want_aligned) in [("aligned_accuracy", true), ("conflicting_accuracy", false)] {
        let (hit, n) = pred
            .iter()
            .zip(test.samples())
            .filter(|(_, s)| s.aligned() == want_aligned)
            .fold((0usize, 0usize), |(h, n), (p, s)| (h + usize::from(*p == s.y_true), n + 1));
        if n > 0 {
            report.push("eval", name, None, hit as f64 / n as f64);
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positive {
    Conflicting,
    Noisy,
}

impl Positive {
    fn of(self, s: &Sample) -> bool {
        match self {
            Positive::Conflicting => !s.aligned(),
            Positive::Noisy => !s.clean(),
        }
    }
}

/// Mann-Whitney AUC: probability that a random positive outscores a random
/// negative, ties counting one half.
pub fn rank_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::EmptyInput("AUC needs both classes"));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::param("scores", "NaN", "AUC scores must not be NaN"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of positives, with tied blocks sharing their mean rank.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let pos = all[i..j].iter().filter(|(_, p)| *p).count() as u128;
        // Ranks i+1..=j average to (i+1+j)/2.
        rank2_sum += pos * (i + 1 + j) as u128;
        i = j;
    }
    let np = positive.len() as u128;
    let nn = negative.len() as u128;
    let u2 = rank2_sum - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

pub fn separation_auc(scores: &[f64], dataset: &LabeledDataset, positive: Positive) -> Result<f64> {
    auc_where(scores, dataset, positive, |_| true)
}

/// AUC restricted to bias-aligned samples.
pub fn separation_auc_aligned(scores: &[f64], dataset: &LabeledDataset, positive: Positive) -> Result<f64> {
    auc_where(scores, dataset, positive, Sample::aligned)
}

fn auc_where(
    scores: &[f64],
    dataset: &LabeledDataset,
    positive: Positive,
    keep: impl Fn(&Sample) -> bool,
) -> Result<f64> {
    if scores.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            what: "scores",
            expected: dataset.len(),
            found: scores.len(),
        });
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, &v) in dataset.samples().iter().zip(scores) {
        if keep(s) {
            if positive.of(s) {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
    }
    rank_auc(&pos, &neg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantHistogram {
    pub score_kind: String,
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: BTreeMap<Quadrant, Vec<usize>>,
}

/// Shared bins spanning `[min, max]`; the last bin is closed. Constant scores
/// get a unit-width span around the value.
pub fn score_histogram_by_quadrant(
    scores: &[f64],
    dataset: &LabeledDataset,
    bins: usize,
    score_kind: &str,
) -> Result<QuadrantHistogram> {
    if bins < 1 {
        return Err(Error::param("bins", bins, "need at least one bin"));
    }
    if scores.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            what: "scores",
            expected: dataset.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::param("scores", "non-finite", "histogram scores must be finite"));
    }
    let (mut lo, mut hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    if scores.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|k| if k == bins { hi } else { lo + width * k as f64 })
        .collect();
    let mut counts: BTreeMap<Quadrant, Vec<usize>> = Quadrant::ALL.iter().map(|&q| (q, vec![0; bins])).collect();
    for (s, &v) in dataset.samples().iter().zip(scores) {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts.get_mut(&s.quadrant()).expect("all quadrants present")[b] += 1;
    }
    Ok(QuadrantHistogram {
        score_kind: score_kind.into(),
        edges,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub denoiser: DenoiserSpec,
    pub weight_multiplier: f64,
    pub initial: QuadrantCounts,
    pub remaining: QuadrantCounts,
    /// Quartiles of the per-sample GCE weight `p_y^q`, per quadrant. Only for
    /// the GCE denoiser, which removes nothing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_weight_quartiles: Option<BTreeMap<Quadrant, [f64; 3]>>,
}

impl RetentionReport {
    pub fn retained_fraction(&self, q: Quadrant) -> Option<f64> {
        let n = self.initial.get(q);
        (n > 0).then(|| self.remaining.get(q) as f64 / n as f64)
    }

    /// Retained fraction over both conflicting quadrants.
    pub fn retained_conflicting(&self) -> Option<f64> {
        let n = self.initial.conflicting();
        let r = self.remaining.conflicting_clean + self.remaining.conflicting_noisy;
        (n > 0).then(|| r as f64 / n as f64)
    }

    pub fn push_into(&self, report: &mut RunReport) {
        for q in Quadrant::ALL {
            report.push("retention", "initial", Some(q), self.initial.get(q) as f64);
            report.push("retention", "remaining", Some(q), self.remaining.get(q) as f64);
        }
        if let Some(quartiles) = &self.effective_weight_quartiles {
            for (q, v) in quartiles {
                for (name, x) in ["weight_q25", "weight_q50", "weight_q75"].into_iter().zip(v) {
                    report.push("retention", name, Some(*q), *x);
                }
            }
        }
    }
}

/// Trains with CE scaled by `weight_multiplier` on conflicting samples under
/// uniform sampling, then runs the denoiser's identification step and counts
/// what survives per quadrant.
pub fn denoiser_retention(
    dataset: &LabeledDataset,
    denoiser: &DenoiserSpec,
    weight_multiplier: f64,
    cfg: &RobustConfig,
) -> Result<RetentionReport> {
    if !(weight_multiplier >= 1.0) || !weight_multiplier.is_finite() {
        return Err(Error::param("weight_multiplier", weight_multiplier, "must be at least 1"));
    }
    denoiser.validate()?;
    let weights: Vec<f64> = dataset
        .samples()
        .iter()
        .map(|s| if s.aligned() { 1.0 } else { weight_multiplier })
        .collect();
    let dist = SamplingDistribution::uniform(dataset.len())?;
    let initial = dataset.quadrant_counts();
    let count = |kept: &[usize]| QuadrantCounts::from_samples(kept.iter().map(|&i| dataset.sample(i)));

    let (remaining, quartiles) = match *denoiser {
        DenoiserSpec::Aum { percentile, epochs } => {
            let margins = pipeline::aum_margins(dataset, &dist, epochs.unwrap_or(cfg.epochs), cfg, Some(&weights))?;
            (count(&pipeline::aum_retained(&margins, percentile)), None)
        }
        DenoiserSpec::Coteaching {
            forget_rate,
            num_gradual,
        } => {
            let out = pipeline::train_robust_weighted(dataset, &dist, denoiser, cfg, Some(&weights))?;
            let rate = coteaching_retention(forget_rate, num_gradual, cfg.epochs.saturating_sub(1));
            let keep = (rate * dataset.len() as f64).floor() as usize;
            let losses = per_sample_losses(&out.model, dataset, &LossSpec::CE)?;
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
            (count(&order[..keep]), None)
        }
        DenoiserSpec::Gce { q } => {
            let out = pipeline::train_robust_weighted(dataset, &dist, denoiser, cfg, Some(&weights))?;
            let mut per_q: BTreeMap<Quadrant, Vec<f64>> = BTreeMap::new();
            let mut probs = Vec::new();
            for_each_logits(&out.model, dataset, |i, row| {
                softmax_into(row, 1.0, &mut probs);
                let s = dataset.sample(i);
                per_q.entry(s.quadrant()).or_default().push(probs[s.y_given].powf(q));
            })?;
            let quartiles = per_q
                .into_iter()
                .map(|(k, v)| {
                    let qs = [25.0, 50.0, 75.0].map(|p| pipeline::percentile(&v, p));
                    (k, qs)
                })
                .collect();
            (initial, Some(quartiles))
        }
        DenoiserSpec::Ce => {
            return Err(Error::Unsupported(
                "the ce denoiser removes nothing; retention needs aum, coteaching or gce".into(),
            ))
        }
    };
    Ok(RetentionReport {
        denoiser: *denoiser,
        weight_multiplier,
        initial,
        remaining,
        effective_weight_quartiles: quartiles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn export_report(report: &RunReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    match format {
        ReportFormat::Json => serde_json::to_writer_pretty(&mut w, report)?,
        ReportFormat::Csv => report.write_csv(&mut w)?,
    }
    std::io::Write::flush(&mut w).map_err(|e| Error::file(path, e))
}
