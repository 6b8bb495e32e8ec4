//! The three-stage debiasing pipeline.
//!
//! 1. A prejudice model is trained to absorb the bias, either on the
//!    low-loss GMM component of each epoch or with GCE on everything.
//! 2. Its temperature-scaled prediction entropy becomes a per-sample score,
//!    normalized into a sampling distribution.
//! 3. A robust learner trains on mini-batches drawn from that distribution,
//!    with a pluggable noisy-label denoiser.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, Positive};
use crate::datasets::{LabeledDataset, Quadrant, QuadrantCounts};
use crate::error::{Error, Result, StageContext};
use crate::gmm::{self, EmOptions};
use crate::losses::{per_sample_losses, LossSpec};
use crate::nnkit::{softmax_into, Mlp, SgdConfig};
use crate::report::RunReport;
use crate::rng::{self, Rng, Streams};
use crate::train::{self, for_each_logits, shuffled_batches, EpochRecord, Learner, MeanAcc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrejudiceStrategy {
    Gmm,
    Gce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Entropy of the last prejudice model.
    Final,
    /// Mean of per-epoch entropies (the Entropy-margin).
    EpochAveraged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Gce {
        q: f64,
    },
    Ce,
    Coteaching {
        forget_rate: f64,
        num_gradual: usize,
    },
    Aum {
        /// Samples whose averaged margin falls below this percentile of all
        /// margins are removed.
        percentile: f64,
        /// Length of the margin-recording pass; defaults to the robust epochs.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epochs: Option<usize>,
    },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Gce { q: 0.7 }
    }
}

impl DenoiserSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DenoiserSpec::Gce { .. } => "gce",
            DenoiserSpec::Ce => "ce",
            DenoiserSpec::Coteaching { .. } => "coteaching",
            DenoiserSpec::Aum { .. } => "aum",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DenoiserSpec::Gce { q } => LossSpec::gce(q).validate(),
            DenoiserSpec::Ce => Ok(()),
            DenoiserSpec::Coteaching { forget_rate, .. } => {
                if !(0.0..1.0).contains(&forget_rate) {
                    return Err(Error::param("coteaching.forget_rate", forget_rate, "must lie in [0, 1)"));
                }
                Ok(())
            }
            DenoiserSpec::Aum { percentile, .. } => {
                if !(percentile > 0.0 && percentile < 100.0) {
                    return Err(Error::param("aum.percentile", percentile, "must lie in (0, 100)"));
                }
                Ok(())
            }
        }
    }
}

/// Fraction of each batch a co-teaching peer passes on at `epoch`:
/// `1 − forget_rate·min(epoch/num_gradual, 1)`.
pub fn coteaching_retention(forget_rate: f64, num_gradual: usize, epoch: usize) -> f64 {
    let ramp = if num_gradual == 0 {
        1.0
    } else {
        (epoch as f64 / num_gradual as f64).min(1.0)
    };
    1.0 - forget_rate * ramp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenebConfig {
    /// Clean-posterior threshold for the GMM split.
    pub p_t: f64,
    /// Temperature of the entropy score.
    #[serde(alias = "tau")]
    pub score_tau: f64,
    /// Temperature inside the prejudice training loss.
    pub loss_tau: f64,
    pub warmup_epochs: usize,
    /// GCE exponent of the prejudice model (GCE strategy).
    pub gce_q: f64,
    pub prejudice_epochs: usize,
    pub robust_epochs: usize,
    pub prejudice_strategy: PrejudiceStrategy,
    /// `None` picks `Final` for the GMM strategy and `EpochAveraged` for GCE.
    pub entropy_mode: Option<EntropyMode>,
    pub denoiser: DenoiserSpec,
    /// Optimizer of the prejudice stage, and of the robust stage unless
    /// `robust_sgd` is set.
    pub sgd: SgdConfig,
    pub robust_sgd: Option<SgdConfig>,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DenebConfig {
    fn default() -> Self {
        Self {
            p_t: 0.1,
            score_tau: 1.0,
            loss_tau: 1.0,
            warmup_epochs: 5,
            gce_q: 0.5,
            prejudice_epochs: 30,
            robust_epochs: 30,
            prejudice_strategy: PrejudiceStrategy::Gmm,
            entropy_mode: None,
            denoiser: DenoiserSpec::default(),
            sgd: SgdConfig::default(),
            robust_sgd: None,
            hidden: vec![256, 128],
            seed: 0,
        }
    }
}

impl DenebConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_t) {
            return Err(Error::param("p_t", self.p_t, "must lie in [0, 1]"));
        }
        for (name, tau) in [("score_tau", self.score_tau), ("loss_tau", self.loss_tau)] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::param(name, tau, "temperature must be positive"));
            }
        }
        if self.warmup_epochs > self.prejudice_epochs {
            return Err(Error::param(
                "warmup_epochs",
                self.warmup_epochs,
                "cannot exceed prejudice_epochs",
            ));
        }
        LossSpec::gce(self.gce_q).validate()?;
        self.denoiser.validate()?;
        if let Some(sgd) = &self.robust_sgd {
            sgd.validate()?;
        }
        self.sgd.validate()
    }

    pub fn entropy_mode(&self) -> EntropyMode {
        self.entropy_mode.unwrap_or(match self.prejudice_strategy {
            PrejudiceStrategy::Gmm => EntropyMode::Final,
            PrejudiceStrategy::Gce => EntropyMode::EpochAveraged,
        })
    }

    pub fn robust(&self) -> RobustConfig {
        RobustConfig {
            epochs: self.robust_epochs,
            sgd: self.robust_sgd.unwrap_or(self.sgd),
            hidden: self.hidden.clone(),
            seed: self.seed,
        }
    }
}

/// Entropy of a probability vector with `0·log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // Rounding can push a one-hot row a hair below zero.
    h.max(0.0)
}

/// `H_τ(x)` for every sample, in dataset order.
pub fn entropy_scores(model: &Mlp, dataset: &LabeledDataset, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", tau, "temperature must be positive"));
    }
    let mut out = Vec::with_capacity(dataset.len());
    let mut probs = Vec::new();
    for_each_logits(model, dataset, |_, row| {
        softmax_into(row, tau, &mut probs);
        out.push(entropy(&probs));
    })?;
    Ok(out)
}

/// Elementwise mean over epochs.
pub fn entropy_margin(history: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = history.first().ok_or(Error::EmptyInput("entropy history"))?;
    let mut sum = vec![0.0f64; first.len()];
    for h in history {
        if h.len() != sum.len() {
            return Err(Error::LengthMismatch {
                what: "entropy history epoch",
                expected: sum.len(),
                found: h.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(h) {
            *s += v;
        }
    }
    let e = history.len() as f64;
    Ok(sum.into_iter().map(|s| s / e).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTable {
    /// Entropy of the final prejudice model.
    pub final_scores: Vec<f64>,
    /// One vector per recorded epoch.
    pub history: Vec<Vec<f64>>,
}

impl EntropyTable {
    pub fn margin(&self) -> Result<Vec<f64>> {
        entropy_margin(&self.history)
    }

    pub fn scores(&self, mode: EntropyMode) -> Result<Vec<f64>> {
        match mode {
            EntropyMode::Final => Ok(self.final_scores.clone()),
            EntropyMode::EpochAveraged => self.margin(),
        }
    }
}

/// Per-sample draw probabilities with a cached cumulative table.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl SamplingDistribution {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("sampling distribution"));
        }
        Ok(Self::from_normalized(vec![1.0 / n as f64; n]))
    }

    fn from_normalized(probs: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { probs, cdf }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Indices with positive probability.
    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len()).filter(|&i| self.probs[i] > 0.0).collect()
    }

    /// All positive entries are bit-identical.
    pub fn is_uniform(&self) -> bool {
        let mut positive = self.probs.iter().filter(|&&p| p > 0.0);
        match positive.next() {
            Some(first) => positive.all(|p| p == first),
            None => false,
        }
    }

    /// Zeroes every entry outside `keep` and renormalizes.
    pub fn restricted(&self, keep: &[usize]) -> Result<Self> {
        let mut scores = vec![0.0; self.probs.len()];
        for &i in keep {
            scores[i] = self.probs[i];
        }
        if scores.iter().all(|&s| s == 0.0) {
            return Err(Error::Degenerate("restriction leaves no probability mass".into()));
        }
        sampling_distribution(&scores)
    }

    /// One inverse-CDF draw.
    pub fn draw(&self, rng: &mut Rng) -> usize {
        let total = *self.cdf.last().expect("nonempty distribution");
        let u = rng.random::<f64>() * total;
        let i = self.cdf.partition_point(|&c| c <= u);
        // u < total, so only rounding at the top can push past the end.
        i.min(self.cdf.len() - 1)
    }
}

/// `P_i = s_i / Σ s`; all-zero scores give the uniform distribution.
pub fn sampling_distribution(scores: &[f64]) -> Result<SamplingDistribution> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("sampling scores"));
    }
    if let Some(bad) = scores.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::param("score", bad, "scores must be finite and non-negative"));
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return SamplingDistribution::uniform(scores.len());
    }
    Ok(SamplingDistribution::from_normalized(
        scores.iter().map(|s| s / total).collect(),
    ))
}

/// `batch_size` i.i.d. draws with replacement.
pub fn sample_batch(dist: &SamplingDistribution, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch_size).map(|_| dist.draw(rng)).collect()
}

/// Batches for one robust epoch. A uniform distribution is realized as a
/// permutation of its support on the shuffle stream; otherwise
/// `|support|` draws are split into `ceil(|support| / B)` batches.
pub fn epoch_batches(
    dist: &SamplingDistribution,
    batch_size: usize,
    shuffle: &mut Rng,
    resample: &mut Rng,
) -> Vec<Vec<usize>> {
    let support = dist.support();
    if dist.is_uniform() {
        return shuffled_batches(&support, batch_size, shuffle);
    }
    let mut left = support.len();
    let mut out = Vec::with_capacity(left.div_ceil(batch_size));
    while left > 0 {
        let b = batch_size.min(left);
        out.push(sample_batch(dist, b, resample));
        left -= b;
    }
    out
}

/// Per-epoch record of the GMM split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub epoch: usize,
    pub kept: usize,
    pub kept_by_quadrant: QuadrantCounts,
    pub means: Option<[f64; 2]>,
    /// Set when the epoch fell back to the full dataset.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PrejudiceOutcome {
    pub model: Mlp,
    pub entropy: EntropyTable,
    pub splits: Vec<SplitSummary>,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// GMM strategy: warm-up epochs train CE on everything; afterwards each
/// epoch refits the loss GMM and trains CE only on samples whose clean
/// posterior exceeds `p_t`.
pub fn train_prejudice_gmm(dataset: &LabeledDataset, cfg: &DenebConfig) -> Result<PrejudiceOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let streams = Streams::AUX;
    let mut learner = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, streams)?;
    let mut rng = rng::seeded(cfg.seed, streams.shuffle);
    let record_history = cfg.entropy_mode() == EntropyMode::EpochAveraged;
    let spec = LossSpec::CE.with_tau(cfg.loss_tau);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut out = PrejudiceOutcome {
        model: learner.model.clone(),
        entropy: EntropyTable::default(),
        splits: Vec::new(),
        epochs: Vec::new(),
        warnings: Vec::new(),
    };

    for epoch in 0..cfg.prejudice_epochs {
        let pool = if epoch < cfg.warmup_epochs {
            all.clone()
        } else {
            let (pool, summary) = gmm_pool(&learner.model, dataset, cfg.p_t, epoch)?;
            if let Some(w) = &summary.fallback {
                out.warnings.push(format!("prejudice epoch {epoch}: {w}"));
            }
            out.splits.push(summary);
            pool.unwrap_or_else(|| all.clone())
        };
        let mean_loss = learner.epoch(dataset, &pool, &spec, &mut rng)?;
        out.epochs.push(EpochRecord {
            stage: "prejudice".into(),
            epoch,
            mean_loss,
            samples: pool.len(),
        });
        if record_history {
            out.entropy.history.push(entropy_scores(&learner.model, dataset, cfg.score_tau)?);
        }
    }
    out.entropy.final_scores = entropy_scores(&learner.model, dataset, cfg.score_tau)?;
    out.model = learner.model;
    Ok(out)
}

/// The D̄ pool for one epoch; `None` means fall back to the full dataset.
fn gmm_pool(model: &Mlp, dataset: &LabeledDataset, p_t: f64, epoch: usize) -> Result<(Option<Vec<usize>>, SplitSummary)> {
    let losses = per_sample_losses(model, dataset, &LossSpec::CE)?;
    let fit = match gmm::fit_em(&losses, &EmOptions::default()) {
        Ok(g) => g,
        Err(Error::Degenerate(msg)) => {
            let summary = SplitSummary {
                epoch,
                kept: dataset.len(),
                kept_by_quadrant: dataset.quadrant_counts(),
                means: None,
                fallback: Some(format!("GMM fit degenerate ({msg}); training on all samples")),
            };
            return Ok((None, summary));
        }
        Err(e) => return Err(e),
    };
    let split = gmm::split_by_threshold(dataset, fit.posteriors(&losses), p_t)?;
    if split.kept.is_empty() {
        let summary = SplitSummary {
            epoch,
            kept: dataset.len(),
            kept_by_quadrant: dataset.quadrant_counts(),
            means: Some(fit.means),
            fallback: Some(format!("no sample exceeds p_t = {p_t}; training on all samples")),
        };
        return Ok((None, summary));
    }
    let summary = SplitSummary {
        epoch,
        kept: split.kept.len(),
        kept_by_quadrant: QuadrantCounts::from_samples(split.kept.iter().map(|&i| dataset.sample(i))),
        means: Some(fit.means),
        fallback: None,
    };
    Ok((Some(split.kept), summary))
}

/// GCE strategy: every epoch trains GCE(q, loss_tau) on the full dataset and
/// then records `H_τ` for every sample.
pub fn train_prejudice_gce(dataset: &LabeledDataset, cfg: &DenebConfig) -> Result<PrejudiceOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let streams = Streams::AUX;
    let mut learner = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, streams)?;
    let mut rng = rng::seeded(cfg.seed, streams.shuffle);
    let spec = LossSpec::gce(cfg.gce_q).with_tau(cfg.loss_tau);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut entropy = EntropyTable::default();
    let mut epochs = Vec::with_capacity(cfg.prejudice_epochs);
    for epoch in 0..cfg.prejudice_epochs {
        let mean_loss = learner.epoch(dataset, &all, &spec, &mut rng)?;
        epochs.push(EpochRecord {
            stage: "prejudice".into(),
            epoch,
            mean_loss,
            samples: all.len(),
        });
        entropy.history.push(entropy_scores(&learner.model, dataset, cfg.score_tau)?);
    }
    entropy.final_scores = match entropy.history.last() {
        Some(h) => h.clone(),
        None => entropy_scores(&learner.model, dataset, cfg.score_tau)?,
    };
    Ok(PrejudiceOutcome {
        model: learner.model,
        entropy,
        splits: Vec::new(),
        epochs,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RobustOutcome {
    pub model: Mlp,
    /// Second co-teaching peer.
    pub peer: Option<Mlp>,
    pub epochs: Vec<EpochRecord>,
    /// Averaged margins from the AUM recording pass.
    pub margins: Option<Vec<f64>>,
    /// Samples that survived AUM filtering.
    pub retained: Option<Vec<usize>>,
}

/// Robust training on batches drawn from `dist`.
pub fn train_robust(
    dataset: &LabeledDataset,
    dist: &SamplingDistribution,
    denoiser: &DenoiserSpec,
    cfg: &RobustConfig,
) -> Result<RobustOutcome> {
    train_robust_weighted(dataset, dist, denoiser, cfg, None)
}

/// [`train_robust`] with an extra per-sample loss weight. Only diagnostics
/// pass weights.
pub fn train_robust_weighted(
    dataset: &LabeledDataset,
    dist: &SamplingDistribution,
    denoiser: &DenoiserSpec,
    cfg: &RobustConfig,
    sample_weights: Option<&[f64]>,
) -> Result<RobustOutcome> {
    denoiser.validate()?;
    cfg.sgd.validate()?;
    if dist.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            what: "sampling distribution",
            expected: dataset.len(),
            found: dist.len(),
        });
    }
    if let Some(w) = sample_weights {
        if w.len() != dataset.len() {
            return Err(Error::LengthMismatch {
                what: "sample weights",
                expected: dataset.len(),
                found: w.len(),
            });
        }
    }
    match *denoiser {
        DenoiserSpec::Gce { q } => {
            let (model, epochs) = single_model(dataset, dist, &LossSpec::gce(q), cfg, Streams::MAIN, sample_weights, "robust")?;
            Ok(RobustOutcome {
                model,
                peer: None,
                epochs,
                margins: None,
                retained: None,
            })
        }
        DenoiserSpec::Ce => {
            let (model, epochs) = single_model(dataset, dist, &LossSpec::CE, cfg, Streams::MAIN, sample_weights, "robust")?;
            Ok(RobustOutcome {
                model,
                peer: None,
                epochs,
                margins: None,
                retained: None,
            })
        }
        DenoiserSpec::Coteaching {
            forget_rate,
            num_gradual,
        } => coteaching(dataset, dist, forget_rate, num_gradual, cfg, sample_weights),
        DenoiserSpec::Aum { percentile, epochs } => {
            let margins = aum_margins(dataset, dist, epochs.unwrap_or(cfg.epochs), cfg, sample_weights)?;
            let retained = aum_retained(&margins, percentile);
            let restricted = dist.restricted(&retained).stage("aum filtering")?;
            let (model, log) = single_model(dataset, &restricted, &LossSpec::CE, cfg, Streams::MAIN, sample_weights, "robust")?;
            Ok(RobustOutcome {
                model,
                peer: None,
                epochs: log,
                margins: Some(margins),
                retained: Some(retained),
            })
        }
    }
}

fn batch_weights(weights: Option<&[f64]>, batch: &[usize]) -> Option<Vec<f64>> {
    weights.map(|w| batch.iter().map(|&i| w[i]).collect())
}

fn single_model(
    dataset: &LabeledDataset,
    dist: &SamplingDistribution,
    spec: &LossSpec,
    cfg: &RobustConfig,
    streams: Streams,
    weights: Option<&[f64]>,
    stage: &str,
) -> Result<(Mlp, Vec<EpochRecord>)> {
    let mut learner = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, streams)?;
    let mut shuffle = rng::seeded(cfg.seed, streams.shuffle);
    let mut resample = rng::seeded(cfg.seed, streams.resample);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = MeanAcc::default();
        let mut drawn = 0;
        for batch in epoch_batches(dist, cfg.sgd.batch_size, &mut shuffle, &mut resample) {
            let w = batch_weights(weights, &batch);
            acc.extend(&learner.step(dataset, &batch, w.as_deref(), spec)?.losses);
            drawn += batch.len();
        }
        log.push(EpochRecord {
            stage: stage.into(),
            epoch,
            mean_loss: acc.mean(),
            samples: drawn,
        });
    }
    Ok((learner.model, log))
}

/// Positions of the `keep` smallest losses, returned in batch order. Ties
/// keep the earlier position.
fn small_loss_positions(losses: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut chosen = order[..keep.min(order.len())].to_vec();
    chosen.sort_unstable();
    chosen
}

fn batch_ce(model: &Mlp, dataset: &LabeledDataset, batch: &[usize]) -> Result<Vec<f64>> {
    let logits = model.forward(&dataset.gather(batch))?;
    batch
        .iter()
        .enumerate()
        .map(|(k, &i)| Ok(LossSpec::CE.eval(logits.row(k), dataset.sample(i).y_given)?.0))
        .collect()
}

/// Two peers; each trains on the small-loss part of the batch as judged by
/// the other.
fn coteaching(
    dataset: &LabeledDataset,
    dist: &SamplingDistribution,
    forget_rate: f64,
    num_gradual: usize,
    cfg: &RobustConfig,
    weights: Option<&[f64]>,
) -> Result<RobustOutcome> {
    let mut a = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, Streams::MAIN)?;
    let peer_streams = Streams {
        init: rng::stream::PEER_MODEL_INIT,
        ..Streams::MAIN
    };
    let mut b = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, peer_streams)?;
    let mut shuffle = rng::seeded(cfg.seed, Streams::MAIN.shuffle);
    let mut resample = rng::seeded(cfg.seed, Streams::MAIN.resample);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let rate = coteaching_retention(forget_rate, num_gradual, epoch);
        let mut acc = MeanAcc::default();
        let mut drawn = 0;
        for batch in epoch_batches(dist, cfg.sgd.batch_size, &mut shuffle, &mut resample) {
            let keep = ((rate * batch.len() as f64).floor() as usize).max(1);
            let la = batch_ce(&a.model, dataset, &batch)?;
            let lb = batch_ce(&b.model, dataset, &batch)?;
            let for_b: Vec<usize> = small_loss_positions(&la, keep).into_iter().map(|p| batch[p]).collect();
            let for_a: Vec<usize> = small_loss_positions(&lb, keep).into_iter().map(|p| batch[p]).collect();
            let wa = batch_weights(weights, &for_a);
            acc.extend(&a.step(dataset, &for_a, wa.as_deref(), &LossSpec::CE)?.losses);
            let wb = batch_weights(weights, &for_b);
            b.step(dataset, &for_b, wb.as_deref(), &LossSpec::CE)?;
            drawn += batch.len();
        }
        log.push(EpochRecord {
            stage: "robust".into(),
            epoch,
            mean_loss: acc.mean(),
            samples: drawn,
        });
    }
    Ok(RobustOutcome {
        model: a.model,
        peer: Some(b.model),
        epochs: log,
        margins: None,
        retained: None,
    })
}

/// `logit[y_given] − max_{c ≠ y_given} logit[c]` for every sample.
pub fn margins(model: &Mlp, dataset: &LabeledDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(dataset.len());
    for_each_logits(model, dataset, |i, row| {
        let y = dataset.sample(i).y_given;
        let other = row
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != y)
            .fold(f32::NEG_INFINITY, |m, (_, &v)| m.max(v));
        out.push(row[y] as f64 - other as f64);
    })?;
    Ok(out)
}

/// Margins averaged over the end of every epoch of a CE recording pass on
/// auxiliary streams.
pub(crate) fn aum_margins(
    dataset: &LabeledDataset,
    dist: &SamplingDistribution,
    epochs: usize,
    cfg: &RobustConfig,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Err(Error::param("aum.epochs", 0, "the margin pass needs at least one epoch"));
    }
    let streams = Streams::AUX;
    let mut learner = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, streams)?;
    let mut shuffle = rng::seeded(cfg.seed, streams.shuffle);
    let mut resample = rng::seeded(cfg.seed, streams.resample);
    let mut sum = vec![0.0f64; dataset.len()];
    for _ in 0..epochs {
        for batch in epoch_batches(dist, cfg.sgd.batch_size, &mut shuffle, &mut resample) {
            let w = batch_weights(weights, &batch);
            learner.step(dataset, &batch, w.as_deref(), &LossSpec::CE)?;
        }
        for (s, m) in sum.iter_mut().zip(margins(&learner.model, dataset)?) {
            *s += m;
        }
    }
    Ok(sum.into_iter().map(|s| s / epochs as f64).collect())
}

/// Linear-interpolation percentile of `values` (`pct` in `[0, 100]`).
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Indices whose margin is at least the `pct`-th percentile.
pub fn aum_retained(margins: &[f64], pct: f64) -> Vec<usize> {
    let cut = percentile(margins, pct);
    (0..margins.len()).filter(|&i| margins[i] >= cut).collect()
}

#[derive(Debug, Clone)]
pub struct DenebOutcome {
    pub model: Mlp,
    pub prejudice: Option<Mlp>,
    pub entropy: EntropyTable,
    pub scores: Vec<f64>,
    pub distribution: SamplingDistribution,
    pub robust: RobustOutcome,
    pub report: RunReport,
}

/// Full pipeline. With zero prejudice epochs the distribution is uniform.
pub fn run_deneb(dataset: &LabeledDataset, cfg: &DenebConfig) -> Result<DenebOutcome> {
    cfg.validate()?;
    let mut report = RunReport::new("deneb", dataset, serde_json::to_value(cfg)?, cfg.seed);

    let t = Instant::now();
    let (prejudice, entropy, scores) = if cfg.prejudice_epochs == 0 {
        report.warnings.push("no prejudice epochs; sampling uniformly".into());
        (None, EntropyTable::default(), vec![0.0; dataset.len()])
    } else {
        let out = match cfg.prejudice_strategy {
            PrejudiceStrategy::Gmm => train_prejudice_gmm(dataset, cfg),
            PrejudiceStrategy::Gce => train_prejudice_gce(dataset, cfg),
        }
        .stage("prejudice")?;
        report.epochs.extend(out.epochs);
        report.warnings.extend(out.warnings);
        for s in &out.splits {
            report.push("prejudice", &format!("kept_epoch_{}", s.epoch), None, s.kept as f64);
            for q in Quadrant::ALL {
                report.push(
                    "prejudice",
                    &format!("kept_epoch_{}", s.epoch),
                    Some(q),
                    s.kept_by_quadrant.get(q) as f64,
                );
            }
        }
        report.splits = out.splits;
        let scores = out.entropy.scores(cfg.entropy_mode()).stage("scoring")?;
        (Some(out.model), out.entropy, scores)
    };
    report.timing("prejudice", t.elapsed());

    let t = Instant::now();
    let distribution = sampling_distribution(&scores).stage("sampling")?;
    if prejudice.is_some() {
        score_diagnostics(&mut report, dataset, &scores)?;
        if distribution.is_uniform() {
            report.warnings.push("all entropy scores are zero; sampling uniformly".into());
        }
    }
    distribution_diagnostics(&mut report, dataset, &distribution);
    report.timing("scoring", t.elapsed());

    let t = Instant::now();
    let robust = train_robust(dataset, &distribution, &cfg.denoiser, &cfg.robust()).stage("robust")?;
    report.epochs.extend(robust.epochs.iter().cloned());
    if let Some(kept) = &robust.retained {
        let counts = QuadrantCounts::from_samples(kept.iter().map(|&i| dataset.sample(i)));
        for q in Quadrant::ALL {
            report.push("robust", "aum_retained", Some(q), counts.get(q) as f64);
        }
    }
    report.timing("robust", t.elapsed());
    analysis::training_accuracy(&mut report, &robust.model, dataset)?;

    Ok(DenebOutcome {
        model: robust.model.clone(),
        prejudice,
        entropy,
        scores,
        distribution,
        robust,
        report,
    })
}

fn score_diagnostics(report: &mut RunReport, dataset: &LabeledDataset, scores: &[f64]) -> Result<()> {
    let mut sums = [MeanAcc::default(); 4];
    for (s, &v) in dataset.samples().iter().zip(scores) {
        sums[s.quadrant().index()].extend(&[v]);
    }
    for q in Quadrant::ALL {
        if dataset.quadrant_counts().get(q) > 0 {
            report.push("scoring", "entropy_mean", Some(q), sums[q.index()].mean());
        }
    }
    if let Ok(auc) = analysis::separation_auc(scores, dataset, Positive::Conflicting) {
        report.push("scoring", "auc_conflicting", None, auc);
    }
    if let Ok(auc) = analysis::separation_auc_aligned(scores, dataset, Positive::Noisy) {
        report.push("scoring", "auc_noisy_within_aligned", None, auc);
    }
    Ok(())
}

fn distribution_diagnostics(report: &mut RunReport, dataset: &LabeledDataset, dist: &SamplingDistribution) {
    let mut mass = [0.0f64; 4];
    for (s, &p) in dataset.samples().iter().zip(dist.probs()) {
        mass[s.quadrant().index()] += p;
    }
    for q in Quadrant::ALL {
        report.push("sampling", "probability_mass", Some(q), mass[q.index()]);
    }
}

/// Uniform-distribution CE run on the main streams: the reference that
/// degenerate pipeline configurations must reproduce.
pub fn vanilla_equivalent(dataset: &LabeledDataset, cfg: &DenebConfig) -> Result<Mlp> {
    Ok(train::train_ce(dataset, cfg.sgd, &cfg.hidden, cfg.robust_epochs, cfg.seed, Streams::MAIN)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_toy_biased;

    fn small_cfg() -> DenebConfig {
        DenebConfig {
            prejudice_epochs: 3,
            robust_epochs: 3,
            warmup_epochs: 1,
            hidden: vec![8],
            sgd: SgdConfig {
                batch_size: 32,
                ..SgdConfig::default()
            },
            ..DenebConfig::default()
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.1; 10]) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(entropy_margin(&[vec![0.0], vec![2.0]]).unwrap(), vec![1.0]);
        assert_eq!(entropy_margin(&vec![vec![0.7; 3]; 5]).unwrap(), vec![0.7; 3]);
        assert!(entropy_margin(&[]).is_err());
        assert!(entropy_margin(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(sampling_distribution(&[1.0, 3.0]).unwrap().probs(), &[0.25, 0.75]);
        assert_eq!(sampling_distribution(&[0.0; 4]).unwrap().probs(), &[0.25; 4]);
        assert_eq!(sampling_distribution(&[2.0; 5]).unwrap().probs(), &[0.2; 5]);
        assert!(sampling_distribution(&[1.0, -0.5]).is_err());
        assert!(sampling_distribution(&[]).is_err());
    }

    #[test]
    fn one_hot_distribution_draws_one_index() {
        let d = sampling_distribution(&[0.0, 0.0, 5.0, 0.0]).unwrap();
        assert_eq!(sample_batch(&d, 50, &mut rng::seeded(1, 5)), vec![2; 50]);
    }

    #[test]
    fn epoch_draw_count_equals_support() {
        let d = sampling_distribution(&[1.0, 2.0, 0.0, 4.0, 1.0]).unwrap();
        let mut a = rng::seeded(0, 2);
        let mut b = rng::seeded(0, 5);
        let batches = epoch_batches(&d, 3, &mut a, &mut b);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 1]);
        assert!(batches.concat().iter().all(|&i| i != 2));
    }

    #[test]
    fn retention_schedule() {
        assert_eq!(coteaching_retention(0.2, 10, 0), 1.0);
        assert!((coteaching_retention(0.2, 10, 5) - 0.9).abs() < 1e-15);
        assert!((coteaching_retention(0.2, 10, 50) - 0.8).abs() < 1e-15);
        assert!((coteaching_retention(0.2, 0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(aum_retained(&[0.5, -1.0, 2.0, 1.0, 0.0], 20.0), vec![0, 2, 3, 4]);
    }

    #[test]
    fn denoiser_validation() {
        assert!(DenoiserSpec::Coteaching { forget_rate: 1.0, num_gradual: 1 }.validate().is_err());
        assert!(DenoiserSpec::Aum { percentile: 0.0, epochs: None }.validate().is_err());
        assert!(DenoiserSpec::Gce { q: 0.0 }.validate().is_err());
        let mut cfg = small_cfg();
        cfg.warmup_epochs = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_prejudice_epochs_with_ce_is_vanilla() {
        let d = make_toy_biased(300, 0.1, 0.1, 3).unwrap();
        let cfg = DenebConfig {
            prejudice_epochs: 0,
            warmup_epochs: 0,
            denoiser: DenoiserSpec::Ce,
            ..small_cfg()
        };
        let out = run_deneb(&d, &cfg).unwrap();
        assert_eq!(out.model, vanilla_equivalent(&d, &cfg).unwrap());
    }

    #[test]
    fn threshold_zero_and_full_warmup_match_plain_ce() {
        let d = make_toy_biased(300, 0.1, 0.1, 3).unwrap();
        let reference = |cfg: &DenebConfig| {
            train::train_ce(&d, cfg.sgd, &cfg.hidden, cfg.prejudice_epochs, cfg.seed, Streams::AUX)
                .unwrap()
                .0
        };
        let warm = DenebConfig {
            warmup_epochs: 3,
            ..small_cfg()
        };
        assert_eq!(train_prejudice_gmm(&d, &warm).unwrap().model, reference(&warm));
        let open = DenebConfig {
            p_t: 0.0,
            ..small_cfg()
        };
        let out = train_prejudice_gmm(&d, &open).unwrap();
        assert!(out.splits.iter().all(|s| s.kept == d.len()));
        assert_eq!(out.model, reference(&open));
    }

    #[test]
    fn gce_strategy_records_one_entry_per_epoch() {
        let d = make_toy_biased(200, 0.1, 0.1, 3).unwrap();
        let cfg = DenebConfig {
            prejudice_strategy: PrejudiceStrategy::Gce,
            prejudice_epochs: 1,
            ..small_cfg()
        };
        let cfg = DenebConfig { warmup_epochs: 0, ..cfg };
        let out = train_prejudice_gce(&d, &cfg).unwrap();
        assert_eq!(out.entropy.history.len(), 1);
        assert_eq!(out.entropy.margin().unwrap(), out.entropy.history[0]);
        let ln2 = 2f64.ln();
        assert!(out.entropy.final_scores.iter().all(|&h| (0.0..=ln2 + 1e-12).contains(&h)));
    }
}
