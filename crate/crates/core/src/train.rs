//! Shared mini-batch machinery: inference over a dataset, batch plans, and a
//! single optimizer step.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{batch_loss, BatchLoss, LossSpec};
use crate::nnkit::{sgd_step, Mlp, SgdConfig, SgdState};
use crate::rng::{self, Rng, Streams};

/// Rows per inference forward pass.
pub const INFERENCE_CHUNK: usize = 512;

/// Calls `f(i, logits_i)` for every sample in dataset order.
pub fn for_each_logits(model: &Mlp, dataset: &LabeledDataset, mut f: impl FnMut(usize, &[f32])) -> Result<()> {
    let n = dataset.len();
    let mut start = 0;
    let mut idx = Vec::with_capacity(INFERENCE_CHUNK);
    while start < n {
        let end = (start + INFERENCE_CHUNK).min(n);
        idx.clear();
        idx.extend(start..end);
        let logits = model.forward(&dataset.gather(&idx))?;
        for (k, i) in (start..end).enumerate() {
            f(i, logits.row(k));
        }
        start = end;
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

pub fn predict(model: &Mlp, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(dataset.len());
    for_each_logits(model, dataset, |_, row| out.push(argmax(row)))?;
    Ok(out)
}

/// Splits a fresh permutation of `pool` into consecutive batches; the last
/// batch may be short.
pub fn shuffled_batches(pool: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = pool.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// A model together with its optimizer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: Mlp,
    pub state: SgdState,
    pub sgd: SgdConfig,
}

impl Learner {
    pub fn new(model: Mlp, sgd: SgdConfig) -> Result<Self> {
        sgd.validate()?;
        let state = SgdState::new(&model);
        Ok(Self { model, state, sgd })
    }

    /// Fresh model sized for `dataset`, initialized from `streams.init`.
    pub fn for_dataset(dataset: &LabeledDataset, hidden: &[usize], sgd: SgdConfig, seed: u64, streams: Streams) -> Result<Self> {
        let model = Mlp::with_stream(dataset.feature_dim(), hidden, dataset.class_count(), seed, streams.init)?;
        Self::new(model, sgd)
    }

    /// One SGD step on `indices`, optimizing the `weights`-weighted mean loss
    /// against `y_given`.
    pub fn step(
        &mut self,
        dataset: &LabeledDataset,
        indices: &[usize],
        weights: Option<&[f64]>,
        spec: &LossSpec,
    ) -> Result<BatchLoss> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let labels: Vec<usize> = indices.iter().map(|&i| dataset.sample(i).y_given).collect();
        let cache = self.model.forward_train(dataset.gather(indices))?;
        let loss = batch_loss(cache.logits(), &labels, weights, spec)?;
        let grads = self.model.backward(&cache, &loss.d_logits)?;
        sgd_step(&mut self.model, &grads, &mut self.state, &self.sgd)?;
        Ok(loss)
    }

    /// One epoch over a shuffled `pool`; returns the mean per-sample loss.
    pub fn epoch(
        &mut self,
        dataset: &LabeledDataset,
        pool: &[usize],
        spec: &LossSpec,
        rng: &mut Rng,
    ) -> Result<f64> {
        let mut acc = MeanAcc::default();
        for batch in shuffled_batches(pool, self.sgd.batch_size, rng) {
            acc.extend(&self.step(dataset, &batch, None, spec)?.losses);
        }
        Ok(acc.mean())
    }
}

/// Plain cross-entropy training with a fresh permutation of the whole
/// dataset every epoch.
pub fn train_ce(
    dataset: &LabeledDataset,
    sgd: SgdConfig,
    hidden: &[usize],
    epochs: usize,
    seed: u64,
    streams: Streams,
) -> Result<(Mlp, Vec<EpochRecord>)> {
    let mut learner = Learner::for_dataset(dataset, hidden, sgd, seed, streams)?;
    let mut rng = rng::seeded(seed, streams.shuffle);
    let pool: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mean_loss = learner.epoch(dataset, &pool, &LossSpec::CE, &mut rng)?;
        log.push(EpochRecord {
            stage: "train".into(),
            epoch,
            mean_loss,
            samples: pool.len(),
        });
    }
    Ok((learner.model, log))
}

/// Running mean in `f64`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAcc {
    sum: f64,
    n: usize,
}

impl MeanAcc {
    pub fn extend(&mut self, values: &[f64]) {
        self.sum += values.iter().sum::<f64>();
        self.n += values.len();
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Samples the epoch trained on (pool size or number of draws).
    pub samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_toy_biased;
    use crate::rng;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn batches_cover_pool_once() {
        let pool: Vec<usize> = (0..10).collect();
        let b = shuffled_batches(&pool, 4, &mut rng::seeded(0, 1));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, pool);
    }

    #[test]
    fn inference_matches_single_forward() {
        let d = make_toy_biased(1100, 0.1, 0.1, 2).unwrap();
        let m = Mlp::new(2, &[8], 2, 1).unwrap();
        let mut rows = Vec::new();
        for_each_logits(&m, &d, |_, r| rows.extend_from_slice(r)).unwrap();
        let all: Vec<usize> = (0..d.len()).collect();
        assert_eq!(rows, m.forward(&d.gather(&all)).unwrap().into_data());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let d = make_toy_biased(8, 0.1, 0.0, 2).unwrap();
        let mut l = Learner::new(Mlp::new(2, &[4], 2, 1).unwrap(), SgdConfig::default()).unwrap();
        assert!(l.step(&d, &[], None, &LossSpec::CE).is_err());
    }
}
