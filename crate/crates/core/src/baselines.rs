//! Reference trainers: vanilla CE, relative-difficulty reweighting (LfF) and
//! error-set upweighting (JTT).

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result, StageContext};
use crate::losses::LossSpec;
use crate::nnkit::{Mlp, SgdConfig};
use crate::report::RunReport;
use crate::rng::{self, Streams};
use crate::train::{self, predict, shuffled_batches, EpochRecord, Learner, MeanAcc};

/// Plain CE on `y_given` with a fresh permutation every epoch.
pub fn train_vanilla(
    dataset: &LabeledDataset,
    sgd: SgdConfig,
    hidden: &[usize],
    epochs: usize,
    seed: u64,
) -> Result<(Mlp, Vec<EpochRecord>)> {
    train::train_ce(dataset, sgd, hidden, epochs, seed, Streams::MAIN)
}

/// `L_b / (L_b + L_d)`, with `0.5` when both losses are zero.
pub fn relative_difficulty_weight(loss_b: f64, loss_d: f64) -> Result<f64> {
    if !(loss_b >= 0.0) || !(loss_d >= 0.0) {
        return Err(Error::param(
            "loss",
            format!("({loss_b}, {loss_d})"),
            "relative difficulty needs non-negative losses",
        ));
    }
    let total = loss_b + loss_d;
    if total == 0.0 {
        return Ok(0.5);
    }
    Ok(loss_b / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LffConfig {
    pub gce_q: f64,
    /// Weight of the previous value in the per-sample loss average.
    pub ema_alpha: f64,
    pub sgd: SgdConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Pin every weight to 1.
    pub freeze_weights: bool,
}

impl Default for LffConfig {
    fn default() -> Self {
        Self {
            gce_q: 0.7,
            ema_alpha: 0.7,
            sgd: SgdConfig::default(),
            hidden: vec![256, 128],
            seed: 0,
            freeze_weights: false,
        }
    }
}

impl LffConfig {
    pub fn validate(&self) -> Result<()> {
        LossSpec::gce(self.gce_q).validate()?;
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(Error::param("ema_alpha", self.ema_alpha, "must lie in (0, 1)"));
        }
        self.sgd.validate()
    }
}

/// Per-sample exponential moving average of losses with class-wise max
/// normalization.
#[derive(Debug, Clone)]
struct LossEma {
    alpha: f64,
    values: Vec<f64>,
    labels: Vec<usize>,
    class_max: Vec<f64>,
}

impl LossEma {
    fn new(alpha: f64, dataset: &LabeledDataset) -> Self {
        Self {
            alpha,
            values: vec![0.0; dataset.len()],
            labels: dataset.given_labels(),
            class_max: vec![0.0; dataset.class_count()],
        }
    }

    fn update(&mut self, indices: &[usize], losses: &[f64]) {
        for (&i, &l) in indices.iter().zip(losses) {
            self.values[i] = self.alpha * self.values[i] + (1.0 - self.alpha) * l;
        }
        self.class_max.fill(0.0);
        for (&v, &y) in self.values.iter().zip(&self.labels) {
            self.class_max[y] = self.class_max[y].max(v);
        }
    }

    fn normalized(&self, i: usize) -> f64 {
        let m = self.class_max[self.labels[i]];
        if m > 0.0 {
            self.values[i] / m
        } else {
            self.values[i]
        }
    }
}

#[derive(Debug, Clone)]
pub struct LffOutcome {
    pub model: Mlp,
    pub biased: Mlp,
    /// Relative-difficulty weight of every sample after the last update.
    pub weights: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

fn ce_of(model: &Mlp, dataset: &LabeledDataset, batch: &[usize]) -> Result<Vec<f64>> {
    let logits = model.forward(&dataset.gather(batch))?;
    batch
        .iter()
        .enumerate()
        .map(|(k, &i)| Ok(LossSpec::CE.eval(logits.row(k), dataset.sample(i).y_given)?.0))
        .collect()
}

/// Per batch: update the biased model on GCE, refresh both loss averages,
/// then update the debiased model on CE weighted by relative difficulty.
pub fn train_lff(dataset: &LabeledDataset, cfg: &LffConfig, epochs: usize) -> Result<LffOutcome> {
    cfg.validate()?;
    let mut debiased = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, Streams::MAIN)?;
    let mut biased = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, Streams::AUX)?;
    let mut rng = rng::seeded(cfg.seed, Streams::MAIN.shuffle);
    let mut ema_b = LossEma::new(cfg.ema_alpha, dataset);
    let mut ema_d = LossEma::new(cfg.ema_alpha, dataset);
    let gce = LossSpec::gce(cfg.gce_q);
    let pool: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut acc = MeanAcc::default();
        for batch in shuffled_batches(&pool, cfg.sgd.batch_size, &mut rng) {
            let weights: Vec<f64> = if cfg.freeze_weights {
                vec![1.0; batch.len()]
            } else {
                ema_b.update(&batch, &ce_of(&biased.model, dataset, &batch)?);
                ema_d.update(&batch, &ce_of(&debiased.model, dataset, &batch)?);
                batch
                    .iter()
                    .map(|&i| relative_difficulty_weight(ema_b.normalized(i), ema_d.normalized(i)))
                    .collect::<Result<_>>()?
            };
            biased.step(dataset, &batch, None, &gce)?;
            acc.extend(&debiased.step(dataset, &batch, Some(&weights), &LossSpec::CE)?.losses);
        }
        log.push(EpochRecord {
            stage: "train".into(),
            epoch,
            mean_loss: acc.mean(),
            samples: pool.len(),
        });
    }
    let weights = (0..dataset.len())
        .map(|i| {
            if cfg.freeze_weights {
                Ok(1.0)
            } else {
                relative_difficulty_weight(ema_b.normalized(i), ema_d.normalized(i))
            }
        })
        .collect::<Result<_>>()?;
    Ok(LffOutcome {
        model: debiased.model,
        biased: biased.model,
        weights,
        epochs: log,
    })
}

/// Samples whose `y_given` differs from the model's argmax (lowest index on
/// ties).
pub fn jtt_error_set(model: &Mlp, dataset: &LabeledDataset) -> Result<Vec<usize>> {
    let pred = predict(model, dataset)?;
    Ok((0..dataset.len())
        .filter(|&i| pred[i] != dataset.sample(i).y_given)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JttConfig {
    pub bias_epochs: usize,
    pub lambda_up: usize,
    pub sgd: SgdConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Largest upsampled index list accepted.
    pub max_indices: usize,
}

impl Default for JttConfig {
    fn default() -> Self {
        Self {
            bias_epochs: 1,
            lambda_up: 20,
            sgd: SgdConfig::default(),
            hidden: vec![256, 128],
            seed: 0,
            max_indices: 50_000_000,
        }
    }
}

impl JttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bias_epochs < 1 {
            return Err(Error::param("bias_epochs", self.bias_epochs, "must be at least 1"));
        }
        if self.lambda_up < 1 {
            return Err(Error::param("lambda_up", self.lambda_up, "must be at least 1"));
        }
        self.sgd.validate()
    }
}

/// Every index once, plus `lambda_up − 1` extra copies of each error index.
pub fn upsampled_indices(n: usize, error_set: &[usize], lambda_up: usize, budget: usize) -> Result<Vec<usize>> {
    let extra = error_set.len().checked_mul(lambda_up.saturating_sub(1));
    let requested = extra.and_then(|e| e.checked_add(n)).unwrap_or(usize::MAX);
    if requested > budget {
        return Err(Error::MemoryBudget { requested, budget });
    }
    let mut out: Vec<usize> = (0..n).collect();
    out.reserve(requested - n);
    for &i in error_set {
        out.extend(std::iter::repeat_n(i, lambda_up - 1));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct JttOutcome {
    pub model: Mlp,
    pub bias_model: Mlp,
    pub error_set: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
}

/// Phase 1 trains a vanilla model for `bias_epochs` on auxiliary streams;
/// phase 2 trains a fresh model with CE over the upsampled index list.
pub fn train_jtt(dataset: &LabeledDataset, cfg: &JttConfig, epochs: usize) -> Result<JttOutcome> {
    cfg.validate()?;
    let (bias_model, mut log) =
        train::train_ce(dataset, cfg.sgd, &cfg.hidden, cfg.bias_epochs, cfg.seed, Streams::AUX).stage("jtt phase 1")?;
    for r in &mut log {
        r.stage = "bias".into();
    }
    let error_set = jtt_error_set(&bias_model, dataset)?;
    let pool = upsampled_indices(dataset.len(), &error_set, cfg.lambda_up, cfg.max_indices)?;

    let mut learner = Learner::for_dataset(dataset, &cfg.hidden, cfg.sgd, cfg.seed, Streams::MAIN)?;
    let mut rng = rng::seeded(cfg.seed, Streams::MAIN.shuffle);
    for epoch in 0..epochs {
        let mean_loss = learner.epoch(dataset, &pool, &LossSpec::CE, &mut rng)?;
        log.push(EpochRecord {
            stage: "train".into(),
            epoch,
            mean_loss,
            samples: pool.len(),
        });
    }
    Ok(JttOutcome {
        model: learner.model,
        bias_model,
        error_set,
        epochs: log,
    })
}

/// Report skeleton shared by the baselines.
pub fn baseline_report(algo: &str, dataset: &LabeledDataset, config: serde_json::Value, seed: u64, epochs: Vec<EpochRecord>) -> RunReport {
    let mut r = RunReport::new(algo, dataset, config, seed);
    r.epochs = epochs;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_toy_biased;
    use crate::nnkit::{Activation, Dense};

    fn sgd() -> SgdConfig {
        SgdConfig {
            batch_size: 32,
            ..SgdConfig::default()
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(relative_difficulty_weight(2.0, 2.0).unwrap(), 0.5);
        assert_eq!(relative_difficulty_weight(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(relative_difficulty_weight(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(relative_difficulty_weight(0.0, 0.0).unwrap(), 0.5);
        assert!(relative_difficulty_weight(-1.0, 1.0).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = make_toy_biased(50, 0.1, 0.0, 1).unwrap();
        let (m, log) = train_vanilla(&d, sgd(), &[4], 0, 3).unwrap();
        assert_eq!(m, Mlp::new(2, &[4], 2, 3).unwrap());
        assert!(log.is_empty());
    }

    #[test]
    fn frozen_lff_is_vanilla() {
        let d = make_toy_biased(200, 0.1, 0.1, 1).unwrap();
        let cfg = LffConfig {
            hidden: vec![8],
            sgd: sgd(),
            seed: 4,
            freeze_weights: true,
            ..LffConfig::default()
        };
        let out = train_lff(&d, &cfg, 3).unwrap();
        assert_eq!(out.model, train_vanilla(&d, sgd(), &[8], 3, 4).unwrap().0);
    }

    #[test]
    fn jtt_lambda_one_is_vanilla() {
        let d = make_toy_biased(200, 0.1, 0.1, 1).unwrap();
        let cfg = JttConfig {
            lambda_up: 1,
            hidden: vec![8],
            sgd: sgd(),
            seed: 4,
            ..JttConfig::default()
        };
        let out = train_jtt(&d, &cfg, 3).unwrap();
        assert_eq!(out.model, train_vanilla(&d, sgd(), &[8], 3, 4).unwrap().0);
    }

    #[test]
    fn error_set_of_constant_model() {
        let d = make_toy_biased(40, 0.1, 0.3, 2).unwrap();
        // Zero weights, bias favouring class 1.
        let m = Mlp::from_layers(vec![Dense::new(2, 2, vec![0.0; 4], vec![0.0, 1.0], Activation::Identity).unwrap()]).unwrap();
        let expected: Vec<usize> = (0..d.len()).filter(|&i| d.sample(i).y_given != 1).collect();
        assert_eq!(jtt_error_set(&m, &d).unwrap(), expected);
        // Ties go to class 0.
        let tie = Mlp::from_layers(vec![Dense::new(2, 2, vec![0.0; 4], vec![0.0; 2], Activation::Identity).unwrap()]).unwrap();
        let expected: Vec<usize> = (0..d.len()).filter(|&i| d.sample(i).y_given != 0).collect();
        assert_eq!(jtt_error_set(&tie, &d).unwrap(), expected);
    }

    #[test]
    fn upsampling_multiplicity_and_budget() {
        let list = upsampled_indices(5, &[1, 3], 4, 100).unwrap();
        assert_eq!(list.len(), 5 + 2 * 3);
        assert_eq!(list.iter().filter(|&&i| i == 3).count(), 4);
        assert_eq!(list.iter().filter(|&&i| i == 0).count(), 1);
        assert!(matches!(
            upsampled_indices(5, &[1, 3], usize::MAX, 1000),
            Err(Error::MemoryBudget { .. })
        ));
    }
}
