//! Serializable record of one training run.
//!
//! The CSV view has the fixed columns `run_id, stage, metric, quadrant,
//! value`. Quadrant-free rows use `all`. Wall-clock timings appear only in the
//! JSON view, so the CSV of a run is a pure function of config, seed and data.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, Quadrant, QuadrantCounts};
use crate::error::Result;
use crate::pipeline::SplitSummary;
use crate::train::EpochRecord;

pub const CSV_COLUMNS: [&str; 5] = ["run_id", "stage", "metric", "quadrant", "value"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub class_count: usize,
    pub conflict_ratio: f64,
    pub noisy_fraction: f64,
    pub quadrants: QuadrantCounts,
}

impl DatasetSummary {
    pub fn of(dataset: &LabeledDataset) -> Self {
        Self {
            n: dataset.len(),
            class_count: dataset.class_count(),
            conflict_ratio: dataset.conflict_ratio(),
            noisy_fraction: dataset.noisy_fraction(),
            quadrants: dataset.quadrant_counts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: String,
    pub metric: String,
    pub quadrant: Option<Quadrant>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub algo: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub dataset: DatasetSummary,
    pub epochs: Vec<EpochRecord>,
    #[serde(default)]
    pub splits: Vec<SplitSummary>,
    pub metrics: Vec<MetricRow>,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// One CSV record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub stage: String,
    pub metric: String,
    pub quadrant: String,
    pub value: f64,
}

impl RunReport {
    pub fn new(algo: &str, dataset: &LabeledDataset, config: serde_json::Value, seed: u64) -> Self {
        Self {
            run_id: format!("{algo}-s{seed}"),
            algo: algo.into(),
            seed,
            config,
            dataset: DatasetSummary::of(dataset),
            ..Self::default()
        }
    }

    pub fn push(&mut self, stage: &str, metric: &str, quadrant: Option<Quadrant>, value: f64) {
        self.metrics.push(MetricRow {
            stage: stage.into(),
            metric: metric.into(),
            quadrant,
            value,
        });
    }

    pub fn timing(&mut self, stage: &str, elapsed: Duration) {
        *self.timings.entry(stage.into()).or_default() += elapsed.as_secs_f64();
    }

    /// Last value recorded under `(stage, metric, quadrant)`.
    pub fn metric(&self, stage: &str, metric: &str, quadrant: Option<Quadrant>) -> Option<f64> {
        self.metrics
            .iter()
            .rev()
            .find(|m| m.stage == stage && m.metric == metric && m.quadrant == quadrant)
            .map(|m| m.value)
    }

    /// Epoch losses followed by every metric, in recording order.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let row = |stage: &str, metric: String, quadrant: Option<Quadrant>, value: f64| CsvRow {
            run_id: self.run_id.clone(),
            stage: stage.into(),
            metric,
            quadrant: quadrant.map_or("all", Quadrant::name).into(),
            value,
        };
        let mut out = Vec::with_capacity(self.epochs.len() + self.metrics.len());
        for e in &self.epochs {
            out.push(row(&e.stage, format!("loss_epoch_{}", e.epoch), None, e.mean_loss));
        }
        for m in &self.metrics {
            out.push(row(&m.stage, m.metric.clone(), m.quadrant, m.value));
        }
        out
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        csv.write_record(CSV_COLUMNS)?;
        for r in self.csv_rows() {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_header_only() {
        let mut buf = Vec::new();
        RunReport::default().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "run_id,stage,metric,quadrant,value\n");
    }

    #[test]
    fn rows_carry_quadrant_names() {
        let mut r = RunReport {
            run_id: "x".into(),
            ..RunReport::default()
        };
        r.push("eval", "accuracy", Some(Quadrant::ConflictingNoisy), 0.25);
        r.push("eval", "accuracy", None, 0.5);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("x,eval,accuracy,conflicting_noisy,0.25\n"));
        assert!(text.ends_with("x,eval,accuracy,all,0.5\n"));
        assert_eq!(r.metric("eval", "accuracy", None), Some(0.5));
    }
}
