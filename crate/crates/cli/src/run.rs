//! One training run: dispatch on the algorithm, evaluate, write artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deneb::analysis::{evaluate_test, export_report, training_accuracy, ReportFormat};
use deneb::baselines::{baseline_report, train_jtt, train_lff, train_vanilla};
use deneb::checkpoint::save_model;
use deneb::datasets::{save_container_with_side, SideChannels};
use deneb::nnkit::Mlp;
use deneb::pipeline::run_deneb;
use deneb::report::RunReport;
use serde::{Deserialize, Serialize};

use crate::config::{Algo, DataPair, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Everything needed to reproduce a run; written last, so its presence marks
/// the run complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration; feeding it back to `train --config` replays the
    /// run bit-exactly.
    pub config: serde_json::Value,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::missing(path, "manifest not found"));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(e.into()))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, body + "\n").map_err(|e| CliError::Core(e.into()))
    }

    pub fn artifact(&self, name: &str) -> CliResult<&Path> {
        self.artifacts
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| CliError::usage(format!("run has no `{name}` artifact")))
    }
}

pub fn manifest_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.manifest.json"))
}

pub struct RunOutput {
    pub model: Mlp,
    pub report: RunReport,
    /// Per-sample vectors worth keeping next to the labels (deneb only).
    pub side: Option<SideChannels>,
}

pub fn train(cfg: &ExperimentConfig, data: &DataPair) -> CliResult<RunOutput> {
    let ds = &data.train;
    let mut side = None;
    let t = Instant::now();
    let (model, mut report) = match cfg.algo {
        Algo::Vanilla => {
            let (model, epochs) = train_vanilla(ds, cfg.sgd, &cfg.hidden, cfg.epochs, cfg.seed)?;
            let report = baseline_report("vanilla", ds, serde_json::Value::Null, cfg.seed, epochs);
            (model, report)
        }
        Algo::Lff => {
            let out = train_lff(ds, &cfg.lff, cfg.epochs)?;
            (out.model, baseline_report("lff", ds, serde_json::Value::Null, cfg.seed, out.epochs))
        }
        Algo::Jtt => {
            let out = train_jtt(ds, &cfg.jtt, cfg.epochs)?;
            let mut report = baseline_report("jtt", ds, serde_json::Value::Null, cfg.seed, out.epochs);
            report.push("jtt", "error_set_size", None, out.error_set.len() as f64);
            (out.model, report)
        }
        Algo::Deneb => {
            let out = run_deneb(ds, &cfg.deneb)?;
            side = Some(SideChannels::from([
                ("entropy".to_string(), out.scores),
                ("sampling_probability".to_string(), out.distribution.probs().to_vec()),
            ]));
            (out.model, out.report)
        }
    };
    if cfg.algo != Algo::Deneb {
        report.timing("train", t.elapsed());
        training_accuracy(&mut report, &model, ds)?;
    }
    report.config = cfg.snapshot();
    let t = Instant::now();
    evaluate_test(&mut report, &model, &data.test)?;
    report.timing("eval", t.elapsed());
    Ok(RunOutput { model, report, side })
}

/// Writes checkpoint, report JSON, metrics CSV, the optional side-channel
/// container and finally the manifest.
pub fn write_outputs(
    out: &RunOutput,
    data: &DataPair,
    dir: &Path,
    command: &str,
    config_path: Option<&Path>,
) -> CliResult<RunManifest> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(e.into()))?;
    let id = &out.report.run_id;
    let mut artifacts = BTreeMap::new();

    let checkpoint = dir.join(format!("{id}.model.dnebmd"));
    let meta = serde_json::json!({"run_id": id, "algo": out.report.algo, "seed": out.report.seed});
    save_model(&out.model, &meta, &checkpoint)?;
    artifacts.insert("checkpoint".into(), checkpoint);

    let report = dir.join(format!("{id}.report.json"));
    export_report(&out.report, &report, ReportFormat::Json)?;
    artifacts.insert("report".into(), report);

    let csv = dir.join(format!("{id}.metrics.csv"));
    export_report(&out.report, &csv, ReportFormat::Csv)?;
    artifacts.insert("metrics".into(), csv);

    if let Some(side) = &out.side {
        let scores = dir.join(format!("{id}.scores.dnebds"));
        save_container_with_side(&data.train.labels_only(), side, &scores)?;
        artifacts.insert("scores".into(), scores);
    }

    let manifest = RunManifest {
        command: command.into(),
        config_path: config_path.map(Path::to_path_buf),
        config: out.report.config.clone(),
        seed: out.report.seed,
        output_dir: dir.to_path_buf(),
        artifacts,
        timings: out.report.timings.clone(),
    };
    manifest.save(&manifest_path(dir, id))?;
    Ok(manifest)
}

pub fn unbiased_accuracy(report: &RunReport) -> Option<f64> {
    report.metric("eval", "unbiased_accuracy", None)
}
