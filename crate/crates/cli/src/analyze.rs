//! `deneb analyze`: separation AUC, score histograms and denoiser retention
//! for a finished run, addressed by its manifest.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use deneb::analysis::{
    denoiser_retention, export_report, score_histogram_by_quadrant, separation_auc, separation_auc_aligned,
    Positive, QuadrantHistogram, ReportFormat,
};
use deneb::datasets::{load_container_with_side, Quadrant};
use deneb::pipeline::DenoiserSpec;
use deneb::report::RunReport;

use crate::config::{self, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::run::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PositiveArg {
    /// Conflicting vs aligned over all samples.
    Conflicting,
    /// Noisy vs clean within aligned samples.
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetentionKind {
    Aum,
    Coteaching,
    Gce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, clap::Args)]
pub struct AnalyzeArgs {
    /// Manifest written by `train` or `sweep`.
    pub manifest: PathBuf,
    /// Separation AUC of the entropy scores.
    #[arg(long)]
    pub auc: bool,
    #[arg(long, value_enum, default_value = "conflicting")]
    pub positive: PositiveArg,
    /// Per-quadrant entropy histogram with this many bins.
    #[arg(long)]
    pub histogram: Option<usize>,
    /// Denoiser retention experiment on the run's training set.
    #[arg(long, value_enum)]
    pub retention: Option<RetentionKind>,
    /// CE weight on conflicting samples during the retention run.
    #[arg(long, default_value_t = 1.0)]
    pub multiplier: f64,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Defaults to the run's output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// Denoiser used by `--retention`: the run's own when the kind matches,
/// otherwise a mid-grid default.
pub fn retention_denoiser(kind: RetentionKind, configured: &DenoiserSpec) -> DenoiserSpec {
    match (kind, configured) {
        (RetentionKind::Aum, d @ DenoiserSpec::Aum { .. })
        | (RetentionKind::Coteaching, d @ DenoiserSpec::Coteaching { .. })
        | (RetentionKind::Gce, d @ DenoiserSpec::Gce { .. }) => *d,
        (RetentionKind::Aum, _) => DenoiserSpec::Aum {
            percentile: 30.0,
            epochs: None,
        },
        (RetentionKind::Coteaching, _) => DenoiserSpec::Coteaching {
            forget_rate: 0.3,
            num_gradual: 5,
        },
        (RetentionKind::Gce, _) => DenoiserSpec::Gce { q: 0.7 },
    }
}

fn write_report(report: &RunReport, dir: &Path, name: &str, format: FormatArg) -> CliResult<PathBuf> {
    let (ext, fmt) = match format {
        FormatArg::Csv => ("csv", ReportFormat::Csv),
        FormatArg::Json => ("json", ReportFormat::Json),
    };
    let path = dir.join(format!("{}.{name}.{ext}", report.run_id));
    export_report(report, &path, fmt)?;
    Ok(path)
}

fn write_histogram(h: &QuadrantHistogram, path: &Path, format: FormatArg) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::Core(e.into()))?;
    match format {
        FormatArg::Json => serde_json::to_writer_pretty(file, h).map_err(deneb::Error::from)?,
        FormatArg::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["score_kind", "quadrant", "bin_lo", "bin_hi", "count"])
                .map_err(deneb::Error::from)?;
            for (q, counts) in &h.counts {
                for (b, c) in counts.iter().enumerate() {
                    w.write_record([
                        h.score_kind.clone(),
                        q.name().to_string(),
                        h.edges[b].to_string(),
                        h.edges[b + 1].to_string(),
                        c.to_string(),
                    ])
                    .map_err(deneb::Error::from)?;
                }
            }
            w.flush().map_err(|e| CliError::Core(e.into()))?;
        }
    }
    Ok(())
}

/// Returns the written files.
pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<Vec<PathBuf>> {
    if !args.auc && args.histogram.is_none() && args.retention.is_none() {
        return Err(CliError::usage("choose at least one of --auc, --histogram, --retention"));
    }
    let manifest = RunManifest::load(&args.manifest)?;
    let cfg: ExperimentConfig = config::from_value(manifest.config.clone())?;
    let dir = args.out.clone().unwrap_or_else(|| manifest.output_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Core(e.into()))?;
    let run_id = format!("{}-s{}", cfg.algo.name(), cfg.seed);
    let mut written = Vec::new();

    if args.auc || args.histogram.is_some() {
        let path = manifest.artifact("scores")?;
        if !path.exists() {
            return Err(CliError::missing(path, "score container not found"));
        }
        let (labels, side) = load_container_with_side(path)?;
        let scores = side
            .get("entropy")
            .ok_or_else(|| CliError::usage("score container has no `entropy` channel"))?;
        if args.auc {
            let mut report = RunReport::new(cfg.algo.name(), &labels, serde_json::Value::Null, cfg.seed);
            let (metric, auc) = match args.positive {
                PositiveArg::Conflicting => ("auc_conflicting", separation_auc(scores, &labels, Positive::Conflicting)?),
                PositiveArg::Noisy => (
                    "auc_noisy_within_aligned",
                    separation_auc_aligned(scores, &labels, Positive::Noisy)?,
                ),
            };
            report.push("analysis", metric, None, auc);
            written.push(write_report(&report, &dir, "auc", args.format)?);
        }
        if let Some(bins) = args.histogram {
            let h = score_histogram_by_quadrant(scores, &labels, bins, "entropy")?;
            let ext = if args.format == FormatArg::Csv { "csv" } else { "json" };
            let path = dir.join(format!("{run_id}.histogram.{ext}"));
            write_histogram(&h, &path, args.format)?;
            written.push(path);
        }
    }

    if let Some(kind) = args.retention {
        let data = config::materialize(&cfg.dataset)?;
        let denoiser = retention_denoiser(kind, &cfg.deneb.denoiser);
        let r = denoiser_retention(&data.train, &denoiser, args.multiplier, &cfg.deneb.robust())?;
        let mut report = RunReport::new(cfg.algo.name(), &data.train, serde_json::to_value(&r).expect("serializes"), cfg.seed);
        r.push_into(&mut report);
        written.push(write_report(&report, &dir, "retention", args.format)?);
        for q in Quadrant::ALL {
            if let Some(f) = r.retained_fraction(q) {
                println!("retention {} {}: {f:.4}", denoiser.name(), q.name());
            }
        }
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}
