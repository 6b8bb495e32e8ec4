//! Command-line front end: dataset generation, training runs, diagnostics
//! and debias × denoise sweeps, configured by JSON files with dotted-path
//! flag overrides (`--deneb.tau 2.0`).

pub mod analyze;
pub mod config;
pub mod error;
pub mod gen;
pub mod run;
pub mod sweep;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::Value;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "deneb", version, about = "Debiasing with noisy labels: generate data, train, analyze, sweep")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a biased, noisy dataset container pair plus manifest.
    Gen(gen::GenArgs),
    /// Train one model and write checkpoint, report and metrics.
    Train(TrainArgs),
    /// Diagnostics on a finished run.
    Analyze(analyze::AnalyzeArgs),
    /// Run a debias × denoise × seed grid.
    Sweep(sweep::SweepArgs),
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Config file, bundled preset name, or run manifest.
    #[arg(long, short)]
    pub config: Option<String>,
    #[arg(long, value_enum)]
    pub algo: Option<config::Algo>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs of the selected algorithm (robust epochs for deneb).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, short, default_value = "runs")]
    pub out: PathBuf,
}

/// Applies config source, flag shortcuts and dotted overrides, in that order.
pub fn build_config(
    source: Option<&str>,
    algo: Option<config::Algo>,
    seed: Option<u64>,
    epochs: Option<usize>,
    overrides: &[(String, Value)],
) -> CliResult<(config::ExperimentConfig, Option<PathBuf>)> {
    let (mut raw, path) = match source {
        Some(s) => config::load_raw(s)?,
        None => (Value::Object(Default::default()), None),
    };
    if let Some(a) = algo {
        config::apply_override(&mut raw, "algo", serde_json::to_value(a).expect("algo serializes"))?;
    }
    if let Some(s) = seed {
        config::apply_override(&mut raw, "seed", s.into())?;
    }
    if let Some(e) = epochs {
        let chosen = raw.get("algo").and_then(Value::as_str).unwrap_or("deneb");
        let key = if chosen == "deneb" { "deneb.robust_epochs" } else { "epochs" };
        config::apply_override(&mut raw, key, e.into())?;
    }
    for (k, v) in overrides {
        config::apply_override(&mut raw, k, v.clone())?;
    }
    Ok((config::from_value(raw)?, path))
}

pub fn cmd_train(args: &TrainArgs, overrides: &[(String, Value)]) -> CliResult<run::RunManifest> {
    let (cfg, path) = build_config(args.config.as_deref(), args.algo, args.seed, args.epochs, overrides)?;
    let data = config::materialize(&cfg.dataset)?;
    let out = run::train(&cfg, &data)?;
    let manifest = run::write_outputs(&out, &data, &args.out, "train", path.as_deref())?;
    match run::unbiased_accuracy(&out.report) {
        Some(acc) => println!("{} unbiased_accuracy={acc:.4} -> {}", out.report.run_id, args.out.display()),
        None => println!("{} -> {}", out.report.run_id, args.out.display()),
    }
    Ok(manifest)
}

/// Entry point shared by the binary and the tests. `args` excludes the
/// program name.
pub fn run_cli(args: Vec<String>) -> CliResult<()> {
    let (rest, overrides) = config::extract_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("deneb".to_string()).chain(rest)).map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            std::process::exit(0);
        }
        CliError::usage(e.to_string().trim_end())
    })?;
    let takes_overrides = matches!(cli.command, Command::Train(_) | Command::Sweep(_));
    if !takes_overrides && !overrides.is_empty() {
        return Err(CliError::usage("dotted overrides apply to train and sweep only"));
    }
    match cli.command {
        Command::Gen(a) => gen::cmd_gen(&a).map(drop),
        Command::Train(a) => cmd_train(&a, &overrides).map(drop),
        Command::Analyze(a) => analyze::cmd_analyze(&a).map(drop),
        Command::Sweep(a) => sweep::cmd_sweep(&a, &overrides).map(drop),
    }
}
