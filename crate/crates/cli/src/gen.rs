//! `deneb gen`: dataset containers plus a manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use clap::ValueEnum;
use deneb::datasets::ToyParams;

use crate::config::{self, DatasetSpec};
use crate::error::CliResult;
use crate::run::{manifest_path, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Cmnist,
    Toy,
}

#[derive(Debug, clap::Args)]
pub struct GenArgs {
    #[arg(value_enum)]
    pub kind: GenKind,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.10)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training size: subset of MNIST-train (all when absent) or toy size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Test size: subset of MNIST-test (all when absent) or toy test size.
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Color jitter standard deviation (Colored MNIST).
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Output directory; defaults to the dataset cache under DENEB_DATA_DIR,
    /// where `train` picks the containers up.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

impl GenArgs {
    pub fn spec(&self) -> DatasetSpec {
        match self.kind {
            GenKind::Cmnist => DatasetSpec::Cmnist {
                alpha: self.alpha,
                eta: self.eta,
                train_size: self.n,
                test_size: self.test_n,
                jitter_sigma: self.jitter,
                seed: Some(self.seed),
            },
            GenKind::Toy => DatasetSpec::Toy {
                n: self.n.unwrap_or(2000),
                alpha: self.alpha,
                eta: self.eta,
                test_n: self.test_n.unwrap_or(2000),
                params: None::<ToyParams>,
                seed: Some(self.seed),
            },
        }
    }
}

pub fn cmd_gen(args: &GenArgs) -> CliResult<RunManifest> {
    let spec = args.spec();
    let stem = spec.cache_stem().expect("generated specs have a stem");
    let dir = args.out.clone().unwrap_or_else(config::cache_dir);
    std::fs::create_dir_all(&dir).map_err(|e| crate::CliError::Core(e.into()))?;

    let t = Instant::now();
    let data = config::generate(&spec)?;
    let elapsed = t.elapsed().as_secs_f64();
    let (train, test) = config::container_paths(&dir, &stem);
    config::write_atomic(&data.train, &train)?;
    config::write_atomic(&data.test, &test)?;

    let manifest = RunManifest {
        command: "gen".into(),
        config_path: None,
        config: serde_json::json!({ "dataset": spec, "quadrants": data.train.quadrant_counts() }),
        seed: args.seed,
        output_dir: dir.clone(),
        artifacts: BTreeMap::from([("train".to_string(), train), ("test".to_string(), test)]),
        timings: BTreeMap::from([("gen".to_string(), elapsed)]),
    };
    manifest.save(&manifest_path(&dir, &stem))?;
    let q = data.train.quadrant_counts();
    println!(
        "{stem}: n={} aligned_clean={} aligned_noisy={} conflicting_clean={} conflicting_noisy={} -> {}",
        data.train.len(),
        q.aligned_clean,
        q.aligned_noisy,
        q.conflicting_clean,
        q.conflicting_noisy,
        dir.display()
    );
    Ok(manifest)
}
