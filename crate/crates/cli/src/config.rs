//! Experiment configuration: JSON files (or bundled presets) with dotted-path
//! overrides, resolved into a self-contained snapshot.

use std::path::{Path, PathBuf};

use deneb::baselines::{JttConfig, LffConfig};
use deneb::datasets::{
    flip_labels, inject_color_bias, load_container, load_mnist, make_toy_biased_with, make_unbiased_test,
    save_container, ColorTable, LabeledDataset, MnistSplit, ToyParams,
};
use deneb::nnkit::SgdConfig;
use deneb::pipeline::DenebConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const DATA_DIR_ENV: &str = "DENEB_DATA_DIR";

pub const PRESETS: [(&str, &str); 3] = [
    ("cmnist_1_10", include_str!("../presets/cmnist_1_10.json")),
    ("cmnist_5_50", include_str!("../presets/cmnist_5_50.json")),
    ("toy_fast", include_str!("../presets/toy_fast.json")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Vanilla,
    Deneb,
    Jtt,
    Lff,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Vanilla => "vanilla",
            Algo::Deneb => "deneb",
            Algo::Jtt => "jtt",
            Algo::Lff => "lff",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Cmnist {
        alpha: f64,
        eta: f64,
        /// Random subset of MNIST-train; the full split when absent.
        #[serde(default)]
        train_size: Option<usize>,
        #[serde(default)]
        test_size: Option<usize>,
        #[serde(default)]
        jitter_sigma: Option<f64>,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Toy {
        n: usize,
        alpha: f64,
        eta: f64,
        #[serde(default = "default_toy_test")]
        test_n: usize,
        #[serde(default)]
        params: Option<ToyParams>,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Pre-generated containers.
    Files { train: PathBuf, test: PathBuf },
}

fn default_toy_test() -> usize {
    2000
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Toy {
            n: 2000,
            alpha: 0.05,
            eta: 0.2,
            test_n: default_toy_test(),
            params: None,
            seed: None,
        }
    }
}

impl DatasetSpec {
    fn fill_seed(&mut self, run_seed: u64) {
        match self {
            DatasetSpec::Cmnist { seed, .. } | DatasetSpec::Toy { seed, .. } => {
                seed.get_or_insert(run_seed);
            }
            DatasetSpec::Files { .. } => {}
        }
    }

    /// Stable file stem naming the generated data, or `None` for file inputs.
    pub fn cache_stem(&self) -> Option<String> {
        match self {
            DatasetSpec::Cmnist {
                alpha,
                eta,
                train_size,
                test_size,
                jitter_sigma,
                seed,
            } => {
                let mut s = format!("cmnist-a{alpha}-e{eta}-s{}", seed.unwrap_or(0));
                if let Some(n) = train_size {
                    s += &format!("-n{n}");
                }
                if let Some(n) = test_size {
                    s += &format!("-t{n}");
                }
                if let Some(j) = jitter_sigma {
                    s += &format!("-j{j}");
                }
                Some(s)
            }
            DatasetSpec::Toy {
                n,
                alpha,
                eta,
                test_n,
                params,
                seed,
            } => {
                let mut s = format!("toy-a{alpha}-e{eta}-s{}-n{n}-t{test_n}", seed.unwrap_or(0));
                if let Some(p) = params {
                    s += &format!(
                        "-p{}_{}_{}_{}",
                        p.target_shift, p.target_sd, p.bias_shift, p.bias_sd
                    );
                }
                Some(s)
            }
            DatasetSpec::Files { .. } => None,
        }
    }
}

/// Training and unbiased evaluation data of one run.
#[derive(Debug, Clone)]
pub struct DataPair {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

pub fn cache_dir() -> PathBuf {
    data_dir().join("cache")
}

fn missing_aware(e: deneb::Error) -> CliError {
    match e {
        deneb::Error::File { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::missing(path, "not found (set DENEB_DATA_DIR to the directory holding MNIST)")
        }
        e => e.into(),
    }
}

/// Generates the data of `spec` (seed already filled) from scratch.
pub fn generate(spec: &DatasetSpec) -> CliResult<DataPair> {
    match spec {
        DatasetSpec::Cmnist {
            alpha,
            eta,
            train_size,
            test_size,
            jitter_sigma,
            seed,
        } => {
            let seed = seed.unwrap_or(0);
            let colors = match jitter_sigma {
                Some(j) => ColorTable::cmnist_with_jitter(*j)?,
                None => ColorTable::cmnist(),
            };
            let dir = data_dir();
            let mut train = load_mnist(&dir, MnistSplit::Train).map_err(missing_aware)?;
            if let Some(n) = train_size {
                train = train.random_subset(*n, seed)?;
            }
            let train = flip_labels(inject_color_bias(&train, *alpha, &colors, seed)?, *eta, seed)?;
            let mut test = load_mnist(&dir, MnistSplit::Test).map_err(missing_aware)?;
            if let Some(n) = test_size {
                test = test.random_subset(*n, seed)?;
            }
            let test = make_unbiased_test(&test, &colors, seed)?;
            Ok(DataPair { train, test })
        }
        DatasetSpec::Toy {
            n,
            alpha,
            eta,
            test_n,
            params,
            seed,
        } => {
            let seed = seed.unwrap_or(0);
            let p = params.unwrap_or_default();
            let train = make_toy_biased_with(*n, *alpha, *eta, seed, p)?;
            // Test draws must not replay the training noise.
            let test = make_toy_biased_with(*test_n, 0.5, 0.0, seed.wrapping_add(1), p)?;
            Ok(DataPair { train, test })
        }
        DatasetSpec::Files { train, test } => {
            let load = |p: &Path| {
                if !p.exists() {
                    return Err(CliError::missing(p, "dataset container not found"));
                }
                Ok(load_container(p)?)
            };
            Ok(DataPair {
                train: load(train)?,
                test: load(test)?,
            })
        }
    }
}

pub fn container_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.train.dnebds")),
        dir.join(format!("{stem}.test.dnebds")),
    )
}

/// Loads from the cache under `DENEB_DATA_DIR`, generating and storing on a
/// miss. An unwritable cache only costs regeneration next time.
pub fn materialize(spec: &DatasetSpec) -> CliResult<DataPair> {
    let Some(stem) = spec.cache_stem() else {
        return generate(spec);
    };
    let dir = cache_dir();
    let (train_path, test_path) = container_paths(&dir, &stem);
    if train_path.exists() && test_path.exists() {
        if let (Ok(train), Ok(test)) = (load_container(&train_path), load_container(&test_path)) {
            return Ok(DataPair { train, test });
        }
    }
    let data = generate(spec)?;
    if std::fs::create_dir_all(&dir).is_ok() {
        let _ = write_atomic(&data.train, &train_path);
        let _ = write_atomic(&data.test, &test_path);
    }
    Ok(data)
}

/// Writes through a unique temporary name so concurrent writers never expose
/// a partial file.
pub fn write_atomic(ds: &LabeledDataset, path: &Path) -> CliResult<()> {
    let tmp = path.with_extension(format!("tmp{}-{:?}", std::process::id(), std::thread::current().id()));
    save_container(ds, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CliError::Core(e.into())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub algo: Algo,
    /// Single source of randomness; copied into every sub-config.
    pub seed: u64,
    /// Hidden widths shared by every model of the run.
    pub hidden: Vec<usize>,
    /// Training epochs of vanilla, LfF and the final JTT stage.
    pub epochs: usize,
    /// Optimizer of vanilla training.
    pub sgd: SgdConfig,
    pub deneb: DenebConfig,
    pub lff: LffConfig,
    pub jtt: JttConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            algo: Algo::Deneb,
            seed: 0,
            hidden: vec![256, 128],
            epochs: 30,
            sgd: SgdConfig::default(),
            deneb: DenebConfig::default(),
            lff: LffConfig::default(),
            jtt: JttConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Propagates the shared fields and validates every section.
    pub fn resolve(mut self) -> CliResult<Self> {
        self.dataset.fill_seed(self.seed);
        self.deneb.seed = self.seed;
        self.deneb.hidden = self.hidden.clone();
        self.lff.seed = self.seed;
        self.lff.hidden = self.hidden.clone();
        self.jtt.seed = self.seed;
        self.jtt.hidden = self.hidden.clone();
        self.sgd.validate()?;
        self.deneb.validate()?;
        self.lff.validate()?;
        self.jtt.validate()?;
        Ok(self)
    }

    pub fn snapshot(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Sets `path` (dot-separated) inside `root`, creating objects on the way.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> CliResult<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::usage(format!("malformed override path `{path}`")));
    }
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        let Value::Object(map) = cur else {
            return Err(CliError::config(format!("`{path}`: `{key}` is not inside an object")));
        };
        if parts.peek().is_none() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}

/// JSON literal when it parses as one, otherwise a plain string.
pub fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// A dotted config path and its JSON value.
pub type Override = (String, Value);

/// Splits `--a.b value` / `--a.b=value` pairs out of `args`. Flag names
/// containing a dot are never declared by the parser, so the split is
/// unambiguous.
pub fn extract_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::usage(format!("override --{flag} needs a value")))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, parse_override_value(&raw)));
    }
    Ok((rest, overrides))
}

/// Raw JSON of a config file, a bundled preset name, or a run manifest (whose
/// snapshot is returned).
pub fn load_raw(source: &str) -> CliResult<(Value, Option<PathBuf>)> {
    let path = Path::new(source);
    let text = if path.exists() {
        std::fs::read_to_string(path).map_err(|e| CliError::Core(deneb::Error::Io(e)))?
    } else if let Some((_, body)) = PRESETS
        .iter()
        .find(|(name, _)| *name == source || format!("{name}.json") == source)
    {
        return Ok((serde_json::from_str(body).expect("bundled preset is valid JSON"), None));
    } else {
        return Err(CliError::missing(path, "config file not found and not a bundled preset"));
    };
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if value.get("command").is_some() {
        if let Some(cfg) = value.get_mut("config") {
            value = cfg.take();
        }
    }
    Ok((value, Some(path.to_path_buf())))
}

pub fn from_value(value: Value) -> CliResult<ExperimentConfig> {
    serde_json::from_value::<ExperimentConfig>(value).map_err(CliError::config)?.resolve()
}
