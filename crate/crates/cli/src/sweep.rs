//! `deneb sweep`: cartesian debias × denoise × seed grid. Every cell is an
//! isolated deterministic run in its own directory; cells whose manifest
//! already matches their config are skipped, so an interrupted sweep resumes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use deneb::pipeline::{DenoiserSpec, PrejudiceStrategy};
use deneb::report::RunReport;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analyze::{retention_denoiser, RetentionKind};
use crate::config::{self, Algo, DataPair, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::run::{self, manifest_path, RunManifest};

pub const AGGREGATE_COLUMNS: [&str; 7] = ["cell", "debias", "denoise", "seed", "status", "unbiased_accuracy", "error"];

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Grid file (JSON).
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, short, default_value = "sweep")]
    pub out: PathBuf,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Inline experiment object, config path or bundled preset name.
    pub base: Value,
    /// `deneb-gmm`, `deneb-gce`, `deneb` (strategy from the base), `vanilla`,
    /// `lff`, `jtt`.
    pub debias: Vec<String>,
    /// `gce`, `ce`, `coteaching`, `aum`; ignored by baseline cells.
    #[serde(default)]
    pub denoise: Vec<String>,
    /// Defaults to the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub id: String,
    pub debias: String,
    pub denoise: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Resumed,
    Failed,
}

impl CellStatus {
    fn name(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Resumed => "resumed",
            CellStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub status: CellStatus,
    pub unbiased_accuracy: Option<f64>,
    pub error: Option<String>,
}

fn denoiser_for(name: &str, configured: &DenoiserSpec) -> CliResult<DenoiserSpec> {
    let kind = match name {
        "ce" => return Ok(DenoiserSpec::Ce),
        "gce" => RetentionKind::Gce,
        "aum" => RetentionKind::Aum,
        "coteaching" => RetentionKind::Coteaching,
        other => return Err(CliError::config(format!("unknown denoiser `{other}`"))),
    };
    Ok(retention_denoiser(kind, configured))
}

/// Expands the grid against an already-overridden base.
pub fn expand(grid: &GridConfig, base: Value) -> CliResult<Vec<Cell>> {
    if grid.debias.is_empty() {
        return Err(CliError::config("grid.debias is empty"));
    }
    let base_cfg = config::from_value(base.clone())?;
    let seeds = if grid.seeds.is_empty() { vec![base_cfg.seed] } else { grid.seeds.clone() };
    let denoise = if grid.denoise.is_empty() {
        vec![base_cfg.deneb.denoiser.name().to_string()]
    } else {
        grid.denoise.clone()
    };
    let mut cells = Vec::new();
    for debias in &grid.debias {
        let (algo, strategy) = match debias.as_str() {
            "deneb" => (Algo::Deneb, None),
            "deneb-gmm" => (Algo::Deneb, Some(PrejudiceStrategy::Gmm)),
            "deneb-gce" => (Algo::Deneb, Some(PrejudiceStrategy::Gce)),
            "vanilla" => (Algo::Vanilla, None),
            "lff" => (Algo::Lff, None),
            "jtt" => (Algo::Jtt, None),
            other => return Err(CliError::config(format!("unknown debias entry `{other}`"))),
        };
        let names: Vec<&str> = if algo == Algo::Deneb {
            denoise.iter().map(String::as_str).collect()
        } else {
            vec!["none"]
        };
        for name in names {
            for &seed in &seeds {
                let mut raw = base.clone();
                config::apply_override(&mut raw, "algo", serde_json::to_value(algo).expect("serializes"))?;
                config::apply_override(&mut raw, "seed", seed.into())?;
                // The dataset follows the cell seed unless the base pins it.
                if let Some(Value::Object(ds)) = raw.get_mut("dataset") {
                    if base.pointer("/dataset/seed").is_none() {
                        ds.remove("seed");
                    }
                }
                if let Some(s) = strategy {
                    config::apply_override(&mut raw, "deneb.prejudice_strategy", serde_json::to_value(s).expect("serializes"))?;
                }
                if algo == Algo::Deneb {
                    let d = denoiser_for(name, &base_cfg.deneb.denoiser)?;
                    config::apply_override(&mut raw, "deneb.denoiser", serde_json::to_value(d).expect("serializes"))?;
                }
                cells.push(Cell {
                    id: format!("{debias}.{name}.s{seed}"),
                    debias: debias.clone(),
                    denoise: name.to_string(),
                    seed,
                    config: config::from_value(raw)?,
                });
            }
        }
    }
    Ok(cells)
}

pub fn load_grid(path: &Path) -> CliResult<GridConfig> {
    if !path.exists() {
        return Err(CliError::missing(path, "grid file not found"));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Core(e.into()))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn base_value(grid: &GridConfig, grid_path: &Path) -> CliResult<Value> {
    match &grid.base {
        Value::String(s) => {
            // Relative config paths resolve against the grid file.
            let rel = grid_path.parent().map(|d| d.join(s)).filter(|p| p.exists());
            let source = rel.map(|p| p.to_string_lossy().into_owned()).unwrap_or_else(|| s.clone());
            Ok(config::load_raw(&source)?.0)
        }
        v @ Value::Object(_) => Ok(v.clone()),
        _ => Err(CliError::config("grid.base must be an object or a config name")),
    }
}

fn completed(cell: &Cell, dir: &Path) -> Option<RunReport> {
    let run_id = format!("{}-s{}", cell.config.algo.name(), cell.seed);
    let manifest = RunManifest::load(&manifest_path(dir, &run_id)).ok()?;
    if manifest.config != cell.config.snapshot() {
        return None;
    }
    let text = std::fs::read_to_string(manifest.artifacts.get("report")?).ok()?;
    serde_json::from_str(&text).ok()
}

fn run_cell(cell: &Cell, data: &DataPair, dir: &Path) -> CliResult<f64> {
    let out = run::train(&cell.config, data)?;
    run::write_outputs(&out, data, dir, "sweep", None)?;
    run::unbiased_accuracy(&out.report).ok_or_else(|| CliError::usage("run reported no accuracy"))
}

pub fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join(&cell.id)
}

pub fn cmd_sweep(args: &SweepArgs, overrides: &[(String, Value)]) -> CliResult<Vec<CellResult>> {
    if args.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let grid = load_grid(&args.grid)?;
    let mut base = base_value(&grid, &args.grid)?;
    for (k, v) in grid.overrides.iter().map(|(k, v)| (k.as_str(), v)).chain(overrides.iter().map(|(k, v)| (k.as_str(), v))) {
        config::apply_override(&mut base, k, v.clone())?;
    }
    let cells = expand(&grid, base)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Core(e.into()))?;

    let mut results: Vec<Option<CellResult>> = vec![None; cells.len()];
    let mut pending = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match completed(cell, &cell_dir(&args.out, cell)) {
            Some(report) => {
                eprintln!("{}: already complete, skipped", cell.id);
                results[i] = Some(CellResult {
                    cell: cell.clone(),
                    status: CellStatus::Resumed,
                    unbiased_accuracy: run::unbiased_accuracy(&report),
                    error: None,
                });
            }
            None => pending.push(i),
        }
    }

    // Datasets are built once per distinct spec and shared read-only.
    let mut datasets: HashMap<String, Result<Arc<DataPair>, String>> = HashMap::new();
    for &i in &pending {
        let key = serde_json::to_string(&cells[i].config.dataset).expect("serializes");
        datasets
            .entry(key)
            .or_insert_with(|| config::materialize(&cells[i].config.dataset).map(Arc::new).map_err(|e| e.to_string()));
    }

    let next = AtomicUsize::new(0);
    let slots = Mutex::new(&mut results);
    std::thread::scope(|s| {
        for _ in 0..args.jobs.min(pending.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&i) = pending.get(k) else { break };
                let cell = &cells[i];
                let key = serde_json::to_string(&cell.config.dataset).expect("serializes");
                let outcome = match &datasets[&key] {
                    Ok(data) => run_cell(cell, data, &cell_dir(&args.out, cell)).map_err(|e| e.to_string()),
                    Err(e) => Err(e.clone()),
                };
                let result = match outcome {
                    Ok(acc) => {
                        eprintln!("{}: unbiased_accuracy={acc:.4}", cell.id);
                        CellResult {
                            cell: cell.clone(),
                            status: CellStatus::Ok,
                            unbiased_accuracy: Some(acc),
                            error: None,
                        }
                    }
                    Err(e) => {
                        eprintln!("{}: failed: {e}", cell.id);
                        CellResult {
                            cell: cell.clone(),
                            status: CellStatus::Failed,
                            unbiased_accuracy: None,
                            error: Some(e),
                        }
                    }
                };
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(result);
            });
        }
    });

    let results: Vec<CellResult> = results.into_iter().map(|r| r.expect("every cell resolved")).collect();
    write_aggregate(&results, &args.out.join("sweep.csv"))?;
    for r in &results {
        let acc = r.unbiased_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<32} {:<8} {acc}", r.cell.id, r.status.name());
    }
    let failed = results.iter().filter(|r| r.status == CellStatus::Failed).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see sweep.csv", results.len());
    }
    Ok(results)
}

pub fn write_aggregate(results: &[CellResult], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(deneb::Error::from)?;
    w.write_record(AGGREGATE_COLUMNS).map_err(deneb::Error::from)?;
    for r in results {
        w.write_record([
            r.cell.id.clone(),
            r.cell.debias.clone(),
            r.cell.denoise.clone(),
            r.cell.seed.to_string(),
            r.status.name().to_string(),
            r.unbiased_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(deneb::Error::from)?;
    }
    w.flush().map_err(|e| CliError::Core(e.into()))
}
