//! Config files, persistence and the operations behind the `gtaseg`
//! command line.

mod bytes;
pub mod checkpoint;
pub mod dataset;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{self, DatasetSplit, IouReport};
use crate::trainer::ablation::{self, Axes, GridResult};
use crate::trainer::{evaluate, train_run, FinalSummary, TrainConfig, TrainOutcome};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use dataset::{decode_dataset, encode_dataset, load_dataset, save_dataset};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// 1-based line on which `key = ...` is assigned, if it is.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|line| {
        line.trim_start()
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// Parse and validate a TOML training config. Every error names the line
/// it comes from when there is one.
pub fn parse_config(text: &str, origin: &str) -> Result<TrainConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {e}")))?;
    if !table.contains_key("method") {
        return Err(Error::Config(format!("{origin}: missing required key `method`")));
    }
    let config: TrainConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    config.validate().map_err(|e| {
        let msg = e.to_string();
        let line = msg
            .split('`')
            .nth(1)
            .and_then(|key| key_line(text, key))
            .map(|l| format!(":{l}"))
            .unwrap_or_default();
        Error::Config(format!("{origin}{line}: {msg}"))
    })?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

/// The split a config trains on: loaded from `dataset` if set, otherwise
/// generated from the data keys.
pub fn prepare_dataset(config: &TrainConfig) -> Result<DatasetSplit> {
    match &config.dataset {
        Some(path) => load_dataset(path),
        None => {
            let samples = synthdata::generate(config.data_seed, config.n_samples, config.classes, config.image_size)?;
            synthdata::split(samples, config.classes, config.n_labeled, config.n_heldout, config.data_seed)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seeds: Vec<u64>,
    pub metrics_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub summary: FinalSummary,
}

impl RunManifest {
    pub fn artifacts(&self) -> impl Iterator<Item = &PathBuf> {
        std::iter::once(&self.metrics_csv).chain(&self.checkpoints)
    }
}

/// Write metrics, checkpoints and a manifest for one finished run.
fn write_run(outcome: &TrainOutcome, out_dir: &Path) -> Result<RunManifest> {
    create_dir(out_dir)?;
    let metrics_csv = out_dir.join("metrics.csv");
    write(&metrics_csv, outcome.report.to_csv())?;
    let mut checkpoints = Vec::new();
    for (kind, params) in outcome.live_models() {
        let path = out_dir.join(format!("{}.gtas", kind.as_str()));
        save_checkpoint(params, &path)?;
        checkpoints.push(path);
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config: outcome.report.config.clone(),
        started_unix: unix_now().saturating_sub(outcome.elapsed.as_secs()),
        finished_unix: unix_now(),
        seeds: vec![outcome.report.seed],
        metrics_csv,
        checkpoints,
        summary: outcome.report.summary.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Train one configuration and write its artifacts under `out_dir`.
pub fn cli_run(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let mut config = load_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let split = prepare_dataset(&config)?;
    let outcome = train_run(&split, &config)?;
    let manifest = write_run(&outcome, out_dir)?;
    info!("final mIoU {:.4}", manifest.summary.final_miou);
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationManifest {
    pub tool_version: String,
    pub axes: String,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub summary_csv: PathBuf,
    pub rows: Vec<PathBuf>,
}

/// Run a grid of configurations, one sub-directory per row, plus a
/// seed-averaged `summary.csv`.
pub fn cli_ablate(
    config_path: &Path,
    axes_spec: &str,
    out_dir: &Path,
    seeds: &[u64],
    jobs: usize,
) -> Result<(AblationManifest, Vec<GridResult>)> {
    let started = unix_now();
    let base = load_config(config_path)?;
    let axes = Axes::parse(axes_spec)?;
    let rows = ablation::expand(&base, &axes)?;
    create_dir(out_dir)?;
    let row_dir = |i: usize| out_dir.join(format!("row{i:02}"));
    for (i, row) in rows.iter().enumerate() {
        create_dir(&row_dir(i))?;
        write(&row_dir(i).join("config.toml"), row.config.to_toml())?;
    }
    let results = ablation::ablation_grid(rows, seeds, jobs, prepare_dataset, |i, row, outcome| {
        let dir = row_dir(i).join(format!("seed{}", outcome.report.seed));
        info!("row {i} ({}) seed {}: final mIoU {:.4}", row.label, outcome.report.seed, outcome.report.summary.final_miou);
        write_run(outcome, &dir).map(|_| ())
    })?;
    let summary_csv = out_dir.join("summary.csv");
    write(&summary_csv, ablation::summary_csv(&results))?;
    let manifest = AblationManifest {
        tool_version: TOOL_VERSION.to_string(),
        axes: axes_spec.to_string(),
        seeds: seeds.to_vec(),
        started_unix: started,
        finished_unix: unix_now(),
        summary_csv,
        rows: (0..results.len()).map(row_dir).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out_dir.join("manifest.json"), json)?;
    Ok((manifest, results))
}

/// mIoU of a checkpoint on the held-out section of a dataset file.
pub fn cli_eval(checkpoint: &Path, data: &Path) -> Result<IouReport> {
    let params = load_checkpoint(checkpoint)?;
    let split = load_dataset(data)?;
    evaluate(&params, &split.heldout, split.classes)
}

/// Generate the dataset a config describes and save it.
pub fn cli_gen_data(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<DatasetSplit> {
    let mut config = load_config(config_path)?;
    config.dataset = None;
    if let Some(s) = seed {
        config.data_seed = s;
    }
    let split = prepare_dataset(&config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(&split, out)?;
    Ok(split)
}
