//! Cross-product and preset experiment grids over [`TrainConfig`] fields.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::synthdata::DatasetSplit;

use super::config::TrainConfig;
use super::report::RunReport;
use super::{train_run, TrainOutcome};

/// Named grids mirroring the published ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// SupOnly / mean teacher / + assistant / + re-weighting.
    Component,
    /// All-parameter vs extractor-only transfer.
    EmaScope,
    /// Which data the assistant and the student learn from.
    Design,
    /// Confidence re-weighting with and without smoothing.
    Reweight,
    Alpha,
    Warmup,
    /// Extractor/predictor boundary at every layer.
    Boundary,
    /// A single full run; the report carries all three models.
    ThreeModel,
}

impl Preset {
    pub const ALL: [(&'static str, Preset); 8] = [
        ("component", Preset::Component),
        ("ema-scope", Preset::EmaScope),
        ("design", Preset::Design),
        ("reweight", Preset::Reweight),
        ("alpha", Preset::Alpha),
        ("warmup", Preset::Warmup),
        ("boundary", Preset::Boundary),
        ("three-model", Preset::ThreeModel),
    ];

    pub fn from_name(name: &str) -> Option<Preset> {
        Self::ALL.iter().find(|(n, _)| *n == name).map(|&(_, p)| p)
    }

    fn rows(self, base: &TrainConfig) -> Vec<Vec<(&'static str, &'static str)>> {
        match self {
            Preset::Component => vec![
                vec![("method", "SUPONLY")],
                vec![("method", "MEAN_TEACHER")],
                vec![("method", "GTA"), ("reweight_enabled", "false")],
                vec![("method", "GTA"), ("reweight_enabled", "true"), ("laplace_enabled", "true")],
            ],
            Preset::EmaScope => vec![
                vec![("method", "GTA"), ("ema_scope", "ALL"), ("reweight_enabled", "false")],
                vec![("method", "GTA"), ("ema_scope", "EXTRACTOR"), ("reweight_enabled", "false")],
            ],
            Preset::Design => vec![
                vec![("method", "GTA"), ("gta_data", "LABELED"), ("student_data", "PSEUDO")],
                vec![("method", "GTA"), ("gta_data", "BOTH"), ("student_data", "LABELED")],
                vec![("method", "GTA"), ("gta_data", "PSEUDO"), ("student_data", "LABELED")],
            ],
            Preset::Reweight => vec![
                vec![("method", "GTA"), ("reweight_enabled", "false"), ("laplace_enabled", "false")],
                vec![("method", "GTA"), ("reweight_enabled", "true"), ("laplace_enabled", "false")],
                vec![("method", "GTA"), ("reweight_enabled", "true"), ("laplace_enabled", "true")],
            ],
            Preset::Alpha => ["0.99", "0.999", "0.9999"]
                .into_iter()
                .map(|a| vec![("method", "GTA"), ("alpha", a)])
                .collect(),
            Preset::Warmup => ["1", "2", "3"]
                .into_iter()
                .map(|w| vec![("method", "GTA"), ("warmup_epochs", w)])
                .collect(),
            Preset::Boundary => {
                const B: [&str; 8] = ["1", "2", "3", "4", "5", "6", "7", "8"];
                B.iter()
                    .take(base.hidden.len() + 1)
                    .map(|b| vec![("method", "GTA"), ("partition_boundary", *b)])
                    .collect()
            }
            Preset::ThreeModel => vec![vec![("method", "GTA")]],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Axes {
    Preset(Preset),
    /// Full cross product of the listed axes.
    Cross(Vec<Axis>),
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Axes {
    /// Either a preset name or `key=v1,v2;key2=v3,...`.
    pub fn parse(spec: &str) -> Result<Axes> {
        let spec = spec.trim();
        if let Some(p) = Preset::from_name(spec) {
            return Ok(Axes::Preset(p));
        }
        let mut axes = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part.split_once('=').ok_or_else(|| {
                let presets: Vec<&str> = Preset::ALL.iter().map(|(n, _)| *n).collect();
                Error::Config(format!(
                    "axis `{part}` is neither `key=v1,v2` nor a preset ({})",
                    presets.join(", ")
                ))
            })?;
            let values: Vec<toml::Value> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(parse_value)
                .collect();
            if values.is_empty() {
                return Err(Error::Config(format!("axis `{key}` lists no values")));
            }
            axes.push(Axis {
                key: key.trim().to_string(),
                values,
            });
        }
        if axes.is_empty() {
            return Err(Error::Config("no ablation axes given".into()));
        }
        Ok(Axes::Cross(axes))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub config: TrainConfig,
}

const GTA_ONLY: [&str; 4] = ["ema_scope", "gta_data", "student_data", "alpha_transmission"];

fn apply(base: &toml::Table, overrides: &[(String, toml::Value)], strip_gta_only: bool) -> Result<(String, TrainConfig)> {
    let mut table = base.clone();
    let label = overrides
        .iter()
        .map(|(k, v)| match v {
            toml::Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect::<Vec<_>>()
        .join(" ");
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    let is_gta = table.get("method").and_then(toml::Value::as_str) == Some("GTA");
    if strip_gta_only && !is_gta {
        for k in GTA_ONLY {
            table.remove(k);
        }
    }
    let config = TrainConfig::deserialize(table)
        .map_err(|e| Error::Config(format!("grid row `{label}`: {}", e.message())))?;
    config
        .validate()
        .map_err(|e| Error::Config(format!("grid row `{label}`: {e}")))?;
    Ok((label, config))
}

/// Expand `axes` against `base` into validated configurations. Any
/// incompatible combination fails the whole grid before anything runs.
pub fn expand(base: &TrainConfig, axes: &Axes) -> Result<Vec<GridRow>> {
    let table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let (combos, strip): (Vec<Vec<(String, toml::Value)>>, bool) = match axes {
        Axes::Preset(p) => (
            p.rows(base)
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|(k, v)| (k.to_string(), parse_value(v)))
                        .collect()
                })
                .collect(),
            true,
        ),
        Axes::Cross(list) => {
            let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
            for axis in list {
                combos = combos
                    .into_iter()
                    .flat_map(|prefix| {
                        axis.values.iter().map(move |v| {
                            let mut next = prefix.clone();
                            next.push((axis.key.clone(), v.clone()));
                            next
                        })
                    })
                    .collect();
            }
            (combos, false)
        }
    };
    combos
        .iter()
        .map(|o| apply(&table, o, strip).map(|(label, config)| GridRow { label, config }))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub row: GridRow,
    /// One report per seed, in seed order.
    pub reports: Vec<RunReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl GridResult {
    pub fn mean_final(&self) -> f64 {
        mean(self.reports.iter().map(|r| r.summary.final_miou)).unwrap_or(0.0)
    }

    pub fn mean_teacher(&self) -> Option<f64> {
        mean(self.reports.iter().filter_map(|r| r.summary.teacher_miou))
    }

    pub fn mean_student(&self) -> Option<f64> {
        mean(self.reports.iter().map(|r| r.summary.student_miou))
    }

    pub fn mean_gta(&self) -> Option<f64> {
        mean(self.reports.iter().filter_map(|r| r.summary.gta_miou))
    }
}

pub const SUMMARY_HEADER: &str = "row,label,seeds,final_miou,teacher_miou,student_miou,gta_miou";

/// Seed-averaged final mIoU per grid row.
pub fn summary_csv(results: &[GridResult]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = format!("{SUMMARY_HEADER}\n");
    for (i, r) in results.iter().enumerate() {
        let seeds: Vec<String> = r.reports.iter().map(|rep| rep.seed.to_string()).collect();
        writeln!(
            out,
            "{i},\"{}\",{},{:.6},{},{},{}",
            r.row.label,
            seeds.join(" "),
            r.mean_final(),
            fmt(r.mean_teacher()),
            fmt(r.mean_student()),
            fmt(r.mean_gta()),
        )
        .expect("write to string");
    }
    out
}

/// Run every row of the grid once per seed. `data` supplies the split for a
/// configuration; `on_run` sees each finished run (row index, seed) before
/// its models are dropped. With `jobs > 1` runs execute on a fixed pool of
/// worker threads; results are ordered as if run sequentially.
pub fn ablation_grid<D, F>(
    rows: Vec<GridRow>,
    seeds: &[u64],
    jobs: usize,
    data: D,
    on_run: F,
) -> Result<Vec<GridResult>>
where
    D: Fn(&TrainConfig) -> Result<DatasetSplit> + Sync,
    F: Fn(usize, &GridRow, &TrainOutcome) -> Result<()> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let tasks: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
        .collect();
    let slots: Mutex<Vec<Option<Result<RunReport>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);

    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(r, s)) = tasks.get(i) else { break };
        let row = &rows[r];
        let mut config = row.config.clone();
        config.seed = seeds[s];
        let result = data(&config)
            .and_then(|split| train_run(&split, &config))
            .and_then(|outcome| on_run(r, row, &outcome).map(|_| outcome.report));
        slots.lock().expect("no poisoned workers")[i] = Some(result);
    };
    if jobs <= 1 {
        worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(tasks.len()) {
                scope.spawn(worker);
            }
        });
    }

    let mut slots = slots.into_inner().expect("no poisoned workers").into_iter();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut reports = Vec::with_capacity(seeds.len());
        for _ in seeds {
            reports.push(slots.next().flatten().expect("every task ran")?);
        }
        out.push(GridResult { row, reports });
    }
    Ok(out)
}
