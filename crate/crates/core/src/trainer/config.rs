use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{ReweightConfig, ThresholdRule};
use crate::segmodel::SegNetConfig;
use crate::transmission::EmaScope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SUPONLY")]
    SupOnly,
    #[serde(rename = "MEAN_TEACHER")]
    MeanTeacher,
    #[serde(rename = "GTA")]
    Gta,
}

/// Data the teaching assistant learns from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GtaData {
    Pseudo,
    Labeled,
    Both,
}

/// Data the student learns from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StudentData {
    Labeled,
    Pseudo,
}

/// Scope of the assistant-to-student transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScopeName {
    All,
    Extractor,
    Predictor,
}

impl From<ScopeName> for EmaScope {
    fn from(s: ScopeName) -> Self {
        match s {
            ScopeName::All => EmaScope::All,
            ScopeName::Extractor => EmaScope::Extractor,
            ScopeName::Predictor => EmaScope::Predictor,
        }
    }
}

/// Complete description of one training run. Field names are the keys of
/// the TOML config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// GTA only; defaults to `PSEUDO`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gta_data: Option<GtaData>,
    /// GTA only; defaults to `LABELED`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_data: Option<StudentData>,
    /// GTA only; defaults to `EXTRACTOR`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_scope: Option<ScopeName>,
    pub alpha: f32,
    /// Separate α for the assistant-to-student transfer; defaults to `alpha`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_transmission: Option<f32>,
    pub tau: f32,
    pub quantile: f32,
    /// Use a constant confidence threshold instead of the quantile rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_gamma: Option<f32>,
    pub mu: f32,
    pub reweight_enabled: bool,
    pub laplace_enabled: bool,
    pub lr_init: f32,
    pub weight_decay: f32,
    pub lr_power: f32,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,

    pub data_seed: u64,
    pub classes: usize,
    pub image_size: usize,
    pub n_samples: usize,
    pub n_labeled: usize,
    pub n_heldout: usize,
    /// Load this dataset file instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,

    pub hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_boundary: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Gta,
            gta_data: None,
            student_data: None,
            ema_scope: None,
            alpha: 0.99,
            alpha_transmission: None,
            tau: 1.0,
            quantile: 0.2,
            fixed_gamma: None,
            mu: 1.0,
            reweight_enabled: true,
            laplace_enabled: true,
            lr_init: 0.05,
            weight_decay: 1e-4,
            lr_power: 0.9,
            epochs: 30,
            warmup_epochs: 1,
            batch_labeled: 4,
            batch_unlabeled: 16,
            seed: 0,
            data_seed: 0,
            classes: 4,
            image_size: 32,
            n_samples: 600,
            n_labeled: 20,
            n_heldout: 100,
            dataset: None,
            hidden: vec![16, 32, 32],
            partition_boundary: None,
        }
    }
}

/// A config problem tied to the key that caused it.
fn bad(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("key `{key}`: {msg}"))
}

impl TrainConfig {
    /// The reference desk-scale task with the given method.
    pub fn reference(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f32| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(bad(key, format!("{v} is outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        if let Some(a) = self.alpha_transmission {
            unit("alpha_transmission", a)?;
        }
        if !(0.0..1.0).contains(&self.quantile) {
            return Err(bad("quantile", format!("{} is outside [0, 1)", self.quantile)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(bad("tau", "must be finite and non-negative"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(bad("mu", "must be finite and non-negative"));
        }
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) {
            return Err(bad("lr_init", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(bad("warmup_epochs", "cannot exceed `epochs`"));
        }
        if self.batch_labeled == 0 {
            return Err(bad("batch_labeled", "must be at least 1"));
        }
        if self.batch_unlabeled == 0 {
            return Err(bad("batch_unlabeled", "must be at least 1"));
        }
        if self.dataset.is_none() {
            if !(2..=crate::synthdata::MAX_CLASSES).contains(&self.classes) {
                return Err(bad("classes", "the shape generator supports 2..=4 classes"));
            }
            if self.n_labeled == 0 {
                return Err(bad("n_labeled", "must be at least 1"));
            }
            if self.n_labeled + self.n_heldout > self.n_samples {
                return Err(bad("n_samples", "must cover n_labeled + n_heldout"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(bad("hidden", "needs at least one positive width"));
        }
        if let Some(b) = self.partition_boundary {
            if b > self.hidden.len() + 1 {
                return Err(bad(
                    "partition_boundary",
                    format!("{b} exceeds the {} layers", self.hidden.len() + 1),
                ));
            }
        }
        if self.method != Method::Gta {
            for (key, set) in [
                ("ema_scope", self.ema_scope.is_some()),
                ("gta_data", self.gta_data.is_some()),
                ("student_data", self.student_data.is_some()),
                ("alpha_transmission", self.alpha_transmission.is_some()),
            ] {
                if set {
                    return Err(bad(key, format!("only applies to method GTA, not {:?}", self.method)));
                }
            }
        }
        Ok(())
    }

    pub fn net_config(&self) -> SegNetConfig {
        SegNetConfig {
            in_channels: 3,
            hidden: self.hidden.clone(),
            classes: self.classes,
            partition_boundary: self.partition_boundary,
        }
    }

    pub fn gta_data(&self) -> GtaData {
        self.gta_data.unwrap_or(GtaData::Pseudo)
    }

    pub fn student_data(&self) -> StudentData {
        self.student_data.unwrap_or(StudentData::Labeled)
    }

    pub fn transmission_scope(&self) -> EmaScope {
        self.ema_scope.unwrap_or(ScopeName::Extractor).into()
    }

    pub fn transmission_alpha(&self) -> f32 {
        self.alpha_transmission.unwrap_or(self.alpha)
    }

    /// Smoothing only acts when confidence re-weighting is on.
    pub fn reweight_config(&self) -> ReweightConfig {
        ReweightConfig {
            enabled: self.reweight_enabled,
            tau: if self.laplace_enabled { self.tau } else { 0.0 },
            quantile: self.quantile,
        }
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        match self.fixed_gamma {
            Some(g) => ThresholdRule::Fixed(g),
            None => ThresholdRule::Quantile(self.quantile),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
