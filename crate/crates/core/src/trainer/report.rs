use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gta,
    Student,
    Teacher,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gta => "gta",
            ModelKind::Student => "student",
            ModelKind::Teacher => "teacher",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub model: ModelKind,
    pub miou: f64,
    pub loss_l: f64,
    pub loss_u: f64,
    pub lr: f32,
    pub kept_fraction: f64,
    pub mean_weight: f64,
}

/// Pseudo-label quality measured against the hidden masks of the
/// unlabeled images. Never used for training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub kept_pixels: u64,
    pub correct_pixels: u64,
    /// Sum of weights on kept pixels whose label is wrong.
    pub wrong_weight_sum: f64,
    /// Sum of weights on kept pixels whose label is right.
    pub correct_weight_sum: f64,
    /// Batches where nothing passed the threshold.
    pub empty_batches: usize,
    /// Batches where tied confidences forced the keep-all fallback.
    pub fallback_batches: usize,
}

impl PseudoLabelStats {
    pub fn accuracy(&self) -> Option<f64> {
        (self.kept_pixels > 0).then(|| self.correct_pixels as f64 / self.kept_pixels as f64)
    }

    pub fn mean_wrong_weight(&self) -> Option<f64> {
        let wrong = self.kept_pixels - self.correct_pixels;
        (wrong > 0).then(|| self.wrong_weight_sum / wrong as f64)
    }

    pub fn mean_correct_weight(&self) -> Option<f64> {
        (self.correct_pixels > 0).then(|| self.correct_weight_sum / self.correct_pixels as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub gta_miou: Option<f64>,
    pub student_miou: f64,
    pub teacher_miou: Option<f64>,
    /// The model used for inference: the teacher when there is one.
    pub final_miou: f64,
    pub pseudo_labels: PseudoLabelStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub summary: FinalSummary,
}

pub const METRICS_HEADER: &str = "epoch,model,miou,loss_l,loss_u,lr,kept_fraction,mean_weight";

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:e},{:.6},{:.6}",
                r.epoch,
                r.model.as_str(),
                r.miou,
                r.loss_l,
                r.loss_u,
                r.lr,
                r.kept_fraction,
                r.mean_weight
            )
            .expect("write to string");
        }
        out
    }

    pub fn final_record(&self, model: ModelKind) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.model == model)
    }
}
