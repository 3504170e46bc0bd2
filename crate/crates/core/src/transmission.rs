//! Exponential-moving-average parameter transfer between models, limited
//! to a role-defined scope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::{ParamEntry, ParamRole, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaScope {
    All,
    Extractor,
    Predictor,
    /// Every parameter whose layer index is below the given value.
    BelowLayer(usize),
}

impl EmaScope {
    pub fn covers(self, entry: &ParamEntry) -> bool {
        match self {
            EmaScope::All => true,
            EmaScope::Extractor => entry.role == ParamRole::Extractor,
            EmaScope::Predictor => entry.role == ParamRole::Predictor,
            EmaScope::BelowLayer(b) => entry.layer_index < b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub alpha: f32,
    pub scope: EmaScope,
}

impl EmaConfig {
    pub fn new(alpha: f32, scope: EmaScope) -> Self {
        Self { alpha, scope }
    }
}

/// `θ_target ← α·θ_target + (1 − α)·θ_source` on every in-scope entry.
/// Entries outside the scope are untouched.
pub fn ema_update(target: &mut ParamStore, source: &ParamStore, cfg: &EmaConfig) -> Result<()> {
    let alpha = cfg.alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("EMA alpha {alpha} outside [0, 1]")));
    }
    target.check_compatible(source)?;
    if alpha == 1.0 {
        return Ok(());
    }
    let step = 1.0 - alpha as f64;
    for (dst, src) in target.iter_mut().zip(source.iter()) {
        if !cfg.scope.covers(dst) {
            continue;
        }
        if alpha == 0.0 {
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
            continue;
        }
        // t + (1-α)(s - t) in f64 rounds back into [t, s].
        for (t, &s) in dst.tensor.data_mut().iter_mut().zip(src.tensor.data()) {
            let tv = *t as f64;
            *t = (tv + step * (s as f64 - tv)) as f32;
        }
    }
    Ok(())
}

/// Extractor-only transfer from the teaching assistant into the student.
pub fn transmit_representation(
    student: &mut ParamStore,
    gta: &ParamStore,
    alpha: f32,
) -> Result<()> {
    ema_update(student, gta, &EmaConfig::new(alpha, EmaScope::Extractor))
}

/// Full-parameter EMA of the student into the teacher.
pub fn update_teacher(teacher: &mut ParamStore, student: &ParamStore, alpha: f32) -> Result<()> {
    ema_update(teacher, student, &EmaConfig::new(alpha, EmaScope::All))
}
