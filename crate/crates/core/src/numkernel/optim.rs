//! Plain SGD with L2 weight decay and a poly learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::ParamStore;

use super::tape::Gradients;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub lr_init: f32,
    pub weight_decay: f32,
    pub total_iters: usize,
    pub power: f32,
}

impl SgdState {
    pub fn new(lr_init: f32, weight_decay: f32, total_iters: usize) -> Self {
        Self {
            lr_init,
            weight_decay,
            total_iters,
            power: 0.9,
        }
    }

    /// `lr_init · (1 − t/T)^power`.
    pub fn poly_lr(&self, t: usize) -> Result<f32> {
        if t > self.total_iters {
            return Err(Error::Range(format!(
                "iteration {t} is past the schedule end {}",
                self.total_iters
            )));
        }
        if t == 0 {
            return Ok(self.lr_init);
        }
        let frac = 1.0 - t as f64 / self.total_iters as f64;
        Ok((self.lr_init as f64 * frac.powf(self.power as f64)) as f32)
    }
}

/// One SGD update `θ ← θ − lr(t)·(∇θ + wd·θ)` over every parameter in
/// `params`. Nothing is modified unless every parameter has a gradient.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &SgdState,
    t: usize,
) -> Result<()> {
    if t >= state.total_iters {
        return Err(Error::Range(format!(
            "sgd step {t} outside schedule of {} iterations",
            state.total_iters
        )));
    }
    for entry in params.iter() {
        let g = grads
            .param(&entry.name)
            .ok_or_else(|| Error::MissingGradient(entry.name.clone()))?;
        if !g.same_shape(&entry.tensor) {
            return Err(Error::Dimension(format!(
                "gradient for `{}` has shape {:?}, parameter has {:?}",
                entry.name,
                g.shape(),
                entry.tensor.shape()
            )));
        }
    }
    let lr = state.poly_lr(t)?;
    let wd = state.weight_decay;
    for entry in params.iter_mut() {
        let g = grads.param(&entry.name).expect("checked above");
        for (theta, &gv) in entry.tensor.data_mut().iter_mut().zip(g.data()) {
            *theta -= lr * (gv + wd * *theta);
        }
    }
    Ok(())
}
