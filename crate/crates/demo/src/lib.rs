//! Static-page demo over the `gta_seg` library.
//!
//! Three operations are exported to JavaScript:
//! - [`render_sample`]: one synthetic image and its mask as RGBA pixels;
//! - [`explore_pseudo_labels`]: threshold and re-weight a simulated teacher
//!   prediction for a sample and show which pixels survive;
//! - [`schedule_curves`]: the poly learning-rate schedule and how much of an
//!   initial model survives repeated EMA updates.
//!
//! Everything is also plain Rust, so the native unit tests below exercise
//! the same code the page calls.

use gta_seg::numkernel::{SgdState, Tensor};
use gta_seg::pseudolabel::{label_batch, ReweightConfig, ThresholdRule};
use gta_seg::synthdata::{generate_one, SegSample};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Class count of the reference task: background plus three shapes.
pub const CLASSES: usize = 4;

/// Display colors: background dark, then one per shape class.
const PALETTE: [[u8; 3]; CLASSES] = [[24, 24, 32], [230, 80, 70], [80, 200, 110], [90, 120, 235]];
/// Dropped pixels in the pseudo-label view.
const DROPPED: [u8; 3] = [110, 110, 110];

/// Errors cross into JavaScript as strings; keeping them `String` on the
/// Rust side lets the native tests run without a JS host.
fn js_err(e: gta_seg::Error) -> String {
    e.to_string()
}

fn sample(seed: u64, id: u32, size: usize) -> Result<SegSample, String> {
    generate_one(seed, id, CLASSES, size).map_err(js_err)
}

/// Image pixels (left) next to the colored mask (right): `2·size × size`
/// RGBA bytes, row-major.
#[wasm_bindgen]
pub fn render_sample(seed: u64, id: u32, size: usize) -> Result<Vec<u8>, String> {
    let s = sample(seed, id, size)?;
    let plane = size * size;
    let img = s.image.data();
    let mut out = Vec::with_capacity(2 * plane * 4);
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            for c in 0..3 {
                out.push((img[c * plane + p] * 255.0).round() as u8);
            }
            out.push(255);
        }
        for x in 0..size {
            let [r, g, b] = PALETTE[s.mask[y * size + x] as usize];
            out.extend_from_slice(&[r, g, b, 255]);
        }
    }
    Ok(out)
}

/// Result of thresholding one simulated teacher prediction.
#[wasm_bindgen]
pub struct PseudoLabelView {
    rgba: Vec<u8>,
    gamma: f32,
    kept_fraction: f32,
    kept_accuracy: f32,
    min_weight: f32,
    max_weight: f32,
}

#[wasm_bindgen]
impl PseudoLabelView {
    /// `size × size` RGBA: kept pixels in their pseudo-label color, scaled
    /// by weight; dropped pixels gray.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    #[wasm_bindgen(getter)]
    pub fn kept_fraction(&self) -> f32 {
        self.kept_fraction
    }

    /// Share of kept pixels whose pseudo-label matches the ground truth.
    #[wasm_bindgen(getter)]
    pub fn kept_accuracy(&self) -> f32 {
        self.kept_accuracy
    }

    #[wasm_bindgen(getter)]
    pub fn min_weight(&self) -> f32 {
        self.min_weight
    }

    #[wasm_bindgen(getter)]
    pub fn max_weight(&self) -> f32 {
        self.max_weight
    }
}

/// Teacher logits that favor the true class by `margin`, plus uniform
/// noise of half-width `noise`; deterministic per seed.
pub fn simulated_logits(s: &SegSample, margin: f32, noise: f32, seed: u64) -> Result<Tensor, gta_seg::Error> {
    let plane = s.mask.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; CLASSES * plane];
    for c in 0..CLASSES {
        for (p, &gt) in s.mask.iter().enumerate() {
            let base = if gt as usize == c { margin } else { 0.0 };
            let jitter = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
            data[c * plane + p] = base + jitter;
        }
    }
    Tensor::new(vec![1, CLASSES, s.height(), s.width()], data)
}

/// Drop the least confident `quantile` of a simulated teacher prediction
/// and re-weight the rest.
#[wasm_bindgen]
pub fn explore_pseudo_labels(
    seed: u64,
    id: u32,
    size: usize,
    margin: f32,
    noise: f32,
    quantile: f32,
    tau: f32,
    reweight: bool,
) -> Result<PseudoLabelView, String> {
    let s = sample(seed, id, size)?;
    let logits = simulated_logits(&s, margin, noise, seed ^ id as u64).map_err(js_err)?;
    let cfg = ReweightConfig { enabled: reweight, tau, quantile };
    let map = label_batch(&logits, ThresholdRule::Quantile(quantile), &cfg).map_err(js_err)?;

    let (mut correct, mut kept) = (0usize, 0usize);
    let (mut min_weight, mut max_weight) = (f32::INFINITY, 0.0f32);
    let mut rgba = Vec::with_capacity(map.labels.len() * 4);
    for (p, label) in map.labels.iter().enumerate() {
        match label {
            Some(l) => {
                kept += 1;
                correct += usize::from(*l == s.mask[p]);
                let w = map.weights[p];
                min_weight = min_weight.min(w);
                max_weight = max_weight.max(w);
                let shade = (0.4 + 0.6 * w.min(1.5) / 1.5).min(1.0);
                let [r, g, b] = PALETTE[*l as usize].map(|v| (v as f32 * shade) as u8);
                rgba.extend_from_slice(&[r, g, b, 255]);
            }
            None => rgba.extend_from_slice(&[DROPPED[0], DROPPED[1], DROPPED[2], 255]),
        }
    }
    if kept == 0 {
        min_weight = 0.0;
    }
    Ok(PseudoLabelView {
        rgba,
        gamma: map.gamma,
        kept_fraction: map.kept_fraction,
        kept_accuracy: if kept == 0 { 0.0 } else { correct as f32 / kept as f32 },
        min_weight,
        max_weight,
    })
}

/// `points` samples of two curves over `total_iters` iterations, packed as
/// `[lr_0.., share_0..]`: the poly learning rate, and the share of the
/// initial weights still present after `t` EMA updates with rate `alpha`
/// (`alpha^t`).
#[wasm_bindgen]
pub fn schedule_curves(lr_init: f32, total_iters: usize, alpha: f32, points: usize) -> Result<Vec<f32>, String> {
    if points < 2 || total_iters == 0 {
        return Err("need at least two points and one iteration".into());
    }
    let sgd = SgdState::new(lr_init, 0.0, total_iters);
    let ts: Vec<usize> = (0..points).map(|i| i * total_iters / (points - 1)).collect();
    let mut out = Vec::with_capacity(2 * points);
    for &t in &ts {
        out.push(sgd.poly_lr(t).map_err(js_err)?);
    }
    out.extend(ts.iter().map(|&t| (alpha as f64).powi(t as i32) as f32));
    Ok(out)
}
