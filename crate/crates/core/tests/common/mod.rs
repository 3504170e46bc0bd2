//! Helpers shared by the integration suites. The oracles here are written
//! independently of the code paths they check.
#![allow(dead_code)]

pub mod grad;

use gta_seg::numkernel::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f32 = 1e-3;
pub const FD_MAX_REL: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central_difference(x: &Tensor, i: usize, f: &dyn Fn(&Tensor) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += FD_EPS;
    let mut minus = x.clone();
    minus.data_mut()[i] -= FD_EPS;
    // The probe actually taken after f32 rounding.
    let step = (plus.data()[i] - minus.data()[i]) as f64;
    (f(&plus) - f(&minus)) / step
}

/// Relative error with a small floor so near-zero gradients compare
/// absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Max relative error over `probes` random coordinates of `x`.
pub fn max_fd_error(
    x: &Tensor,
    grad: &Tensor,
    probes: usize,
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&Tensor) -> f64,
) -> f64 {
    assert_eq!(x.shape(), grad.shape());
    (0..probes)
        .map(|_| {
            let i = rng.random_range(0..x.len());
            rel_err(grad.data()[i] as f64, central_difference(x, i, f))
        })
        .fold(0.0, f64::max)
}

/// Confidence re-weighting evaluated term by term for one confidence vector.
pub fn reweight_oracle(conf: &[f32], gamma: f32, tau: f32) -> Vec<f64> {
    let kept: Vec<bool> = conf.iter().map(|&c| c > gamma).collect();
    let n_kept = kept.iter().filter(|&&k| k).count() as f64;
    let mut denom = 0.0f64;
    for (i, &c) in conf.iter().enumerate() {
        if kept[i] {
            denom += c as f64 + tau as f64;
        }
    }
    conf.iter()
        .zip(&kept)
        .map(|(&c, &k)| if k { (c as f64 + tau as f64) / denom * n_kept } else { 0.0 })
        .collect()
}

/// Per-class IoU by explicit pixel-set intersection and union.
pub fn brute_force_miou(pred: &[Vec<u16>], gt: &[Vec<u16>], classes: usize) -> f64 {
    use std::collections::HashSet;
    let mut ious = Vec::new();
    for c in 0..classes as u16 {
        let collect = |masks: &[Vec<u16>]| -> HashSet<(usize, usize)> {
            masks
                .iter()
                .enumerate()
                .flat_map(|(img, m)| {
                    m.iter()
                        .enumerate()
                        .filter(move |(_, &v)| v == c)
                        .map(move |(p, _)| (img, p))
                })
                .collect()
        };
        let (p, g) = (collect(pred), collect(gt));
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Quantile by sorting, linear interpolation between order statistics.
pub fn sorted_quantile(values: &[f32], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}
