//! Confidence-thresholded pseudo-labels, confidence re-weighting with
//! additive smoothing, and the two segmentation losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{softmax_channel, Tape, Tensor, Var};

/// Per-pixel argmax class and max probability for a `[B, K, H, W]` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Confidence {
    pub pred: Vec<u16>,
    pub conf: Vec<f32>,
    /// `[B, H, W]`
    pub shape: [usize; 3],
}

pub fn predict_confidence(logits: &Tensor) -> Result<Confidence> {
    let [b, k, h, w] = logits.dims4()?;
    let probs = softmax_channel(logits)?;
    let plane = h * w;
    let data = probs.data();
    let mut pred = Vec::with_capacity(b * plane);
    let mut conf = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_p = data[bi * k * plane + p];
            for c in 1..k {
                let v = data[bi * k * plane + c * plane + p];
                // Strict comparison keeps the smallest index on ties.
                if v > best_p {
                    best = c;
                    best_p = v;
                }
            }
            pred.push(best as u16);
            conf.push(best_p);
        }
    }
    Ok(Confidence {
        pred,
        conf,
        shape: [b, h, w],
    })
}

/// The `q`-quantile of `conf` with linear interpolation between order
/// statistics. `q = 0` returns −∞ so that every pixel passes the strict
/// `c > γ` test.
pub fn compute_threshold(conf: &[f32], q: f32) -> Result<f32> {
    if conf.is_empty() {
        return Err(Error::Data("cannot take a quantile of no confidences".into()));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Range(format!("quantile {q} outside [0, 1)")));
    }
    if q == 0.0 {
        return Ok(f32::NEG_INFINITY);
    }
    let mut sorted = conf.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let pos = q as f64 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok((sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)) as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Vec<Option<u16>>,
    pub confidence: Vec<f32>,
    pub weights: Vec<f32>,
    pub gamma: f32,
    pub kept_fraction: f32,
    /// `[B, H, W]`
    pub shape: [usize; 3],
    /// Every confidence tied, so the strict threshold was waived.
    pub fallback_keep_all: bool,
}

impl PseudoLabelMap {
    pub fn kept(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.kept() == 0
    }

    /// Mean weight over kept pixels (0 when nothing was kept).
    pub fn mean_kept_weight(&self) -> f32 {
        let kept = self.kept();
        if kept == 0 {
            return 0.0;
        }
        let total: f64 = self
            .labels
            .iter()
            .zip(&self.weights)
            .filter(|(l, _)| l.is_some())
            .map(|(_, &w)| w as f64)
            .sum();
        (total / kept as f64) as f32
    }
}

/// Keep `pred` where `conf > gamma`. Weights start at 1 on kept pixels.
pub fn generate_pseudo_labels(confidence: &Confidence, gamma: f32) -> PseudoLabelMap {
    let labels: Vec<Option<u16>> = confidence
        .pred
        .iter()
        .zip(&confidence.conf)
        .map(|(&p, &c)| (c > gamma).then_some(p))
        .collect();
    let kept = labels.iter().filter(|l| l.is_some()).count();
    let weights = labels.iter().map(|l| if l.is_some() { 1.0 } else { 0.0 }).collect();
    PseudoLabelMap {
        kept_fraction: kept as f32 / labels.len().max(1) as f32,
        labels,
        confidence: confidence.conf.clone(),
        weights,
        gamma,
        shape: confidence.shape,
        fallback_keep_all: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub enabled: bool,
    pub tau: f32,
    pub quantile: f32,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 1.0,
            quantile: 0.2,
        }
    }
}

/// Kept pixels get `w = (c + τ)·N_kept / Σ_kept (c + τ)`; ignored pixels 0.
/// With re-weighting disabled every kept pixel gets exactly 1.
pub fn reweight(mut map: PseudoLabelMap, cfg: &ReweightConfig) -> PseudoLabelMap {
    let kept = map.kept();
    if kept == 0 {
        map.weights.iter_mut().for_each(|w| *w = 0.0);
        return map;
    }
    if !cfg.enabled {
        for (w, l) in map.weights.iter_mut().zip(&map.labels) {
            *w = if l.is_some() { 1.0 } else { 0.0 };
        }
        return map;
    }
    let tau = cfg.tau as f64;
    let denom: f64 = map
        .labels
        .iter()
        .zip(&map.confidence)
        .filter(|(l, _)| l.is_some())
        .map(|(_, &c)| c as f64 + tau)
        .sum();
    let scale = kept as f64 / denom;
    for ((w, l), &c) in map.weights.iter_mut().zip(&map.labels).zip(&map.confidence) {
        *w = match l {
            Some(_) => ((c as f64 + tau) * scale) as f32,
            None => 0.0,
        };
    }
    map
}

/// How the per-batch threshold γ is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// Drop the lowest `q` fraction of pixel confidences in the batch.
    Quantile(f32),
    Fixed(f32),
}

/// Teacher logits → thresholded, re-weighted pseudo-labels.
///
/// When every confidence in the batch is identical the quantile rule would
/// drop everything; in that case all pixels are kept and
/// `fallback_keep_all` is set.
pub fn label_batch(
    teacher_logits: &Tensor,
    rule: ThresholdRule,
    cfg: &ReweightConfig,
) -> Result<PseudoLabelMap> {
    let confidence = predict_confidence(teacher_logits)?;
    let gamma = match rule {
        ThresholdRule::Quantile(q) => compute_threshold(&confidence.conf, q)?,
        ThresholdRule::Fixed(g) => g,
    };
    let mut map = generate_pseudo_labels(&confidence, gamma);
    if matches!(rule, ThresholdRule::Quantile(_)) && map.is_empty() {
        let first = confidence.conf[0];
        if confidence.conf.iter().all(|&c| c == first) {
            map = generate_pseudo_labels(&confidence, f32::NEG_INFINITY);
            map.gamma = gamma;
            map.fallback_keep_all = true;
        }
    }
    Ok(reweight(map, cfg))
}

/// Weighted cross-entropy of `logits` against a pseudo-label map.
pub fn unsupervised_loss(tape: &mut Tape, logits: Var, map: &PseudoLabelMap) -> Result<Var> {
    let [b, _, h, w] = tape.value(logits).dims4()?;
    if [b, h, w] != map.shape {
        return Err(Error::Dimension(format!(
            "logits cover {:?} but pseudo-labels cover {:?}",
            [b, h, w],
            map.shape
        )));
    }
    tape.weighted_pixel_ce(logits, &map.labels, &map.weights)
}

/// Mean pixel cross-entropy against ground-truth masks (`(b, y, x)` order).
pub fn supervised_loss(tape: &mut Tape, logits: Var, gt: &[u16]) -> Result<Var> {
    let [_, k, _, _] = tape.value(logits).dims4()?;
    if let Some((i, &c)) = gt.iter().enumerate().find(|(_, &c)| c as usize >= k) {
        return Err(Error::Data(format!(
            "ground-truth pixel {i} has class {c}, model predicts {k} classes"
        )));
    }
    let labels: Vec<Option<u16>> = gt.iter().map(|&c| Some(c)).collect();
    let weights = vec![1.0f32; gt.len()];
    tape.weighted_pixel_ce(logits, &labels, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_confidence(conf: &[f32]) -> Confidence {
        Confidence {
            pred: vec![1; conf.len()],
            conf: conf.to_vec(),
            shape: [1, 1, conf.len()],
        }
    }

    fn kept_map(conf: &[f32]) -> PseudoLabelMap {
        generate_pseudo_labels(&flat_confidence(conf), f32::NEG_INFINITY)
    }

    #[test]
    fn uniform_logits_tie_to_class_zero() {
        let c = predict_confidence(&Tensor::full(vec![1, 4, 2, 2], 0.7)).unwrap();
        assert!(c.pred.iter().all(|&p| p == 0));
        assert!(c.conf.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn two_class_confidence() {
        let c = predict_confidence(&Tensor::new(vec![1, 2, 1, 1], vec![2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(c.pred, [0]);
        assert!((c.conf[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn quantile_of_tenths_keeps_eight() {
        let conf: Vec<f32> = (1..=10).map(|i| i as f32 / 10.0).collect();
        let gamma = compute_threshold(&conf, 0.2).unwrap();
        let map = generate_pseudo_labels(&flat_confidence(&conf), gamma);
        assert_eq!(map.kept(), 8);
    }

    #[test]
    fn zero_quantile_keeps_everything() {
        let conf = [0.3, 0.3, 0.9];
        let gamma = compute_threshold(&conf, 0.0).unwrap();
        assert!(gamma < 0.3);
        assert_eq!(generate_pseudo_labels(&flat_confidence(&conf), gamma).kept(), 3);
    }

    #[test]
    fn threshold_errors() {
        assert!(matches!(compute_threshold(&[], 0.2), Err(Error::Data(_))));
        assert!(matches!(compute_threshold(&[0.5], 1.0), Err(Error::Range(_))));
        assert!(matches!(compute_threshold(&[0.5], -0.1), Err(Error::Range(_))));
    }

    #[test]
    fn equal_confidences_threshold_at_that_value() {
        let conf = [0.6f32; 5];
        let gamma = compute_threshold(&conf, 0.2).unwrap();
        assert_eq!(gamma, 0.6);
        assert_eq!(generate_pseudo_labels(&flat_confidence(&conf), gamma).kept(), 0);
    }

    #[test]
    fn tied_batch_falls_back_to_keep_all() {
        let map = label_batch(
            &Tensor::zeros(vec![1, 3, 2, 2]),
            ThresholdRule::Quantile(0.2),
            &ReweightConfig::default(),
        )
        .unwrap();
        assert!(map.fallback_keep_all);
        assert_eq!(map.kept(), 4);
        assert!(map.weights.iter().all(|&w| (w - 1.0).abs() < 1e-7));
    }

    #[test]
    fn direct_rule_evaluation() {
        let map = generate_pseudo_labels(&flat_confidence(&[0.9, 0.5]), 0.6);
        assert_eq!(map.labels, [Some(1), None]);
        let none = generate_pseudo_labels(&flat_confidence(&[0.9, 0.5]), 0.9);
        assert!(none.is_empty());
    }

    #[test]
    fn reweight_examples() {
        let smooth = reweight(kept_map(&[0.9, 0.7]), &ReweightConfig::default());
        assert!((smooth.weights[0] - 1.0556).abs() < 1e-4);
        assert!((smooth.weights[1] - 0.9444).abs() < 1e-4);
        let raw = reweight(
            kept_map(&[0.9, 0.7]),
            &ReweightConfig {
                tau: 0.0,
                ..ReweightConfig::default()
            },
        );
        assert!((raw.weights[0] - 1.125).abs() < 1e-4);
        assert!((raw.weights[1] - 0.875).abs() < 1e-4);
    }

    #[test]
    fn equal_confidences_get_unit_weight() {
        let map = reweight(kept_map(&[0.4; 6]), &ReweightConfig::default());
        assert!(map.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn disabled_reweight_gives_unit_weight() {
        let cfg = ReweightConfig {
            enabled: false,
            ..ReweightConfig::default()
        };
        let map = reweight(generate_pseudo_labels(&flat_confidence(&[0.9, 0.2, 0.5]), 0.3), &cfg);
        assert_eq!(map.weights, [1.0, 0.0, 1.0]);
    }

    #[test]
    fn nothing_kept_gives_zero_weights() {
        let map = reweight(
            generate_pseudo_labels(&flat_confidence(&[0.9, 0.2]), 1.0),
            &ReweightConfig::default(),
        );
        assert!(map.weights.iter().all(|&w| w == 0.0));
        assert_eq!(map.mean_kept_weight(), 0.0);
    }

    fn loss_value(logits: &Tensor, map: &PseudoLabelMap) -> f32 {
        let mut tape = Tape::new();
        let z = tape.input(logits.clone());
        let l = unsupervised_loss(&mut tape, z, map).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn large_tau_approaches_unit_weight_loss() {
        let logits = Tensor::new(
            vec![1, 2, 1, 3],
            vec![2.0, -1.0, 0.3, 0.0, 0.5, -0.4],
        )
        .unwrap();
        let conf = predict_confidence(&logits).unwrap();
        let map = generate_pseudo_labels(&conf, f32::NEG_INFINITY);
        let unit = loss_value(&logits, &map);
        let big_tau = reweight(
            map,
            &ReweightConfig {
                tau: 1e6,
                ..ReweightConfig::default()
            },
        );
        assert!((loss_value(&logits, &big_tau) - unit).abs() < 1e-3);
    }

    #[test]
    fn supervised_uniform_logits_is_ln4() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(vec![2, 4, 2, 2]));
        let gt = [0, 1, 2, 3, 3, 2, 1, 0];
        let l = supervised_loss(&mut tape, z, &gt).unwrap();
        assert!((tape.value(l).data()[0] as f64 - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn supervised_equals_unit_pseudo_loss_on_gt() {
        let logits = Tensor::new(vec![1, 3, 1, 2], vec![0.2, 1.5, -0.3, 0.0, 0.9, 2.2]).unwrap();
        let gt = [2u16, 0];
        let mut tape = Tape::new();
        let z = tape.input(logits.clone());
        let l = supervised_loss(&mut tape, z, &gt).unwrap();
        let map = PseudoLabelMap {
            labels: gt.iter().map(|&c| Some(c)).collect(),
            confidence: vec![1.0; 2],
            weights: vec![1.0; 2],
            gamma: f32::NEG_INFINITY,
            kept_fraction: 1.0,
            shape: [1, 1, 2],
            fallback_keep_all: false,
        };
        assert!((tape.value(l).data()[0] - loss_value(&logits, &map)).abs() < 1e-6);
    }

    #[test]
    fn supervised_rejects_out_of_range_class() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(vec![1, 2, 1, 1]));
        assert!(matches!(supervised_loss(&mut tape, z, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn perfect_supervised_prediction_is_near_zero() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::new(vec![1, 2, 1, 1], vec![0.0, 30.0]).unwrap());
        let l = supervised_loss(&mut tape, z, &[1]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-3);
    }
}
