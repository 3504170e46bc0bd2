//! Synthetic shape-segmentation task, labeled/unlabeled splitting and
//! mIoU evaluation.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Highest class count the shape generator supports (background + 3 shapes).
pub const MAX_CLASSES: usize = 4;
pub const PIXEL_NOISE: f32 = 0.05;
const SPLIT_SALT: u64 = 0x5eed_5011_7000_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: u32,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major class ids.
    pub mask: Vec<u16>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Disk,
    Triangle,
}

impl Shape {
    fn for_class(class: u16) -> Shape {
        match class {
            1 => Shape::Square,
            2 => Shape::Disk,
            _ => Shape::Triangle,
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Disk => dx * dx + dy * dy <= r * r,
            // Apex up, base at dy = +r.
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        }
    }

    /// Center of the class's hue arc, in degrees.
    fn hue(self) -> f32 {
        match self {
            Shape::Square => 0.0,
            Shape::Disk => 120.0,
            Shape::Triangle => 240.0,
        }
    }
}

/// HSV to RGB, hue in degrees, saturation and value in `[0, 1]`.
fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Per-shape hue jitter in degrees, uniform around the class's hue. The
/// three arcs nearly tile the color wheel, so a handful of labeled shapes
/// pins the class boundaries only loosely.
const HUE_JITTER: f32 = 58.0;
/// Shape half-extent range as a fraction of the image side.
const RADIUS_RANGE: (f32, f32) = (0.30, 0.48);
/// Inclusive shape-count range for images that are not background-only.
const SHAPE_COUNT: (u32, u32) = (1, 3);

fn sample_rng(seed: u64, id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17))
}

/// One sample, fully determined by `(seed, id)`.
pub fn generate_one(seed: u64, id: u32, classes: usize, size: usize) -> Result<SegSample> {
    if !(2..=MAX_CLASSES).contains(&classes) {
        return Err(Error::Config(format!(
            "shape generator supports 2..={MAX_CLASSES} classes, got {classes}"
        )));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size {size} is too small")));
    }
    let mut rng = sample_rng(seed, id);
    let plane = size * size;
    let s = size as f32;

    // Textured background: a random base tone plus an oriented stripe field.
    let gray = rng.random_range(0.3..0.7);
    let base: [f32; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.05..0.05));
    let freq = rng.random_range(0.15..0.6);
    let angle = rng.random_range(0.0..std::f32::consts::PI);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let amp = rng.random_range(0.05..0.15);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut image = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let t = (freq * (x as f32 * ca + y as f32 * sa) + phase).sin() * amp;
            for c in 0..3 {
                image[c * plane + y * size + x] = base[c] + t;
            }
        }
    }

    let mut mask = vec![0u16; plane];
    // Mostly 1-3 shapes; a small share of images is background only.
    let count = if rng.random_range(0.0..1.0) < 0.05 {
        0
    } else {
        rng.random_range(SHAPE_COUNT.0..=SHAPE_COUNT.1)
    };
    let mut placed: Vec<(f32, f32, f32)> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(1..classes as u16);
        let shape = Shape::for_class(class);
        let r = rng.random_range(RADIUS_RANGE.0 * s..RADIUS_RANGE.1 * s);
        let mut spot = None;
        for _ in 0..100 {
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            let clear = placed
                .iter()
                .all(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() > pr + r + 1.0);
            if clear {
                spot = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = spot else { continue };
        placed.push((cx, cy, r));
        let color = hsv_to_rgb(
            shape.hue() + rng.random_range(-HUE_JITTER..HUE_JITTER),
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
        );
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if shape.contains(dx, dy, r) {
                    mask[y * size + x] = class;
                    for c in 0..3 {
                        image[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    for v in image.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(SegSample {
        id,
        image: Tensor::new(vec![3, size, size], image)?,
        mask,
    })
}

/// `n` samples with ids `0..n`.
pub fn generate(seed: u64, n: usize, classes: usize, size: usize) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    (0..n as u32).map(|id| generate_one(seed, id, classes, size)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub classes: usize,
    pub labeled: Vec<SegSample>,
    /// Masks are kept for analysis only; training never reads them.
    pub unlabeled: Vec<SegSample>,
    pub heldout: Vec<SegSample>,
}

/// Shuffle and partition; the labeled subset is chosen so that every class
/// appears in at least one labeled mask.
pub fn split(
    samples: Vec<SegSample>,
    classes: usize,
    n_labeled: usize,
    n_heldout: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_labeled + n_heldout > samples.len() {
        return Err(Error::Data(format!(
            "{n_labeled} labeled + {n_heldout} held-out exceeds {} samples",
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut order: Vec<SegSample> = samples;
    order.shuffle(&mut rng);
    let heldout: Vec<SegSample> = order.drain(..n_heldout).collect();

    let mut chosen = vec![false; order.len()];
    let mut covered = vec![false; classes];
    let mut picked = 0;
    for class in 0..classes {
        if covered[class] {
            continue;
        }
        let hit = order
            .iter()
            .enumerate()
            .find(|(i, s)| !chosen[*i] && s.mask.contains(&(class as u16)));
        let Some((i, _)) = hit else {
            return Err(Error::Data(format!("class {class} never occurs; cannot stratify")));
        };
        chosen[i] = true;
        picked += 1;
        for &c in &order[i].mask {
            if (c as usize) < classes {
                covered[c as usize] = true;
            }
        }
    }
    if picked > n_labeled {
        return Err(Error::Data(format!(
            "covering all {classes} classes needs {picked} labeled images, only {n_labeled} allowed"
        )));
    }
    for flag in chosen.iter_mut() {
        if picked == n_labeled {
            break;
        }
        if !*flag {
            *flag = true;
            picked += 1;
        }
    }
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (s, keep) in order.into_iter().zip(chosen) {
        if keep {
            labeled.push(s);
        } else {
            unlabeled.push(s);
        }
    }
    Ok(DatasetSplit {
        classes,
        labeled,
        unlabeled,
        heldout,
    })
}

/// `K×K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u16], gt: &[u16]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Dimension(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Data(format!(
                    "class id {} out of range for {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn report(&self) -> IouReport {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let gt_total: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let pred_total: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        IouReport { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou<P: AsRef<[u16]>, G: AsRef<[u16]>>(
    pred_masks: &[P],
    gt_masks: &[G],
    classes: usize,
) -> Result<IouReport> {
    if pred_masks.len() != gt_masks.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} ground-truth masks",
            pred_masks.len(),
            gt_masks.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in pred_masks.iter().zip(gt_masks) {
        cm.add(p.as_ref(), g.as_ref())?;
    }
    Ok(cm.report())
}
