//! Reverse-mode differentiation over whole tensors.
//!
//! Every operation appends a node to the [`Tape`]; nodes are created in
//! topological order, so [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::conv::{conv2d_backward, conv2d_forward};
use super::tensor::Tensor;

/// Smallest probability fed to `ln` inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    SoftmaxChannel(Var),
    Sum(Var),
    Scale(Var, f32),
    Add(Var, Var),
    Mul(Var, Var),
    PixelCe(Box<PixelCe>),
}

#[derive(Debug)]
struct PixelCe {
    logits: Var,
    labels: Vec<Option<u16>>,
    weights: Vec<f32>,
    denom: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a named parameter. Every parameter bound on the tape has
    /// an entry; parameters the loss does not depend on get zeros.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Gradient with respect to any recorded value (zeros if unreached).
    pub fn wrt(&self, var: Var) -> Tensor {
        self.nodes[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += b;
            }
        }
        None => *slot = Some(grad),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// A constant the loss is not differentiated against by default.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A constant whose gradient is still tracked (for probing).
    pub fn watched(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        let dup = self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Param(existing) if existing == name));
        if dup {
            return Err(Error::Usage(format!("parameter `{name}` bound twice on one tape")));
        }
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // Written as a comparison so NaN propagates instead of becoming 0.
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_channel(&mut self, logits: Var) -> Result<Var> {
        let out = softmax_channel(self.value(logits))?;
        let rg = self.needs(logits);
        Ok(self.push(out, Op::SoftmaxChannel(logits), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Weighted per-pixel cross-entropy of `softmax(logits)` against hard
    /// labels, normalized by the number of labeled (non-ignored) pixels.
    ///
    /// `labels` and `weights` are indexed `(b, y, x)` row-major. A non-zero
    /// weight on an ignored pixel is a contract violation.
    pub fn weighted_pixel_ce(
        &mut self,
        logits: Var,
        labels: &[Option<u16>],
        weights: &[f32],
    ) -> Result<Var> {
        let t = self.value(logits);
        let [b, k, h, w] = t.dims4()?;
        let (loss, kept) = ce_forward(t.data(), [b, k, h, w], labels, weights)?;
        let denom = kept.max(1) as f64;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar((loss / denom) as f32),
            Op::PixelCe(Box::new(PixelCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                denom,
            })),
            rg,
        ))
    }

    /// Propagate from a scalar `loss` back to every recorded value.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let mut out: Vec<(Var, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let cg = conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        g,
                        self.needs(*input),
                    )?;
                    if let Some(gi) = cg.input {
                        out.push((*input, gi));
                    }
                    out.push((*kernel, cg.kernel));
                    out.push((*bias, cg.bias));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
                }
                Op::SoftmaxChannel(x) => {
                    out.push((*x, softmax_channel_backward(&node.value, g)?));
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), gv)));
                }
                Op::Scale(x, f) => out.push((*x, g.map(|v| v * f))),
                Op::Add(a, b) => {
                    out.push((*a, g.clone()));
                    out.push((*b, g.clone()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    let gb = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    out.push((*a, Tensor::new(va.shape().to_vec(), ga)?));
                    out.push((*b, Tensor::new(vb.shape().to_vec(), gb)?));
                }
                Op::PixelCe(ce) => {
                    let scale = g.data()[0] as f64 / ce.denom;
                    let lt = self.value(ce.logits);
                    out.push((ce.logits, ce_backward(lt, &ce.labels, &ce.weights, scale)?));
                }
            }
            for (var, grad) in out {
                if self.needs(var) {
                    accumulate(&mut grads[var.0], grad);
                }
            }
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                params.insert(name.clone(), g);
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            nodes: grads,
            params,
        })
    }
}

/// Per-pixel channel softmax of `[B, K, H, W]` logits, max-subtracted.
pub fn softmax_channel(logits: &Tensor) -> Result<Tensor> {
    let [b, k, h, w] = logits.dims4()?;
    if k < 2 {
        return Err(Error::Dimension(format!("softmax needs at least 2 channels, got {k}")));
    }
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![0.0f32; src.len()];
    let mut buf = vec![0.0f64; k];
    for bi in 0..b {
        let base = bi * k * plane;
        for p in 0..plane {
            let max = (0..k)
                .map(|c| src[base + c * plane + p])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut total = 0.0;
            for (c, slot) in buf.iter_mut().enumerate() {
                *slot = (src[base + c * plane + p] as f64 - max).exp();
                total += *slot;
            }
            for (c, &e) in buf.iter().enumerate() {
                out[base + c * plane + p] = (e / total) as f32;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn softmax_channel_backward(probs: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let [b, k, h, w] = probs.dims4()?;
    let plane = h * w;
    let (y, g) = (probs.data(), grad.data());
    let mut out = vec![0.0f32; y.len()];
    for bi in 0..b {
        let base = bi * k * plane;
        for p in 0..plane {
            let dot: f64 = (0..k)
                .map(|c| g[base + c * plane + p] as f64 * y[base + c * plane + p] as f64)
                .sum();
            for c in 0..k {
                let i = base + c * plane + p;
                out[i] = (y[i] as f64 * (g[i] as f64 - dot)) as f32;
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), out)
}

fn check_ce_inputs(
    dims: [usize; 4],
    labels: &[Option<u16>],
    weights: &[f32],
) -> Result<()> {
    let [b, k, h, w] = dims;
    let pixels = b * h * w;
    if labels.len() != pixels || weights.len() != pixels {
        return Err(Error::Dimension(format!(
            "cross-entropy over {pixels} pixels got {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    for (i, (label, &wt)) in labels.iter().zip(weights).enumerate() {
        match label {
            None if wt != 0.0 => {
                return Err(Error::Contract(format!(
                    "pixel {i} is ignored but carries weight {wt}"
                )))
            }
            Some(c) if *c as usize >= k => {
                return Err(Error::Data(format!("pixel {i} has class {c} but only {k} classes exist")))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Returns `(Σ w·(−log p_label), kept pixel count)`.
/// `max(x, floor)` that keeps NaN visible to the caller's finiteness checks.
fn clamp_below(x: f64, floor: f64) -> f64 {
    if x < floor {
        floor
    } else {
        x
    }
}

fn ce_forward(
    logits: &[f32],
    dims: [usize; 4],
    labels: &[Option<u16>],
    weights: &[f32],
) -> Result<(f64, usize)> {
    check_ce_inputs(dims, labels, weights)?;
    let [_, k, h, w] = dims;
    let plane = h * w;
    let floor = PROB_FLOOR.ln();
    let mut total = 0.0f64;
    let mut kept = 0usize;
    for (i, (label, &wt)) in labels.iter().zip(weights).enumerate() {
        let Some(label) = *label else { continue };
        kept += 1;
        let (bi, p) = (i / plane, i % plane);
        let z = |c: usize| logits[bi * k * plane + c * plane + p] as f64;
        let max = (0..k).map(z).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..k).map(|c| (z(c) - max).exp()).sum::<f64>().ln();
        let log_p = clamp_below(z(label as usize) - lse, floor);
        total += wt as f64 * -log_p;
    }
    Ok((total, kept))
}

fn ce_backward(
    logits: &Tensor,
    labels: &[Option<u16>],
    weights: &[f32],
    scale: f64,
) -> Result<Tensor> {
    let [b, k, h, w] = logits.dims4()?;
    let plane = h * w;
    let src = logits.data();
    let floor = PROB_FLOOR.ln();
    let mut out = vec![0.0f32; src.len()];
    let mut probs = vec![0.0f64; k];
    for i in 0..b * plane {
        let Some(label) = labels[i] else { continue };
        let (bi, p) = (i / plane, i % plane);
        let idx = |c: usize| bi * k * plane + c * plane + p;
        let max = (0..k).map(|c| src[idx(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (c, slot) in probs.iter_mut().enumerate() {
            *slot = (src[idx(c)] as f64 - max).exp();
            total += *slot;
        }
        if (probs[label as usize] / total).ln() < floor {
            continue;
        }
        let coeff = scale * weights[i] as f64;
        for (c, &e) in probs.iter().enumerate() {
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            out[idx(c)] = (coeff * (e / total - onehot)) as f32;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Weighted cross-entropy computed directly from probabilities, with the
/// same normalization as [`Tape::weighted_pixel_ce`].
pub fn weighted_pixel_ce_probs(
    probs: &Tensor,
    labels: &[Option<u16>],
    weights: &[f32],
) -> Result<f64> {
    let [b, k, h, w] = probs.dims4()?;
    check_ce_inputs([b, k, h, w], labels, weights)?;
    let plane = h * w;
    let mut total = 0.0f64;
    let mut kept = 0usize;
    for (i, (label, &wt)) in labels.iter().zip(weights).enumerate() {
        let Some(label) = *label else { continue };
        kept += 1;
        let (bi, p) = (i / plane, i % plane);
        let prob = probs.data()[bi * k * plane + label as usize * plane + p] as f64;
        total += wt as f64 * -clamp_below(prob, PROB_FLOOR).ln();
    }
    Ok(total / kept.max(1) as f64)
}
