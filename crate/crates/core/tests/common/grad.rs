//! Finite-difference cases for every primitive op, both losses and a small
//! two-layer network. Each case returns its worst relative error over all
//! instances; the objective for a tensor-valued op is a random projection
//! `Σ r·y` accumulated in f64.

use super::{max_fd_error, random_tensor, rng};
use gta_seg::numkernel::{Tape, Tensor, Var};
use gta_seg::pseudolabel::{label_batch, supervised_loss, unsupervised_loss, ReweightConfig, ThresholdRule};
use gta_seg::segmodel::{forward, init_model, ParamStore, SegNetConfig};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
const PROBES: usize = 12;

/// Builds the op under test on a tape from its inputs.
type Apply<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

pub struct Case {
    pub name: &'static str,
    pub run: fn() -> f64,
}

pub const CASES: &[Case] = &[
    Case { name: "conv2d 3x3", run: conv2d_3x3 },
    Case { name: "conv2d 1x1", run: conv2d_1x1 },
    Case { name: "relu", run: relu },
    Case { name: "softmax", run: softmax },
    Case { name: "sum", run: sum },
    Case { name: "scale", run: scale },
    Case { name: "add", run: add },
    Case { name: "mul", run: mul },
    Case { name: "weighted pixel CE", run: weighted_pixel_ce },
    Case { name: "supervised loss", run: supervised },
    Case { name: "unsupervised loss", run: unsupervised },
    Case { name: "two-layer network", run: two_layer_network },
];

fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn forward_value(inputs: &[Tensor], apply: Apply) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = apply(&mut tape, &vars);
    tape.value(out).clone()
}

/// Worst relative error over all inputs of one instance.
fn check_instance(inputs: Vec<Tensor>, apply: Apply, rng: &mut ChaCha8Rng) -> f64 {
    let out_shape = forward_value(&inputs, apply).shape().to_vec();
    let r = random_tensor(rng, &out_shape, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.watched(t.clone())).collect();
    let out = apply(&mut tape, &vars);
    let rv = tape.input(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let f = |x: &Tensor| {
            let mut probe = inputs.clone();
            probe[i] = x.clone();
            project(&forward_value(&probe, apply), &r)
        };
        worst = worst.max(max_fd_error(&inputs[i], &grads.wrt(*var), PROBES, rng, &f));
    }
    worst
}

fn over_instances(seed: u64, instance: &dyn Fn(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..INSTANCES)
        .map(|i| instance(&mut rng(seed * 1000 + i)))
        .fold(0.0, f64::max)
}

fn check_op(seed: u64, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, apply: Apply) -> f64 {
    over_instances(seed, &|rng| {
        let inputs = make(rng);
        check_instance(inputs, apply, rng)
    })
}

/// Values bounded away from zero so a probe never straddles the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random_range(0.0..1.0) < 0.5 { -m } else { m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn conv2d_3x3() -> f64 {
    check_op(
        1,
        &|rng| {
            vec![
                random_tensor(rng, &[2, 3, 5, 4], 1.0),
                // Fan-in scale, as the network initializes kernels.
                random_tensor(rng, &[2, 3, 3, 3], 27f32.sqrt().recip()),
                random_tensor(rng, &[2], 0.1),
            ]
        },
        &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
    )
}

fn conv2d_1x1() -> f64 {
    check_op(
        2,
        &|rng| {
            vec![
                random_tensor(rng, &[2, 4, 3, 3], 1.0),
                random_tensor(rng, &[3, 4, 1, 1], 0.5),
                random_tensor(rng, &[3], 0.5),
            ]
        },
        &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
    )
}

fn relu() -> f64 {
    check_op(3, &|rng| vec![away_from_zero(rng, &[2, 3, 4])], &|t, v| t.relu(v[0]))
}

fn softmax() -> f64 {
    check_op(
        4,
        &|rng| vec![random_tensor(rng, &[2, 4, 3, 2], 2.0)],
        &|t, v| t.softmax_channel(v[0]).unwrap(),
    )
}

fn sum() -> f64 {
    check_op(5, &|rng| vec![random_tensor(rng, &[3, 5], 1.0)], &|t, v| t.sum(v[0]))
}

fn scale() -> f64 {
    check_op(6, &|rng| vec![random_tensor(rng, &[4, 3], 1.0)], &|t, v| t.scale(v[0], -1.7))
}

fn add() -> f64 {
    check_op(
        7,
        &|rng| vec![random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0)],
        &|t, v| t.add(v[0], v[1]).unwrap(),
    )
}

fn mul() -> f64 {
    check_op(
        8,
        &|rng| vec![random_tensor(rng, &[3, 4], 1.0), random_tensor(rng, &[3, 4], 1.0)],
        &|t, v| t.mul(v[0], v[1]).unwrap(),
    )
}

/// Labels and weights are fixed per instance; only the logits move.
fn weighted_pixel_ce() -> f64 {
    over_instances(9, &|rng| {
        let (b, k, h, w) = (2, 3, 3, 3);
        let labels: Vec<Option<u16>> = (0..b * h * w)
            .map(|_| (rng.random_range(0.0..1.0) < 0.75).then(|| rng.random_range(0..k as u16)))
            .collect();
        let weights: Vec<f32> = labels
            .iter()
            .map(|l| if l.is_some() { rng.random_range(0.2..2.0) } else { 0.0 })
            .collect();
        let logits = random_tensor(rng, &[b, k, h, w], 2.0);
        let apply = |t: &mut Tape, v: &[Var]| t.weighted_pixel_ce(v[0], &labels, &weights).unwrap();
        check_instance(vec![logits], &apply, rng)
    })
}

fn supervised() -> f64 {
    over_instances(10, &|rng| {
        let (b, k, h, w) = (2, 4, 3, 3);
        let gt: Vec<u16> = (0..b * h * w).map(|_| rng.random_range(0..k as u16)).collect();
        let logits = random_tensor(rng, &[b, k, h, w], 2.0);
        let apply = |t: &mut Tape, v: &[Var]| supervised_loss(t, v[0], &gt).unwrap();
        check_instance(vec![logits], &apply, rng)
    })
}

/// Pseudo-labels come from a separate teacher output and stay fixed.
fn unsupervised() -> f64 {
    over_instances(11, &|rng| {
        let (b, k, h, w) = (2, 3, 4, 3);
        let teacher = random_tensor(rng, &[b, k, h, w], 3.0);
        let map = label_batch(&teacher, ThresholdRule::Quantile(0.2), &ReweightConfig::default()).unwrap();
        let logits = random_tensor(rng, &[b, k, h, w], 2.0);
        let apply = |t: &mut Tape, v: &[Var]| unsupervised_loss(t, v[0], &map).unwrap();
        check_instance(vec![logits], &apply, rng)
    })
}

/// Mean pixel cross-entropy evaluated in f64 from the network's logits,
/// so the finite differences are not limited by a rounded f32 loss.
fn net_loss(params: &ParamStore, name: &str, value: &Tensor, images: &Tensor, gt: &[u16]) -> f64 {
    let mut probe = params.clone();
    probe.get_mut(name).unwrap().tensor = value.clone();
    let logits = forward(&probe, images).unwrap();
    let [b, k, h, w] = logits.dims4().unwrap();
    let plane = h * w;
    let z = logits.data();
    let mut total = 0.0f64;
    for bi in 0..b {
        for p in 0..plane {
            let at = |c: usize| z[bi * k * plane + c * plane + p] as f64;
            let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
            total += lse - at(gt[bi * plane + p] as usize);
        }
    }
    total / (b * plane) as f64
}

/// Smallest |pre-activation| of the hidden layer.
fn kink_margin(params: &ParamStore, images: &Tensor) -> f32 {
    let mut tape = Tape::new();
    let x = tape.input(images.clone());
    let k = tape.input(params.get("block0.weight").unwrap().tensor.clone());
    let b = tape.input(params.get("block0.bias").unwrap().tensor.clone());
    let z = tape.conv2d(x, k, b).unwrap();
    tape.value(z).data().iter().fold(f32::INFINITY, |m, v| m.min(v.abs()))
}

/// Conv + ReLU + 1×1 head, gradients with respect to every parameter.
/// Instances are redrawn until no hidden pre-activation lies within 1e-2
/// of the ReLU kink; a 1e-3 weight probe on unit-scale inputs cannot
/// cross it then.
fn two_layer_network() -> f64 {
    let config = SegNetConfig {
        in_channels: 2,
        hidden: vec![3],
        classes: 3,
        partition_boundary: None,
    };
    over_instances(12, &|rng| {
        let (params, images) = loop {
            let mut params = init_model(&config, rng.random()).unwrap();
            // Non-zero biases so every parameter has a gradient path.
            for entry in params.iter_mut() {
                if entry.name.ends_with("bias") {
                    entry.tensor = random_tensor(rng, entry.tensor.shape(), 0.3);
                }
            }
            let images = random_tensor(rng, &[2, 2, 4, 4], 1.0);
            if kink_margin(&params, &images) > 1e-2 {
                break (params, images);
            }
        };
        let gt: Vec<u16> = (0..2 * 16).map(|_| rng.random_range(0..3u16)).collect();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let x = tape.input(images.clone());
        let logits = bound.forward(&mut tape, x).unwrap();
        let loss = supervised_loss(&mut tape, logits, &gt).unwrap();
        let grads = tape.backward(loss).unwrap();

        let names: Vec<String> = params.iter().map(|e| e.name.clone()).collect();
        let mut worst = 0.0f64;
        for name in &names {
            let value = params.get(name).unwrap().tensor.clone();
            let f = |x: &Tensor| net_loss(&params, name, x, &images, &gt);
            worst = worst.max(max_fd_error(&value, grads.param(name).unwrap(), 5, rng, &f));
        }
        worst
    })
}
