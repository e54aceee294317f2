//! Central-difference verification of every tape op.
//!
//! Each check builds the scalar probe `L = mse(op(inputs), target)` with a
//! fixed random target, differentiates it once analytically through the
//! tape and once numerically coordinate by coordinate, and reports the
//! worst relative disagreement. Points too close to a kink (relu, maxpool
//! ties, clip boundaries) are re-sampled so the comparison is made where
//! the op is differentiable.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::{Attrs, OpKind, Padding, Tape};
use super::tensor::Tensor;
use super::{AutodiffError, Result};
use crate::rng::stream_rng;

const STEP: f64 = 1e-5;
/// Minimum distance from a kink; central differences with step `STEP` must
/// not straddle the non-differentiable point.
const KINK_GUARD: f64 = 1e-4;
const MAX_RESAMPLES: usize = 100;

/// Every op the tape supports, in a fixed report order.
pub const ALL_OPS: [OpKind; 17] = [
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Matmul,
    OpKind::Conv2d,
    OpKind::Maxpool2x2,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::Exp,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Mse,
    OpKind::SoftmaxCrossEntropy,
    OpKind::GaussianKl,
    OpKind::Reparameterize,
    OpKind::Clip01,
];

/// Canonical input shapes used by the per-op check in the CLI table.
pub fn default_shapes(op: OpKind) -> Vec<Vec<usize>> {
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Mse => vec![vec![3, 4], vec![3, 4]],
        OpKind::Matmul => vec![vec![3, 4], vec![4, 2]],
        OpKind::Conv2d => vec![vec![2, 2, 6, 6], vec![3, 2, 3, 3], vec![3]],
        OpKind::Maxpool2x2 => vec![vec![1, 2, 4, 4]],
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Exp | OpKind::Clip01 | OpKind::Reshape => {
            vec![vec![4, 4]]
        }
        OpKind::Concat => vec![vec![3, 2], vec![3, 3]],
        OpKind::SoftmaxCrossEntropy => vec![vec![4, 5]],
        OpKind::GaussianKl => vec![vec![4, 3], vec![4, 3]],
        OpKind::Reparameterize => vec![vec![4, 3], vec![4, 3], vec![4, 3]],
    }
}

fn attrs_for(op: OpKind, shapes: &[Vec<usize>], labels: Option<Vec<usize>>) -> Attrs {
    match op {
        OpKind::Conv2d => {
            let k = &shapes[1];
            if k[2] % 2 == 1 && k[3] % 2 == 1 {
                Attrs::padding(Padding::Same)
            } else {
                Attrs::padding(Padding::Valid)
            }
        }
        OpKind::Reshape => {
            let mut rev: Vec<usize> = shapes[0].clone();
            rev.reverse();
            Attrs::shape(rev)
        }
        OpKind::Concat => Attrs::axis(if shapes[0].len() >= 2 { 1 } else { 0 }),
        OpKind::SoftmaxCrossEntropy => Attrs::labels(labels.expect("labels sampled for cross entropy")),
        _ => Attrs::default(),
    }
}

fn sample_inputs(op: OpKind, shapes: &[Vec<usize>], rng: &mut impl Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| match op {
                    OpKind::Clip01 => rng.gen_range(-0.5..1.5),
                    _ => rng.sample::<f64, _>(StandardNormal),
                })
                .collect();
            Tensor::from_vec(s.clone(), data).expect("sampled shape")
        })
        .collect()
}

/// Distance from the sampled point to the nearest kink, infinite for
/// everywhere-differentiable ops.
fn kink_distance(op: OpKind, inputs: &[Tensor]) -> f64 {
    match op {
        OpKind::Relu => inputs[0].data().iter().fold(f64::INFINITY, |d, &v| d.min(v.abs())),
        OpKind::Clip01 => inputs[0]
            .data()
            .iter()
            .fold(f64::INFINITY, |d, &v| d.min(v.abs()).min((v - 1.0).abs())),
        OpKind::Maxpool2x2 => {
            let s = inputs[0].shape();
            let (maps, h, w) = (s[0] * s[1], s[2], s[3]);
            let x = inputs[0].data();
            let mut gap = f64::INFINITY;
            for m in 0..maps {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let base = m * h * w + 2 * i * w + 2 * j;
                        let mut vals = [x[base], x[base + 1], x[base + w], x[base + w + 1]];
                        vals.sort_by(f64::total_cmp);
                        gap = gap.min(vals[3] - vals[2]);
                    }
                }
            }
            gap
        }
        _ => f64::INFINITY,
    }
}

fn forward_loss(op: OpKind, inputs: &[Tensor], attrs: &Attrs, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = bound.iter().collect();
    let out = tape.forward(op, &refs, attrs)?;
    let t = tape.constant(target)?;
    let loss = tape.forward(OpKind::Mse, &[&out, &t], &Attrs::default())?;
    Ok(loss.item())
}

fn analytic_grads(op: OpKind, inputs: &[Tensor], attrs: &Attrs, target: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = bound.iter().collect();
    let out = tape.forward(op, &refs, attrs)?;
    let t = tape.constant(target)?;
    let loss = tape.forward(OpKind::Mse, &[&out, &t], &Attrs::default())?;
    let grads = tape.backward(&loss)?;
    Ok(bound.iter().map(|b| grads.get_or_zero(b)).collect())
}

/// Worst relative error between analytic and central-difference gradients
/// of `op` at a random point drawn from `seed`.
pub fn finite_diff_check(op: OpKind, input_shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 0);
    let mut inputs = sample_inputs(op, input_shapes, &mut rng);
    let mut attempts = 0;
    while kink_distance(op, &inputs) < KINK_GUARD {
        attempts += 1;
        if attempts > MAX_RESAMPLES {
            return Err(AutodiffError::KinkUnavoidable);
        }
        inputs = sample_inputs(op, input_shapes, &mut rng);
    }

    let labels = if op == OpKind::SoftmaxCrossEntropy {
        let classes = input_shapes[0][1];
        let mut label_rng = stream_rng(seed, 2);
        Some((0..input_shapes[0][0]).map(|_| label_rng.gen_range(0..classes)).collect())
    } else {
        None
    };
    let attrs = attrs_for(op, input_shapes, labels);

    // Fixed random target turns any output shape into a smooth scalar probe.
    let mut target_rng = stream_rng(seed, 1);
    let probe = {
        let mut tape = Tape::new();
        let bound: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = bound.iter().collect();
        tape.forward(op, &refs, &attrs)?
    };
    let target = Tensor::from_vec(
        probe.shape().to_vec(),
        (0..probe.numel()).map(|_| target_rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;

    let analytic = analytic_grads(op, &inputs, &attrs, &target)?;

    let mut worst: f64 = 0.0;
    for (idx, grad) in analytic.iter().enumerate() {
        for coord in 0..grad.numel() {
            let mut plus = inputs.clone();
            plus[idx].data_mut()[coord] += STEP;
            let mut minus = inputs.clone();
            minus[idx].data_mut()[coord] -= STEP;
            let numeric = (forward_loss(op, &plus, &attrs, &target)? - forward_loss(op, &minus, &attrs, &target)?)
                / (2.0 * STEP);
            let a = grad.data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Runs the canonical shape check for every op; the CLI renders this as the
/// gradcheck table.
pub fn check_all_ops(seed: u64) -> Result<Vec<(OpKind, f64)>> {
    ALL_OPS
        .iter()
        .map(|&op| finite_diff_check(op, &default_shapes(op), seed).map(|e| (op, e)))
        .collect()
}
