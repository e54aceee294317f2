//! Dense and convolutional layers: parameter storage, seeded init, and
//! tape registration with per-call freeze control.

use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use super::Result;
use crate::autodiff::{Attrs, NodeId, OpKind, Padding, Tape, Tensor};

/// Whether a sub-network's parameters receive gradients this pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reg {
    Train,
    Frozen,
}

/// Tape node ids of the registered parameters, aligned with the model's
/// canonical parameter order. Frozen parameters occupy a `None` slot, which
/// the trainer reads as "gradient is zero, skip the update".
#[derive(Debug, Default)]
pub struct Bound {
    pub ids: Vec<Option<NodeId>>,
}

pub(crate) fn register(tape: &mut Tape, t: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
    match reg {
        Reg::Train => {
            let r = tape.param(t)?;
            bound.ids.push(r.node_id());
            Ok(r)
        }
        Reg::Frozen => {
            bound.ids.push(None);
            Ok(tape.constant(t)?)
        }
    }
}

/// Fully connected layer computing `x @ w + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    /// He-normal initialization, suited to the relu stacks used here.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::from_vec(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .expect("init shape");
        Dense { w, b: Tensor::zeros(vec![fan_out]) }
    }

    pub fn apply(&self, tape: &mut Tape, x: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
        let w = register(tape, &self.w, reg, bound)?;
        let b = register(tape, &self.b, reg, bound)?;
        let xw = tape.forward(OpKind::Matmul, &[x, &w], &Attrs::default())?;
        Ok(tape.forward(OpKind::Add, &[&xw, &b], &Attrs::default())?)
    }
}

/// 3x3 stride-1 convolution with "same" padding and bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv {
    pub fn init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::from_vec(
            vec![c_out, c_in, 3, 3],
            (0..c_out * fan_in).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .expect("init shape");
        Conv { w, b: Tensor::zeros(vec![c_out]) }
    }

    pub fn apply(&self, tape: &mut Tape, x: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
        let w = register(tape, &self.w, reg, bound)?;
        let b = register(tape, &self.b, reg, bound)?;
        Ok(tape.forward(OpKind::Conv2d, &[x, &w, &b], &Attrs::padding(Padding::Same))?)
    }
}

pub(crate) fn relu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    Ok(tape.forward(OpKind::Relu, &[x], &Attrs::default())?)
}

pub(crate) fn sigmoid(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    Ok(tape.forward(OpKind::Sigmoid, &[x], &Attrs::default())?)
}

pub(crate) fn maxpool(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    Ok(tape.forward(OpKind::Maxpool2x2, &[x], &Attrs::default())?)
}

pub(crate) fn reshape(tape: &mut Tape, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    Ok(tape.forward(OpKind::Reshape, &[x], &Attrs::shape(shape))?)
}
