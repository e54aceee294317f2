//! The recording tape: forward ops append nodes, backward replays them in
//! reverse id order and accumulates vector-Jacobian products.
//!
//! Node ids are insertion-ordered, so parents always precede children and a
//! single reverse sweep visits every node after all of its consumers. The
//! tape never mutates once written; `backward` may be replayed any number
//! of times and returns bit-identical gradients each time.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use super::{AutodiffError, NodeId, Result};

/// Operations the tape can record. `forward` rejects anything whose inputs
/// or attributes do not match the documented shape conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2d,
    Maxpool2x2,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Reshape,
    Concat,
    Mse,
    SoftmaxCrossEntropy,
    GaussianKl,
    Reparameterize,
    Clip01,
}

/// Padding mode for stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Per-op attributes. Only the fields an op consumes need to be set.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub padding: Option<Padding>,
    pub target_shape: Option<Vec<usize>>,
    pub axis: Option<usize>,
    pub labels: Option<Vec<usize>>,
}

impl Attrs {
    pub fn padding(mode: Padding) -> Self {
        Attrs { padding: Some(mode), ..Default::default() }
    }

    pub fn shape(shape: Vec<usize>) -> Self {
        Attrs { target_shape: Some(shape), ..Default::default() }
    }

    pub fn axis(axis: usize) -> Self {
        Attrs { axis: Some(axis), ..Default::default() }
    }

    pub fn labels(labels: Vec<usize>) -> Self {
        Attrs { labels: Some(labels), ..Default::default() }
    }
}

/// Resolved per-node record: everything backward needs, nothing more.
#[derive(Clone, Debug)]
enum NodeKind {
    LeafParam,
    LeafVar,
    LeafConst,
    Add,
    Sub,
    Mul,
    Matmul { n: usize, k: usize, m: usize },
    Conv2d { geom: ConvGeom, has_bias: bool },
    Maxpool2x2 { arg: Vec<usize> },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Clip01,
    Reshape,
    Concat { axis: usize },
    Mse,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    GaussianKl,
    Reparameterize,
    /// Externally differentiated scalar with gradients captured at record
    /// time; used to splice non-tape losses (persistence terms) into a graph.
    Splice { input_grads: Vec<Tensor> },
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient table produced by a backward sweep, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a recorded tensor, if any reached it.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.node_id().and_then(|id| self.by_id(id))
    }

    /// Gradient of a recorded tensor, or a zero tensor of its shape when the
    /// loss never reached it.
    pub fn get_or_zero(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => g.detached(),
            None => Tensor::zeros(t.shape().to_vec()),
        }
    }
}

/// A Wengert-list tape confined to one thread of execution.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if !all_finite_par(&data) {
            return Err(AutodiffError::NonFinite);
        }
        let requires_grad = match kind {
            NodeKind::LeafParam | NodeKind::LeafVar => true,
            NodeKind::LeafConst => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        let id = self.nodes.len();
        let value = Tensor::from_vec(shape, data)?;
        let handle = value.with_node(id);
        self.nodes.push(Node { kind, inputs, value, requires_grad });
        Ok(handle)
    }

    /// Registers a trainable parameter leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Tensor> {
        self.push(NodeKind::LeafParam, vec![], t.shape().to_vec(), t.data().to_vec())
    }

    /// Registers a gradient-tracked input leaf (attack variables).
    pub fn var(&mut self, t: &Tensor) -> Result<Tensor> {
        self.push(NodeKind::LeafVar, vec![], t.shape().to_vec(), t.data().to_vec())
    }

    /// Registers a constant leaf; gradients stop here.
    pub fn constant(&mut self, t: &Tensor) -> Result<Tensor> {
        self.push(NodeKind::LeafConst, vec![], t.shape().to_vec(), t.data().to_vec())
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Tensor> {
        self.constant(&Tensor::scalar(v))
    }

    fn resolve(&mut self, t: &Tensor) -> Result<(NodeId, Vec<usize>)> {
        match t.node_id() {
            Some(id) if id < self.nodes.len() => Ok((id, self.nodes[id].value.shape().to_vec())),
            Some(_) => Err(AutodiffError::DanglingNode),
            // Detached operands enter the tape as constants.
            None => {
                let c = self.constant(t)?;
                Ok((c.node_id().unwrap(), c.shape().to_vec()))
            }
        }
    }

    fn value_of(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Records `op_kind` over `inputs`, returning the output tensor bound to
    /// the new node.
    pub fn forward(&mut self, op_kind: OpKind, inputs: &[&Tensor], attrs: &Attrs) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            let (id, _) = self.resolve(t)?;
            ids.push(id);
        }
        match op_kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => self.elementwise_binary(op_kind, &ids),
            OpKind::Matmul => self.matmul_op(&ids),
            OpKind::Conv2d => self.conv2d_op(&ids, attrs),
            OpKind::Maxpool2x2 => self.maxpool_op(&ids),
            OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Exp | OpKind::Clip01 => {
                self.elementwise_unary(op_kind, &ids)
            }
            OpKind::Reshape => self.reshape_op(&ids, attrs),
            OpKind::Concat => self.concat_op(&ids, attrs),
            OpKind::Mse => self.mse_op(&ids),
            OpKind::SoftmaxCrossEntropy => self.softmax_ce_op(&ids, attrs),
            OpKind::GaussianKl => self.gaussian_kl_op(&ids),
            OpKind::Reparameterize => self.reparameterize_op(&ids),
        }
    }

    /// Splices an externally computed scalar into the graph. Backward
    /// multiplies the upstream scalar gradient into `input_grads[i]` and
    /// routes it to `inputs[i]`; the pairing underneath is treated as
    /// locally constant.
    pub fn splice(&mut self, inputs: &[&Tensor], value: f64, input_grads: Vec<Tensor>) -> Result<Tensor> {
        if inputs.len() != input_grads.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "splice got {} inputs but {} gradients",
                inputs.len(),
                input_grads.len()
            )));
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for (t, g) in inputs.iter().zip(&input_grads) {
            let (id, shape) = self.resolve(t)?;
            if g.shape() != shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "splice gradient shape {:?} does not match input shape {:?}",
                    g.shape(),
                    shape
                )));
            }
            if !g.all_finite() {
                return Err(AutodiffError::NonFinite);
            }
            ids.push(id);
        }
        self.push(NodeKind::Splice { input_grads }, ids, vec![1], vec![value])
    }

    // ---- op implementations -------------------------------------------

    fn arity(&self, ids: &[NodeId], want: usize, op: &str) -> Result<()> {
        if ids.len() != want {
            return Err(AutodiffError::ShapeMismatch(format!("{op} expects {want} inputs, got {}", ids.len())));
        }
        Ok(())
    }

    fn elementwise_binary(&mut self, op: OpKind, ids: &[NodeId]) -> Result<Tensor> {
        self.arity(ids, 2, "binary op")?;
        let (a, b) = (ids[0], ids[1]);
        let plan = BroadcastPlan::for_shapes(self.value_of(a).shape(), self.value_of(b).shape())?;
        let av = self.value_of(a).data();
        let bv = self.value_of(b).data();
        let f: fn(f64, f64) -> f64 = match op {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            OpKind::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let data = plan.apply(av, bv, f);
        let kind = match op {
            OpKind::Add => NodeKind::Add,
            OpKind::Sub => NodeKind::Sub,
            OpKind::Mul => NodeKind::Mul,
            _ => unreachable!(),
        };
        self.push(kind, vec![a, b], plan.out_shape.clone(), data)
    }

    fn matmul_op(&mut self, ids: &[NodeId]) -> Result<Tensor> {
        self.arity(ids, 2, "matmul")?;
        let (a, b) = (ids[0], ids[1]);
        let sa = self.value_of(a).shape().to_vec();
        let sb = self.value_of(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul_nn(self.value_of(a).data(), self.value_of(b).data(), n, k, m);
        self.push(NodeKind::Matmul { n, k, m }, vec![a, b], vec![n, m], data)
    }

    fn conv2d_op(&mut self, ids: &[NodeId], attrs: &Attrs) -> Result<Tensor> {
        if ids.len() != 2 && ids.len() != 3 {
            return Err(AutodiffError::ShapeMismatch(format!("conv2d expects 2 or 3 inputs, got {}", ids.len())));
        }
        let padding = attrs.padding.ok_or_else(|| AutodiffError::UnsupportedOp("conv2d requires a padding mode".into()))?;
        let sx = self.value_of(ids[0]).shape().to_vec();
        let sw = self.value_of(ids[1]).shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(AutodiffError::ShapeMismatch(format!("conv2d of x {sx:?} by w {sw:?}")));
        }
        let (batch, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw, oh, ow) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(AutodiffError::UnsupportedOp("\"same\" padding requires odd kernel dims".into()));
                }
                (kh / 2, kw / 2, h, w)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(AutodiffError::ShapeMismatch(format!("valid conv kernel {kh}x{kw} larger than input {h}x{w}")));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };
        let geom = ConvGeom { batch, c_in, h, w, c_out, kh, kw, ph, pw, oh, ow };
        let has_bias = ids.len() == 3;
        let bias = if has_bias {
            let sb = self.value_of(ids[2]).shape();
            if sb != [c_out] {
                return Err(AutodiffError::ShapeMismatch(format!("conv2d bias shape {sb:?}, want [{c_out}]")));
            }
            Some(self.value_of(ids[2]).data().to_vec())
        } else {
            None
        };
        let data = kernels::conv2d_fwd(self.value_of(ids[0]).data(), self.value_of(ids[1]).data(), bias.as_deref(), &geom);
        self.push(NodeKind::Conv2d { geom, has_bias }, ids.to_vec(), vec![batch, c_out, oh, ow], data)
    }

    fn maxpool_op(&mut self, ids: &[NodeId]) -> Result<Tensor> {
        self.arity(ids, 1, "maxpool2x2")?;
        let s = self.value_of(ids[0]).shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(AutodiffError::ShapeMismatch(format!("maxpool2x2 needs [n,c,even,even], got {s:?}")));
        }
        let (out, arg) = kernels::maxpool2x2_fwd(self.value_of(ids[0]).data(), s[0] * s[1], s[2], s[3]);
        self.push(NodeKind::Maxpool2x2 { arg }, ids.to_vec(), vec![s[0], s[1], s[2] / 2, s[3] / 2], out)
    }

    fn elementwise_unary(&mut self, op: OpKind, ids: &[NodeId]) -> Result<Tensor> {
        self.arity(ids, 1, "unary op")?;
        let x = self.value_of(ids[0]);
        let shape = x.shape().to_vec();
        // exp saturates at the largest finite exponent instead of
        // overflowing to infinity.
        let f: fn(f64) -> f64 = match op {
            OpKind::Relu => |v| if v > 0.0 { v } else { 0.0 },
            OpKind::Sigmoid => stable_sigmoid,
            OpKind::Tanh => f64::tanh,
            OpKind::Exp => |v| v.min(709.0).exp(),
            OpKind::Clip01 => |v| v.clamp(0.0, 1.0),
            _ => unreachable!(),
        };
        let data = map_par(x.data(), f);
        let kind = match op {
            OpKind::Relu => NodeKind::Relu,
            OpKind::Sigmoid => NodeKind::Sigmoid,
            OpKind::Tanh => NodeKind::Tanh,
            OpKind::Exp => NodeKind::Exp,
            OpKind::Clip01 => NodeKind::Clip01,
            _ => unreachable!(),
        };
        self.push(kind, ids.to_vec(), shape, data)
    }

    fn reshape_op(&mut self, ids: &[NodeId], attrs: &Attrs) -> Result<Tensor> {
        self.arity(ids, 1, "reshape")?;
        let target = attrs
            .target_shape
            .clone()
            .ok_or_else(|| AutodiffError::UnsupportedOp("reshape requires a target shape".into()))?;
        let x = self.value_of(ids[0]);
        if target.iter().product::<usize>() != x.numel() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                x.shape(),
                target
            )));
        }
        let data = x.data().to_vec();
        self.push(NodeKind::Reshape, ids.to_vec(), target, data)
    }

    fn concat_op(&mut self, ids: &[NodeId], attrs: &Attrs) -> Result<Tensor> {
        if ids.len() < 2 {
            return Err(AutodiffError::ShapeMismatch("concat expects at least 2 inputs".into()));
        }
        let axis = attrs.axis.ok_or_else(|| AutodiffError::UnsupportedOp("concat requires an axis".into()))?;
        let first = self.value_of(ids[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::ShapeMismatch(format!("concat axis {axis} out of rank {}", first.len())));
        }
        let mut axis_total = 0;
        for &id in ids {
            let s = self.value_of(id).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(AutodiffError::ShapeMismatch(format!("concat of {s:?} with {first:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let row = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0;
            for &id in ids {
                let v = self.value_of(id);
                let span = v.shape()[axis] * inner;
                data[o * row + offset..o * row + offset + span].copy_from_slice(&v.data()[o * span..(o + 1) * span]);
                offset += span;
            }
        }
        self.push(NodeKind::Concat { axis }, ids.to_vec(), out_shape, data)
    }

    fn mse_op(&mut self, ids: &[NodeId]) -> Result<Tensor> {
        self.arity(ids, 2, "mse")?;
        let a = self.value_of(ids[0]);
        let b = self.value_of(ids[1]);
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch(format!("mse of {:?} vs {:?}", a.shape(), b.shape())));
        }
        let n = a.numel() as f64;
        let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(NodeKind::Mse, ids.to_vec(), vec![1], vec![sum / n])
    }

    fn softmax_ce_op(&mut self, ids: &[NodeId], attrs: &Attrs) -> Result<Tensor> {
        self.arity(ids, 1, "softmax_cross_entropy")?;
        let labels = attrs
            .labels
            .clone()
            .ok_or_else(|| AutodiffError::UnsupportedOp("softmax_cross_entropy requires labels".into()))?;
        let logits = self.value_of(ids[0]);
        let s = logits.shape().to_vec();
        if s.len() != 2 || labels.len() != s[0] || labels.iter().any(|&y| y >= s[1]) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "softmax_cross_entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &logits.data()[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for (p, &l) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (l - max).exp();
                denom += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= denom;
            }
            total += denom.ln() + max - row[labels[i]];
        }
        self.push(
            NodeKind::SoftmaxCrossEntropy { labels, probs },
            ids.to_vec(),
            vec![1],
            vec![total / n as f64],
        )
    }

    fn gaussian_kl_op(&mut self, ids: &[NodeId]) -> Result<Tensor> {
        self.arity(ids, 2, "gaussian_kl")?;
        let mu = self.value_of(ids[0]);
        let lv = self.value_of(ids[1]);
        if mu.shape() != lv.shape() || mu.shape().is_empty() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "gaussian_kl of {:?} vs {:?}",
                mu.shape(),
                lv.shape()
            )));
        }
        let n = mu.shape()[0] as f64;
        let mut total = 0.0;
        for (m, l) in mu.data().iter().zip(lv.data()) {
            total += 0.5 * (m * m + l.min(709.0).exp() - 1.0 - l);
        }
        self.push(NodeKind::GaussianKl, ids.to_vec(), vec![1], vec![total / n])
    }

    fn reparameterize_op(&mut self, ids: &[NodeId]) -> Result<Tensor> {
        self.arity(ids, 3, "reparameterize")?;
        let mu = self.value_of(ids[0]);
        let lv = self.value_of(ids[1]);
        let eps = self.value_of(ids[2]);
        if mu.shape() != lv.shape() || mu.shape() != eps.shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "reparameterize of mu {:?}, logvar {:?}, noise {:?}",
                mu.shape(),
                lv.shape(),
                eps.shape()
            )));
        }
        let shape = mu.shape().to_vec();
        let data: Vec<f64> = mu
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((m, l), e)| m + (l.min(709.0) * 0.5).exp() * e)
            .collect();
        self.push(NodeKind::Reparameterize, ids.to_vec(), shape, data)
    }

    // ---- backward ------------------------------------------------------

    /// Gradients of a scalar loss with respect to every node that feeds it.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let id = loss.node_id().ok_or(AutodiffError::DanglingNode)?;
        if id >= self.nodes.len() {
            return Err(AutodiffError::DanglingNode);
        }
        if !self.nodes[id].value.is_scalar() {
            return Err(AutodiffError::NotScalarLoss(self.nodes[id].value.numel()));
        }
        self.backward_seeded(&[(id, Tensor::scalar(1.0))])
    }

    /// Backward from explicit (node, cotangent) seeds. Seeds on distinct
    /// nodes accumulate exactly like interior gradient flow, which lets
    /// callers differentiate objectives assembled partly off-tape.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let node = self.nodes.get(*id).ok_or(AutodiffError::DanglingNode)?;
            if seed.shape() != node.value.shape() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads[*id], seed.data(), seed.shape());
        }
        for id in (0..self.nodes.len()).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        let parents = &node.inputs;
        let send = |pid: NodeId, data: Vec<f64>, grads: &mut Vec<Option<Tensor>>| {
            if self.nodes[pid].requires_grad {
                accumulate(&mut grads[pid], &data, self.nodes[pid].value.shape());
            }
        };
        match &node.kind {
            NodeKind::LeafParam | NodeKind::LeafVar | NodeKind::LeafConst => {}
            NodeKind::Add => {
                let plan = BroadcastPlan::for_shapes(self.value_of(parents[0]).shape(), self.value_of(parents[1]).shape()).unwrap();
                send(parents[0], plan.reduce_to_lhs(g.data()), grads);
                send(parents[1], plan.reduce_to_rhs(g.data()), grads);
            }
            NodeKind::Sub => {
                let plan = BroadcastPlan::for_shapes(self.value_of(parents[0]).shape(), self.value_of(parents[1]).shape()).unwrap();
                send(parents[0], plan.reduce_to_lhs(g.data()), grads);
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                send(parents[1], plan.reduce_to_rhs(&neg), grads);
            }
            NodeKind::Mul => {
                let a = self.value_of(parents[0]);
                let b = self.value_of(parents[1]);
                let plan = BroadcastPlan::for_shapes(a.shape(), b.shape()).unwrap();
                let gb = plan.apply_rhs_expanded(g.data(), b.data());
                send(parents[0], plan.reduce_to_lhs(&gb), grads);
                let ga = plan.apply_lhs_expanded(g.data(), a.data());
                send(parents[1], plan.reduce_to_rhs(&ga), grads);
            }
            NodeKind::Matmul { n, k, m } => {
                let a = self.value_of(parents[0]).data();
                let b = self.value_of(parents[1]).data();
                send(parents[0], kernels::matmul_nt(g.data(), b, *n, *m, *k), grads);
                send(parents[1], kernels::matmul_tn(a, g.data(), *n, *k, *m), grads);
            }
            NodeKind::Conv2d { geom, has_bias } => {
                let x = self.value_of(parents[0]).data();
                let w = self.value_of(parents[1]).data();
                send(parents[0], kernels::conv2d_bwd_x(g.data(), w, geom), grads);
                send(parents[1], kernels::conv2d_bwd_w(x, g.data(), geom), grads);
                if *has_bias {
                    send(parents[2], kernels::conv2d_bwd_b(g.data(), geom), grads);
                }
            }
            NodeKind::Maxpool2x2 { arg } => {
                let in_len = self.value_of(parents[0]).numel();
                send(parents[0], kernels::maxpool2x2_bwd(g.data(), arg, in_len), grads);
            }
            NodeKind::Relu => {
                let x = self.value_of(parents[0]).data();
                let dx: Vec<f64> = g.data().iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                send(parents[0], dx, grads);
            }
            NodeKind::Sigmoid => {
                let y = node.value.data();
                let dx: Vec<f64> = g.data().iter().zip(y).map(|(gv, &yv)| gv * yv * (1.0 - yv)).collect();
                send(parents[0], dx, grads);
            }
            NodeKind::Tanh => {
                let y = node.value.data();
                let dx: Vec<f64> = g.data().iter().zip(y).map(|(gv, &yv)| gv * (1.0 - yv * yv)).collect();
                send(parents[0], dx, grads);
            }
            NodeKind::Exp => {
                let y = node.value.data();
                let dx: Vec<f64> = g.data().iter().zip(y).map(|(gv, &yv)| gv * yv).collect();
                send(parents[0], dx, grads);
            }
            NodeKind::Clip01 => {
                let x = self.value_of(parents[0]).data();
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if (0.0..=1.0).contains(&xv) { *gv } else { 0.0 })
                    .collect();
                send(parents[0], dx, grads);
            }
            NodeKind::Reshape => {
                send(parents[0], g.data().to_vec(), grads);
            }
            NodeKind::Concat { axis } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut offset = 0;
                for &pid in parents {
                    let span = self.value_of(pid).shape()[axis] * inner;
                    let mut dp = vec![0.0; self.value_of(pid).numel()];
                    for o in 0..outer {
                        dp[o * span..(o + 1) * span].copy_from_slice(&g.data()[o * row + offset..o * row + offset + span]);
                    }
                    send(pid, dp, grads);
                    offset += span;
                }
            }
            NodeKind::Mse => {
                let a = self.value_of(parents[0]).data();
                let b = self.value_of(parents[1]).data();
                let scale = 2.0 * g.item() / a.len() as f64;
                let da: Vec<f64> = a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                send(parents[0], da, grads);
                send(parents[1], db, grads);
            }
            NodeKind::SoftmaxCrossEntropy { labels, probs } => {
                let c = node_cols(self.value_of(parents[0]).shape());
                let scale = g.item() / labels.len() as f64;
                let mut dl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * c + y] -= 1.0;
                }
                for v in &mut dl {
                    *v *= scale;
                }
                send(parents[0], dl, grads);
            }
            NodeKind::GaussianKl => {
                let mu = self.value_of(parents[0]).data();
                let lv = self.value_of(parents[1]).data();
                let n = self.value_of(parents[0]).shape()[0] as f64;
                let s = g.item() / n;
                let dmu: Vec<f64> = mu.iter().map(|m| s * m).collect();
                let dlv: Vec<f64> = lv.iter().map(|l| s * 0.5 * (l.min(709.0).exp() - 1.0)).collect();
                send(parents[0], dmu, grads);
                send(parents[1], dlv, grads);
            }
            NodeKind::Reparameterize => {
                let lv = self.value_of(parents[1]).data();
                let eps = self.value_of(parents[2]).data();
                let dmu = g.data().to_vec();
                let dlv: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(lv.iter().zip(eps))
                    .map(|(gv, (l, e))| gv * e * (l.min(709.0) * 0.5).exp() * 0.5)
                    .collect();
                let deps: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(lv)
                    .map(|(gv, l)| gv * (l.min(709.0) * 0.5).exp())
                    .collect();
                send(parents[0], dmu, grads);
                send(parents[1], dlv, grads);
                send(parents[2], deps, grads);
            }
            NodeKind::Splice { input_grads } => {
                let s = g.item();
                for (pid, ig) in parents.iter().zip(input_grads) {
                    let data: Vec<f64> = ig.data().iter().map(|v| v * s).collect();
                    send(*pid, data, grads);
                }
            }
        }
    }
}

fn node_cols(shape: &[usize]) -> usize {
    shape[1]
}

fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Rayon dispatch costs more than it saves below this element count.
const ELEMENTWISE_PAR_THRESHOLD: usize = 65_536;

fn map_par(xs: &[f64], f: fn(f64) -> f64) -> Vec<f64> {
    use rayon::prelude::*;
    if xs.len() >= ELEMENTWISE_PAR_THRESHOLD {
        xs.par_iter().with_min_len(16_384).map(|&v| f(v)).collect()
    } else {
        xs.iter().map(|&v| f(v)).collect()
    }
}

fn all_finite_par(xs: &[f64]) -> bool {
    use rayon::prelude::*;
    if xs.len() >= ELEMENTWISE_PAR_THRESHOLD {
        xs.par_chunks(16_384).all(|c| c.iter().all(|v| v.is_finite()))
    } else {
        xs.iter().all(|v| v.is_finite())
    }
}

fn accumulate(slot: &mut Option<Tensor>, data: &[f64], shape: &[usize]) {
    match slot {
        Some(t) => {
            for (o, d) in t.data_mut().iter_mut().zip(data) {
                *o += d;
            }
        }
        None => *slot = Some(Tensor::from_vec(shape.to_vec(), data.to_vec()).expect("gradient shape")),
    }
}

/// Limited broadcasting: equal shapes, either side a scalar, or one side's
/// shape a strict suffix of the other's. Covers bias rows and scalar loss
/// weights without a general broadcasting engine.
struct BroadcastPlan {
    out_shape: Vec<usize>,
    lhs_len: usize,
    rhs_len: usize,
    out_len: usize,
}

impl BroadcastPlan {
    fn for_shapes(a: &[usize], b: &[usize]) -> Result<Self> {
        let an: usize = a.iter().product();
        let bn: usize = b.iter().product();
        let compatible = a == b
            || an == 1
            || bn == 1
            || (a.len() > b.len() && a.ends_with(b))
            || (b.len() > a.len() && b.ends_with(a));
        if !compatible {
            return Err(AutodiffError::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}")));
        }
        let out_shape = if an >= bn { a.to_vec() } else { b.to_vec() };
        Ok(BroadcastPlan { out_shape, lhs_len: an, rhs_len: bn, out_len: an.max(bn) })
    }

    fn apply(&self, a: &[f64], b: &[f64], f: fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.out_len)
            .map(|i| f(a[i % self.lhs_len], b[i % self.rhs_len]))
            .collect()
    }

    /// g ⊙ broadcast(b), full-size result.
    fn apply_rhs_expanded(&self, g: &[f64], b: &[f64]) -> Vec<f64> {
        (0..self.out_len).map(|i| g[i] * b[i % self.rhs_len]).collect()
    }

    /// g ⊙ broadcast(a), full-size result.
    fn apply_lhs_expanded(&self, g: &[f64], a: &[f64]) -> Vec<f64> {
        (0..self.out_len).map(|i| g[i] * a[i % self.lhs_len]).collect()
    }

    fn reduce_to_lhs(&self, g: &[f64]) -> Vec<f64> {
        reduce_cyclic(g, self.lhs_len)
    }

    fn reduce_to_rhs(&self, g: &[f64]) -> Vec<f64> {
        reduce_cyclic(g, self.rhs_len)
    }
}

/// Sums a full-size gradient onto a cyclically repeated operand.
fn reduce_cyclic(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}
