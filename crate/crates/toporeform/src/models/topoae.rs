//! Topology-preserving autoencoder: a convolutional encoder to a small
//! dense latent, a dense decoder with a final sigmoid, and the combined
//! reconstruction-plus-topology objective.

use rand_chacha::ChaCha8Rng;

use super::layers::{maxpool, relu, reshape, sigmoid, Bound, Conv, Dense, Reg};
use super::{ModelError, Result};
use crate::autodiff::{Attrs, OpKind, Tape, Tensor};
use crate::dataio::{IMAGE_PIXELS, IMAGE_SIDE};
use crate::topology;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopoAeConfig {
    pub d_topo: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub dec_hidden: usize,
}

impl Default for TopoAeConfig {
    fn default() -> Self {
        TopoAeConfig { d_topo: 16, conv1: 8, conv2: 16, dec_hidden: 256 }
    }
}

/// Encoder: conv/pool twice, dense to `d_topo`. Decoder: two dense layers
/// to pixel space under a sigmoid. The decoder is dense rather than a
/// mirrored deconvolution because the op set stays at stride-1 convolution
/// and 2x2 pooling.
#[derive(Clone, Debug)]
pub struct TopoAeModel {
    enc_conv1: Conv,
    enc_conv2: Conv,
    enc_fc: Dense,
    dec_fc1: Dense,
    dec_fc2: Dense,
    pub config: TopoAeConfig,
    pub frozen: bool,
}

impl TopoAeModel {
    pub fn init(config: TopoAeConfig, rng: &mut ChaCha8Rng) -> Self {
        let flat = config.conv2 * (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4);
        TopoAeModel {
            enc_conv1: Conv::init(1, config.conv1, rng),
            enc_conv2: Conv::init(config.conv1, config.conv2, rng),
            enc_fc: Dense::init(flat, config.d_topo, rng),
            dec_fc1: Dense::init(config.d_topo, config.dec_hidden, rng),
            dec_fc2: Dense::init(config.dec_hidden, IMAGE_PIXELS, rng),
            config,
            frozen: false,
        }
    }

    pub fn encode(&self, tape: &mut Tape, x: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
        if x.shape().len() != 4 || x.shape()[1] != 1 {
            return Err(ModelError::ShapeMismatch(format!("autoencoder input {:?}", x.shape())));
        }
        let n = x.shape()[0];
        let mut h = self.enc_conv1.apply(tape, x, reg, bound)?;
        h = relu(tape, &h)?;
        h = maxpool(tape, &h)?;
        h = self.enc_conv2.apply(tape, &h, reg, bound)?;
        h = relu(tape, &h)?;
        h = maxpool(tape, &h)?;
        let flat = self.config.conv2 * (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4);
        h = reshape(tape, &h, vec![n, flat])?;
        self.enc_fc.apply(tape, &h, reg, bound)
    }

    pub fn decode(&self, tape: &mut Tape, z: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
        let n = z.shape()[0];
        let mut h = self.dec_fc1.apply(tape, z, reg, bound)?;
        h = relu(tape, &h)?;
        h = self.dec_fc2.apply(tape, &h, reg, bound)?;
        let flat = sigmoid(tape, &h)?;
        reshape(tape, &flat, vec![n, 1, IMAGE_SIDE, IMAGE_SIDE])
    }

    /// `(z, x_hat)`: the latent code and the purified reconstruction.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, reg: Reg, bound: &mut Bound) -> Result<(Tensor, Tensor)> {
        let z = self.encode(tape, x, reg, bound)?;
        let x_hat = self.decode(tape, &z, reg, bound)?;
        Ok((z, x_hat))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc_conv1.w,
            &mut self.enc_conv1.b,
            &mut self.enc_conv2.w,
            &mut self.enc_conv2.b,
            &mut self.enc_fc.w,
            &mut self.enc_fc.b,
            &mut self.dec_fc1.w,
            &mut self.dec_fc1.b,
            &mut self.dec_fc2.w,
            &mut self.dec_fc2.b,
        ]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.enc_conv1.w,
            &self.enc_conv1.b,
            &self.enc_conv2.w,
            &self.enc_conv2.b,
            &self.enc_fc.w,
            &self.enc_fc.b,
            &self.dec_fc1.w,
            &self.dec_fc1.b,
            &self.dec_fc2.w,
            &self.dec_fc2.b,
        ]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        const NAMES: [&str; 10] = [
            "topoae.enc_conv1.w",
            "topoae.enc_conv1.b",
            "topoae.enc_conv2.w",
            "topoae.enc_conv2.b",
            "topoae.enc_fc.w",
            "topoae.enc_fc.b",
            "topoae.dec_fc1.w",
            "topoae.dec_fc1.b",
            "topoae.dec_fc2.w",
            "topoae.dec_fc2.b",
        ];
        NAMES.iter().map(|n| n.to_string()).zip(self.params()).map(|(n, t)| (n, t)).collect()
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        super::load_into(self.named_params().iter().map(|(n, _)| n.clone()).collect(), self.params_mut(), entries)
    }
}

/// Loss value plus its logged components.
pub struct TopoAeLoss {
    pub total: Tensor,
    pub l_rec: f64,
    pub l_t: f64,
}

/// `L = mse(x, x_hat) + lambda * L_t(x, z)`. The persistence term is
/// differentiated outside the tape (pairings held fixed) and spliced in as
/// a custom node so gradients reach both the encoder and the decoder.
pub fn topoae_loss(tape: &mut Tape, x: &Tensor, x_hat: &Tensor, z: &Tensor, lambda: f64) -> Result<TopoAeLoss> {
    let n = x.shape()[0];
    if n < 2 {
        return Err(ModelError::BatchTooSmall(n));
    }
    let l_rec = tape.forward(OpKind::Mse, &[x, x_hat], &Attrs::default())?;
    if lambda == 0.0 {
        let l = l_rec.item();
        return Ok(TopoAeLoss { total: l_rec, l_rec: l, l_t: 0.0 });
    }

    let x_flat = reshape(tape, x, vec![n, x.numel() / n])?;
    let x_cloud = topology::PointCloud::from_tensor(&x_flat)?;
    let z_cloud = topology::PointCloud::from_tensor(z)?;
    let a_x = topology::pairwise_distances(&x_cloud);
    let a_z = topology::pairwise_distances(&z_cloud);
    let (pi_x, _) = topology::persistence0(&a_x);
    let (pi_z, _) = topology::persistence0(&a_z);
    let (l_t, _, _) = topology::topo_loss(&a_x, &a_z, &pi_x, &pi_z)?;
    let (grad_x, grad_z) = topology::topo_loss_backward(&x_cloud, &z_cloud, &pi_x, &pi_z)?;

    let spliced = tape.splice(&[&x_flat, z], l_t, vec![grad_x, grad_z])?;
    let lam = tape.constant_scalar(lambda)?;
    let weighted = tape.forward(OpKind::Mul, &[&lam, &spliced], &Attrs::default())?;
    let total = tape.forward(OpKind::Add, &[&l_rec, &weighted], &Attrs::default())?;
    Ok(TopoAeLoss { total, l_rec: l_rec.item(), l_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn tiny() -> TopoAeModel {
        TopoAeModel::init(TopoAeConfig { d_topo: 16, conv1: 2, conv2: 3, dec_hidden: 16 }, &mut stream_rng(1, 0))
    }

    #[test]
    fn forward_shapes_and_pixel_range() {
        let model = tiny();
        let data = crate::dataio::synthetic_digits(8, 0);
        let (x, _) = data.all();
        let mut tape = Tape::new();
        let xt = tape.constant(&x).unwrap();
        let (z, x_hat) = model.forward(&mut tape, &xt, Reg::Frozen, &mut Bound::default()).unwrap();
        assert_eq!(z.shape(), &[8, 16]);
        assert_eq!(x_hat.shape(), &[8, 1, 28, 28]);
        assert!(x_hat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batch_of_one_is_rejected_for_training_loss() {
        let model = tiny();
        let data = crate::dataio::synthetic_digits(1, 0);
        let (x, _) = data.all();
        let mut tape = Tape::new();
        let xt = tape.constant(&x).unwrap();
        let (z, x_hat) = model.forward(&mut tape, &xt, Reg::Frozen, &mut Bound::default()).unwrap();
        assert!(matches!(
            topoae_loss(&mut tape, &xt, &x_hat, &z, 1.0),
            Err(ModelError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn zero_lambda_reduces_to_plain_mse() {
        let model = tiny();
        let data = crate::dataio::synthetic_digits(4, 0);
        let (x, _) = data.all();
        let mut tape = Tape::new();
        let xt = tape.constant(&x).unwrap();
        let (z, x_hat) = model.forward(&mut tape, &xt, Reg::Frozen, &mut Bound::default()).unwrap();
        let mse = tape.forward(OpKind::Mse, &[&xt, &x_hat], &Attrs::default()).unwrap();
        let loss = topoae_loss(&mut tape, &xt, &x_hat, &z, 0.0).unwrap();
        assert_eq!(loss.total.item(), mse.item());
        assert_eq!(loss.l_t, 0.0);
    }

    #[test]
    fn loss_composes_mse_and_weighted_topo_term() {
        let model = tiny();
        let data = crate::dataio::synthetic_digits(6, 1);
        let (x, _) = data.all();
        let mut tape = Tape::new();
        let xt = tape.constant(&x).unwrap();
        let (z, x_hat) = model.forward(&mut tape, &xt, Reg::Frozen, &mut Bound::default()).unwrap();
        for lambda in [0.5, 1.0, 2.0] {
            let loss = topoae_loss(&mut tape, &xt, &x_hat, &z, lambda).unwrap();
            let want = loss.l_rec + lambda * loss.l_t;
            assert!((loss.total.item() - want).abs() < 1e-9 * want.max(1.0));
            assert!(loss.l_t > 0.0);
        }
    }

    #[test]
    fn loss_is_monotone_in_lambda() {
        let model = tiny();
        let data = crate::dataio::synthetic_digits(5, 2);
        let (x, _) = data.all();
        let mut tape = Tape::new();
        let xt = tape.constant(&x).unwrap();
        let (z, x_hat) = model.forward(&mut tape, &xt, Reg::Frozen, &mut Bound::default()).unwrap();
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0, 0.5, 1.0, 4.0] {
            let v = topoae_loss(&mut tape, &xt, &x_hat, &z, lambda).unwrap().total.item();
            assert!(v > last);
            last = v;
        }
    }
}
