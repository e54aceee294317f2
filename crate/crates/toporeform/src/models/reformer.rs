//! The reformer: a dense VAE over purified images whose bottleneck is the
//! sampled code concatenated with an auxiliary projection of the
//! topological latent.

use rand_chacha::ChaCha8Rng;

use super::layers::{relu, reshape, sigmoid, Bound, Dense, Reg};
use super::{ModelError, Result};
use crate::autodiff::{Attrs, OpKind, Tape, Tensor};
use crate::dataio::{IMAGE_PIXELS, IMAGE_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReformerConfig {
    pub d_vae: usize,
    pub d_aux: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub aux_hidden: usize,
}

impl Default for ReformerConfig {
    fn default() -> Self {
        ReformerConfig { d_vae: 16, d_aux: 8, enc_hidden: 256, dec_hidden: 256, aux_hidden: 32 }
    }
}

/// VAE over `[n, 1, 28, 28]` purified images. The decoder consumes
/// `d_vae + d_aux` bottleneck values, so it cannot run without either a
/// real or an explicit zero auxiliary vector.
#[derive(Clone, Debug)]
pub struct ReformerVae {
    enc_fc: Dense,
    enc_mu: Dense,
    enc_lv: Dense,
    dec_fc1: Dense,
    dec_fc2: Dense,
    pub config: ReformerConfig,
    pub freeze_encoder: bool,
    pub freeze_decoder: bool,
    pub frozen: bool,
}

impl ReformerVae {
    pub fn init(config: ReformerConfig, rng: &mut ChaCha8Rng) -> Self {
        ReformerVae {
            enc_fc: Dense::init(IMAGE_PIXELS, config.enc_hidden, rng),
            enc_mu: Dense::init(config.enc_hidden, config.d_vae, rng),
            enc_lv: Dense::init(config.enc_hidden, config.d_vae, rng),
            dec_fc1: Dense::init(config.d_vae + config.d_aux, config.dec_hidden, rng),
            dec_fc2: Dense::init(config.dec_hidden, IMAGE_PIXELS, rng),
            config,
            freeze_encoder: false,
            freeze_decoder: false,
            frozen: false,
        }
    }

    fn encoder_reg(&self, reg: Reg) -> Reg {
        if self.freeze_encoder {
            Reg::Frozen
        } else {
            reg
        }
    }

    fn decoder_reg(&self, reg: Reg) -> Reg {
        if self.freeze_decoder {
            Reg::Frozen
        } else {
            reg
        }
    }

    /// `(mu, logvar)` of the posterior for a purified batch.
    pub fn encode(&self, tape: &mut Tape, x_pure: &Tensor, reg: Reg, bound: &mut Bound) -> Result<(Tensor, Tensor)> {
        let reg = self.encoder_reg(reg);
        let n = x_pure.shape()[0];
        let flat = reshape(tape, x_pure, vec![n, x_pure.numel() / n])?;
        let mut h = self.enc_fc.apply(tape, &flat, reg, bound)?;
        h = relu(tape, &h)?;
        let mu = self.enc_mu.apply(tape, &h, reg, bound)?;
        let lv = self.enc_lv.apply(tape, &h, reg, bound)?;
        Ok((mu, lv))
    }

    pub fn decode(&self, tape: &mut Tape, bottleneck: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
        let reg = self.decoder_reg(reg);
        let want = self.config.d_vae + self.config.d_aux;
        if bottleneck.shape().len() != 2 || bottleneck.shape()[1] != want {
            return Err(ModelError::ShapeMismatch(format!(
                "bottleneck {:?}, want [n, {want}]",
                bottleneck.shape()
            )));
        }
        let n = bottleneck.shape()[0];
        let mut h = self.dec_fc1.apply(tape, bottleneck, reg, bound)?;
        h = relu(tape, &h)?;
        h = self.dec_fc2.apply(tape, &h, reg, bound)?;
        let flat = sigmoid(tape, &h)?;
        reshape(tape, &flat, vec![n, 1, IMAGE_SIDE, IMAGE_SIDE])
    }

    /// Parameter order: encoder tensors first, then decoder tensors; the
    /// forward pass registers them in this exact order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc_fc.w,
            &mut self.enc_fc.b,
            &mut self.enc_mu.w,
            &mut self.enc_mu.b,
            &mut self.enc_lv.w,
            &mut self.enc_lv.b,
            &mut self.dec_fc1.w,
            &mut self.dec_fc1.b,
            &mut self.dec_fc2.w,
            &mut self.dec_fc2.b,
        ]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.enc_fc.w,
            &self.enc_fc.b,
            &self.enc_mu.w,
            &self.enc_mu.b,
            &self.enc_lv.w,
            &self.enc_lv.b,
            &self.dec_fc1.w,
            &self.dec_fc1.b,
            &self.dec_fc2.w,
            &self.dec_fc2.b,
        ]
    }

    /// Index range of the encoder inside `params()`.
    pub const ENCODER_PARAMS: std::ops::Range<usize> = 0..6;

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        const NAMES: [&str; 10] = [
            "vae.enc_fc.w",
            "vae.enc_fc.b",
            "vae.enc_mu.w",
            "vae.enc_mu.b",
            "vae.enc_lv.w",
            "vae.enc_lv.b",
            "vae.dec_fc1.w",
            "vae.dec_fc1.b",
            "vae.dec_fc2.w",
            "vae.dec_fc2.b",
        ];
        NAMES.iter().map(|n| n.to_string()).zip(self.params()).map(|(n, t)| (n, t)).collect()
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        super::load_into(self.named_params().iter().map(|(n, _)| n.clone()).collect(), self.params_mut(), entries)
    }
}

/// Projection of the topological latent into the reformer bottleneck.
#[derive(Clone, Debug)]
pub struct AuxModule {
    fc1: Dense,
    fc2: Dense,
    pub frozen: bool,
}

impl AuxModule {
    pub fn init(d_topo: usize, config: &ReformerConfig, rng: &mut ChaCha8Rng) -> Self {
        AuxModule {
            fc1: Dense::init(d_topo, config.aux_hidden, rng),
            fc2: Dense::init(config.aux_hidden, config.d_aux, rng),
            frozen: false,
        }
    }

    pub fn project(&self, tape: &mut Tape, z_topo: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
        let mut h = self.fc1.apply(tape, z_topo, reg, bound)?;
        h = relu(tape, &h)?;
        self.fc2.apply(tape, &h, reg, bound)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.fc1.w, &mut self.fc1.b, &mut self.fc2.w, &mut self.fc2.b]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.fc1.w, &self.fc1.b, &self.fc2.w, &self.fc2.b]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        const NAMES: [&str; 4] = ["aux.fc1.w", "aux.fc1.b", "aux.fc2.w", "aux.fc2.b"];
        NAMES.iter().map(|n| n.to_string()).zip(self.params()).map(|(n, t)| (n, t)).collect()
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        super::load_into(self.named_params().iter().map(|(n, _)| n.clone()).collect(), self.params_mut(), entries)
    }
}

/// Routing of the auxiliary signal into the bottleneck.
pub enum AuxPath<'a> {
    /// Project the topological latent through the module.
    Module(&'a AuxModule, Reg),
    /// Feed an all-zero auxiliary vector (the intermediate ablation stage).
    Zero,
}

/// One reformer pass: sample the bottleneck with caller-supplied noise,
/// inject the auxiliary vector, decode. Returns `(x_ref, mu, logvar)`.
pub fn reformer_forward(
    tape: &mut Tape,
    vae: &ReformerVae,
    aux: AuxPath,
    x_pure: &Tensor,
    z_topo: &Tensor,
    noise: &Tensor,
    vae_reg: Reg,
    vae_bound: &mut Bound,
    aux_bound: &mut Bound,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (mu, lv) = vae.encode(tape, x_pure, vae_reg, vae_bound)?;
    if noise.shape() != mu.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "noise {:?} vs mu {:?}",
            noise.shape(),
            mu.shape()
        )));
    }
    let noise_leaf = tape.constant(noise)?;
    let z = tape.forward(OpKind::Reparameterize, &[&mu, &lv, &noise_leaf], &Attrs::default())?;
    let n = x_pure.shape()[0];
    let aux_vec = match aux {
        AuxPath::Module(module, reg) => module.project(tape, z_topo, reg, aux_bound)?,
        AuxPath::Zero => tape.constant(&Tensor::zeros(vec![n, vae.config.d_aux]))?,
    };
    let bottleneck = tape.forward(OpKind::Concat, &[&z, &aux_vec], &Attrs::axis(1))?;
    let x_ref = vae.decode(tape, &bottleneck, vae_reg, vae_bound)?;
    Ok((x_ref, mu, lv))
}

/// Reformer objective value plus logged components.
pub struct ReformerLoss {
    pub total: Tensor,
    pub mse: f64,
    pub ce: f64,
    pub kl: f64,
}

/// `lambda1 * mse(x_ref, target) + lambda2 * ce(logits, y) + lambda3 *
/// kl(mu, logvar)`.
#[allow(clippy::too_many_arguments)]
pub fn reformer_loss(
    tape: &mut Tape,
    x_ref: &Tensor,
    target: &Tensor,
    logits: &Tensor,
    y: &[usize],
    mu: &Tensor,
    lv: &Tensor,
    weights: (f64, f64, f64),
) -> Result<ReformerLoss> {
    let (l1, l2, l3) = weights;
    let mse = tape.forward(OpKind::Mse, &[x_ref, target], &Attrs::default())?;
    let ce = tape.forward(OpKind::SoftmaxCrossEntropy, &[logits], &Attrs::labels(y.to_vec()))?;
    let kl = tape.forward(OpKind::GaussianKl, &[mu, lv], &Attrs::default())?;

    let c1 = tape.constant_scalar(l1)?;
    let c2 = tape.constant_scalar(l2)?;
    let c3 = tape.constant_scalar(l3)?;
    let t1 = tape.forward(OpKind::Mul, &[&c1, &mse], &Attrs::default())?;
    let t2 = tape.forward(OpKind::Mul, &[&c2, &ce], &Attrs::default())?;
    let t3 = tape.forward(OpKind::Mul, &[&c3, &kl], &Attrs::default())?;
    let t12 = tape.forward(OpKind::Add, &[&t1, &t2], &Attrs::default())?;
    let total = tape.forward(OpKind::Add, &[&t12, &t3], &Attrs::default())?;
    Ok(ReformerLoss { total, mse: mse.item(), ce: ce.item(), kl: kl.item() })
}
