//! The fixed downstream classifier: a small convolutional stack in the
//! MagNet style, two 3x3 conv layers per block with 2x2 pooling, then a
//! dense head.

use rand_chacha::ChaCha8Rng;

use super::layers::{maxpool, relu, reshape, Bound, Conv, Dense, Reg};
use super::{ModelError, Result};
use crate::autodiff::{Tape, Tensor};
use crate::dataio::IMAGE_SIDE;

/// Widths of the classifier stack; shrink for tighter compute budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub conv1: usize,
    pub conv2: usize,
    pub dense: usize,
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { conv1: 32, conv2: 64, dense: 200, classes: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    conv1a: Conv,
    conv1b: Conv,
    conv2a: Conv,
    conv2b: Conv,
    fc1: Dense,
    fc2: Dense,
    out: Dense,
    pub config: ClassifierConfig,
    pub frozen: bool,
}

impl ClassifierModel {
    pub fn init(config: ClassifierConfig, rng: &mut ChaCha8Rng) -> Self {
        let flat = config.conv2 * (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4);
        ClassifierModel {
            conv1a: Conv::init(1, config.conv1, rng),
            conv1b: Conv::init(config.conv1, config.conv1, rng),
            conv2a: Conv::init(config.conv1, config.conv2, rng),
            conv2b: Conv::init(config.conv2, config.conv2, rng),
            fc1: Dense::init(flat, config.dense, rng),
            fc2: Dense::init(config.dense, config.dense, rng),
            out: Dense::init(config.dense, config.classes, rng),
            config,
            frozen: false,
        }
    }

    /// Logits for a `[n, 1, 28, 28]` batch.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, reg: Reg, bound: &mut Bound) -> Result<Tensor> {
        if x.shape().len() != 4 || x.shape()[1] != 1 || x.shape()[2] != IMAGE_SIDE || x.shape()[3] != IMAGE_SIDE {
            return Err(ModelError::ShapeMismatch(format!(
                "classifier input {:?}, want [n, 1, {IMAGE_SIDE}, {IMAGE_SIDE}]",
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut h = self.conv1a.apply(tape, x, reg, bound)?;
        h = relu(tape, &h)?;
        h = self.conv1b.apply(tape, &h, reg, bound)?;
        h = relu(tape, &h)?;
        h = maxpool(tape, &h)?;
        h = self.conv2a.apply(tape, &h, reg, bound)?;
        h = relu(tape, &h)?;
        h = self.conv2b.apply(tape, &h, reg, bound)?;
        h = relu(tape, &h)?;
        h = maxpool(tape, &h)?;
        let flat = self.config.conv2 * (IMAGE_SIDE / 4) * (IMAGE_SIDE / 4);
        h = reshape(tape, &h, vec![n, flat])?;
        h = self.fc1.apply(tape, &h, reg, bound)?;
        h = relu(tape, &h)?;
        h = self.fc2.apply(tape, &h, reg, bound)?;
        h = relu(tape, &h)?;
        self.out.apply(tape, &h, reg, bound)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1a.w,
            &mut self.conv1a.b,
            &mut self.conv1b.w,
            &mut self.conv1b.b,
            &mut self.conv2a.w,
            &mut self.conv2a.b,
            &mut self.conv2b.w,
            &mut self.conv2b.b,
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1a.w,
            &self.conv1a.b,
            &self.conv1b.w,
            &self.conv1b.b,
            &self.conv2a.w,
            &self.conv2a.b,
            &self.conv2b.w,
            &self.conv2b.b,
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
            &self.out.w,
            &self.out.b,
        ]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        const NAMES: [&str; 14] = [
            "classifier.conv1a.w",
            "classifier.conv1a.b",
            "classifier.conv1b.w",
            "classifier.conv1b.b",
            "classifier.conv2a.w",
            "classifier.conv2a.b",
            "classifier.conv2b.w",
            "classifier.conv2b.b",
            "classifier.fc1.w",
            "classifier.fc1.b",
            "classifier.fc2.w",
            "classifier.fc2.b",
            "classifier.out.w",
            "classifier.out.b",
        ];
        NAMES.iter().map(|n| n.to_string()).zip(self.params()).map(|(n, t)| (n, t)).collect()
    }

    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        super::load_into(self.named_params().iter().map(|(n, _)| n.clone()).collect(), self.params_mut(), entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Attrs, OpKind};
    use crate::rng::stream_rng;

    fn tiny() -> ClassifierModel {
        let cfg = ClassifierConfig { conv1: 4, conv2: 6, dense: 16, classes: 10 };
        ClassifierModel::init(cfg, &mut stream_rng(0, 1))
    }

    #[test]
    fn logit_shape_matches_batch_and_classes() {
        let model = tiny();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![4, 1, 28, 28])).unwrap();
        let logits = model.forward(&mut tape, &x, Reg::Frozen, &mut Bound::default()).unwrap();
        assert_eq!(logits.shape(), &[4, 10]);
    }

    #[test]
    fn fresh_model_loss_is_near_uniform() {
        let model = tiny();
        let data = crate::dataio::synthetic_digits(8, 3);
        let (x, y) = data.all();
        let mut tape = Tape::new();
        let xt = tape.constant(&x).unwrap();
        let logits = model.forward(&mut tape, &xt, Reg::Frozen, &mut Bound::default()).unwrap();
        let loss = tape
            .forward(OpKind::SoftmaxCrossEntropy, &[&logits], &Attrs::labels(y))
            .unwrap();
        assert!((loss.item() - 10.0_f64.ln()).abs() < 0.5, "fresh loss {}", loss.item());
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut model = tiny();
        // Blank image regions put whole channels exactly on the relu kink
        // (zero activations, zero biases), where central differences and
        // subgradients legitimately disagree. Random pixels and jittered
        // parameters keep the check at a generic point.
        let mut jitter = stream_rng(7, 1);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += 0.05 * jitter.sample::<f64, _>(StandardNormal);
            }
        }
        let x = Tensor::from_vec(
            vec![2, 1, 28, 28],
            (0..2 * 28 * 28).map(|_| jitter.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let y = vec![3usize, 8];

        let loss_of = |model: &ClassifierModel| {
            let mut tape = Tape::new();
            let xt = tape.constant(&x).unwrap();
            let logits = model.forward(&mut tape, &xt, Reg::Frozen, &mut Bound::default()).unwrap();
            tape.forward(OpKind::SoftmaxCrossEntropy, &[&logits], &Attrs::labels(y.clone()))
                .unwrap()
                .item()
        };

        let mut tape = Tape::new();
        let xt = tape.constant(&x).unwrap();
        let mut bound = Bound::default();
        let logits = model.forward(&mut tape, &xt, Reg::Train, &mut bound).unwrap();
        let loss = tape
            .forward(OpKind::SoftmaxCrossEntropy, &[&logits], &Attrs::labels(y.clone()))
            .unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic: Vec<Tensor> = bound
            .ids
            .iter()
            .map(|id| grads.by_id(id.unwrap()).unwrap().detached())
            .collect();

        // Ten spot-checked coordinates across distinct parameter tensors.
        let h = 1e-5;
        let mut pick = stream_rng(7, 2);
        for _ in 0..10 {
            let pi = pick.gen_range(0..analytic.len());
            let numel = analytic[pi].numel();
            let ci = pick.gen_range(0..numel);
            let base = model.params()[pi].data()[ci];
            model.params_mut()[pi].data_mut()[ci] = base + h;
            let up = loss_of(&model);
            model.params_mut()[pi].data_mut()[ci] = base - h;
            let down = loss_of(&model);
            model.params_mut()[pi].data_mut()[ci] = base;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            assert!(rel < 1e-3, "param {pi} coord {ci}: analytic {a} vs numeric {numeric}");
        }
    }
}
