//! White-box and adaptive attacks: FGSM, projected gradient descent,
//! Carlini-Wagner L2, and the BPDA/EOT gradient policies that target
//! purification defenses.
//!
//! Attacks see the defense through the [`TargetFn`] trait: a differentiable
//! map from image batches to logits, with hooks for running the purifier
//! forward-only (BPDA substitutes the identity for it on the backward
//! pass) and for resampling the defense's stochasticity (EOT averages true
//! gradients over it).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamParams, AdamState, Attrs, OpKind, Tape, Tensor};
use crate::rng::stream_rng;

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("non-finite gradient")]
    NonFinite,
    #[error("prediction and truth lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
}

/// Attack family selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Cw,
    BpdaPgd,
    EotPgd,
    EotBpdaPgd,
}

/// One attack's full parameter set. `alpha` left unset defaults to
/// `epsilon / 4` at use time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: Option<f64>,
    pub steps: usize,
    pub c: f64,
    pub kappa: f64,
    pub cw_lr: f64,
    pub k: usize,
    pub seed: u64,
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: 0.1,
            alpha: None,
            steps: 40,
            c: 1.0,
            kappa: 0.0,
            cw_lr: 0.01,
            k: 8,
            seed: 0,
            random_start: true,
        }
    }
}

impl AttackConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(AttackError::InvalidConfig("epsilon must be nonnegative".into()));
        }
        if self.steps == 0 {
            return Err(AttackError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(AttackError::InvalidConfig("k must be at least 1".into()));
        }
        if self.kind == AttackKind::Cw && self.c <= 0.0 {
            return Err(AttackError::InvalidConfig("cw needs c > 0".into()));
        }
        Ok(())
    }
}

/// Where the defense's reparameterization noise comes from during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSpec {
    /// Mean decoding; the pipeline is a deterministic function.
    Zero,
    /// One draw from the counter-based stream `(seed, stream)`.
    Seeded { seed: u64, stream: u64 },
}

impl NoiseSpec {
    pub fn sample(&self, shape: Vec<usize>) -> Tensor {
        match self {
            NoiseSpec::Zero => Tensor::zeros(shape),
            NoiseSpec::Seeded { seed, stream } => {
                let mut rng = stream_rng(*seed, 0x6e6f_0000 ^ *stream);
                let n = shape.iter().product();
                Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                    .expect("noise shape")
            }
        }
    }
}

/// A differentiable map from image batches to logits, possibly through a
/// purifier, with enough structure exposed for adaptive attacks.
pub trait TargetFn {
    fn class_count(&self) -> usize;

    /// True when the composition samples noise (a VAE in sampling mode).
    fn is_stochastic(&self) -> bool;

    /// Builds the full composition on the tape over an already-registered
    /// input and returns the logits tensor.
    fn logits_on_tape(&self, tape: &mut Tape, x: &Tensor, noise: &NoiseSpec) -> Result<Tensor>;

    /// Runs the purifier forward only; the identity when undefended.
    fn purify(&self, x: &Tensor, noise: &NoiseSpec) -> Result<Tensor>;

    /// Builds the classifier alone on the tape from a purified input.
    fn classifier_on_tape(&self, tape: &mut Tape, u: &Tensor) -> Result<Tensor>;
}

/// Forward logits without gradient bookkeeping.
pub fn predict_logits(target: &dyn TargetFn, x: &Tensor, noise: &NoiseSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xc = tape.constant(x)?;
    let logits = target.logits_on_tape(&mut tape, &xc, noise)?;
    Ok(logits.detached())
}

/// Argmax labels, ties broken toward the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn ce_gradient_at(target: &dyn TargetFn, x: &Tensor, y: &[usize], noise: &NoiseSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.var(x)?;
    let logits = target.logits_on_tape(&mut tape, &xv, noise)?;
    let loss = tape.forward(OpKind::SoftmaxCrossEntropy, &[&logits], &Attrs::labels(y.to_vec()))?;
    let grads = tape.backward(&loss)?;
    let g = grads.get_or_zero(&xv);
    if !g.all_finite() {
        return Err(AttackError::NonFinite);
    }
    Ok(g)
}

/// Exact gradient of the cross entropy through the whole composition.
pub fn true_gradient(target: &dyn TargetFn, x: &Tensor, y: &[usize], noise: &NoiseSpec) -> Result<Tensor> {
    ce_gradient_at(target, x, y, noise)
}

/// BPDA with the identity surrogate: the purifier runs forward, the
/// backward pass pretends it was the identity, so the returned gradient is
/// the classifier's gradient evaluated at the purified point.
pub fn bpda_gradient(target: &dyn TargetFn, x: &Tensor, y: &[usize], noise: &NoiseSpec) -> Result<Tensor> {
    let u = target.purify(x, noise)?;
    let mut tape = Tape::new();
    let uv = tape.var(&u)?;
    let logits = target.classifier_on_tape(&mut tape, &uv)?;
    let loss = tape.forward(OpKind::SoftmaxCrossEntropy, &[&logits], &Attrs::labels(y.to_vec()))?;
    let grads = tape.backward(&loss)?;
    let g = grads.get_or_zero(&uv);
    if !g.all_finite() {
        return Err(AttackError::NonFinite);
    }
    Ok(g)
}

/// Expectation over transformation: the mean of `k` true-gradient passes,
/// pass `p` drawing its noise from the counter-based stream `(seed, p)`.
pub fn eot_gradient(target: &dyn TargetFn, x: &Tensor, y: &[usize], k: usize, seed: u64) -> Result<Tensor> {
    eot_mean(target, x, y, k, seed, 0, false)
}

fn eot_mean(
    target: &dyn TargetFn,
    x: &Tensor,
    y: &[usize],
    k: usize,
    seed: u64,
    stream_base: u64,
    bpda: bool,
) -> Result<Tensor> {
    let mut acc = Tensor::zeros(x.shape().to_vec());
    for pass in 0..k {
        let noise = NoiseSpec::Seeded { seed, stream: stream_base + pass as u64 };
        let g = if bpda {
            bpda_gradient(target, x, y, &noise)?
        } else {
            true_gradient(target, x, y, &noise)?
        };
        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
    let scale = 1.0 / k as f64;
    for a in acc.data_mut() {
        *a *= scale;
    }
    Ok(acc)
}

/// Gradient policy used inside PGD.
#[derive(Clone, Copy, Debug)]
enum GradPolicy {
    True,
    Bpda,
    Eot { k: usize, bpda: bool },
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-step gradient-sign attack. The output is clipped to valid pixel
/// range and trivially sits inside the epsilon ball.
pub fn fgsm(target: &dyn TargetFn, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    let g = true_gradient(target, x, y, &NoiseSpec::Zero)?;
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| (xv + epsilon * sign(gv)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), data).expect("input shape"))
}

/// Iterative projected attack within the L-inf ball of radius
/// `cfg.epsilon` intersected with `[0, 1]`.
fn pgd_with_policy(
    target: &dyn TargetFn,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    policy: GradPolicy,
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let alpha = cfg.alpha();
    let mut adv = x.detached();
    if cfg.random_start && eps > 0.0 {
        let mut rng = stream_rng(cfg.seed, 0x7273_0000);
        for (a, &xv) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = (xv + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
        }
    }
    for step in 0..cfg.steps {
        let g = match policy {
            GradPolicy::True => true_gradient(target, &adv, y, &NoiseSpec::Zero)?,
            GradPolicy::Bpda => bpda_gradient(target, &adv, y, &NoiseSpec::Zero)?,
            GradPolicy::Eot { k, bpda } => {
                eot_mean(target, &adv, y, k, cfg.seed, (step * k) as u64, bpda)?
            }
        };
        for ((a, &xv), &gv) in adv.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
            let stepped = *a + alpha * sign(gv);
            *a = stepped.clamp(xv - eps, xv + eps).clamp(0.0, 1.0);
        }
        debug_assert!(within_ball(&adv, x, eps), "iterate escaped the epsilon ball");
    }
    Ok(adv)
}

pub fn pgd(target: &dyn TargetFn, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    pgd_with_policy(target, x, y, cfg, GradPolicy::True)
}

fn within_ball(adv: &Tensor, x: &Tensor, eps: f64) -> bool {
    adv.data()
        .iter()
        .zip(x.data())
        .all(|(&a, &xv)| (a - xv).abs() <= eps + 1e-12 && (0.0..=1.0).contains(&a))
}

/// Carlini-Wagner L2 outcome: adversarial pixels plus per-example
/// bookkeeping.
#[derive(Clone, Debug)]
pub struct CwOutcome {
    pub x_adv: Tensor,
    pub success: Vec<bool>,
    /// Squared L2 distortion of the returned iterate, per example.
    pub distortion: Vec<f64>,
}

/// Untargeted Carlini-Wagner in the tanh change of variables: minimize
/// `||x_adv - x||_2^2 + c * max(logit_y - max_{j != y} logit_j, -kappa)`
/// by Adam over `w` with `x_adv = (tanh(w) + 1) / 2`. Returns the
/// lowest-distortion successful iterate per example, or the final iterate
/// where the attack never succeeded.
pub fn cw_l2(target: &dyn TargetFn, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<CwOutcome> {
    cfg.validate()?;
    let n = x.shape()[0];
    let pixels = x.numel() / n;
    let classes = target.class_count();

    // w = atanh(clamp(2x - 1)) so the first iterate reproduces x.
    let mut w = Tensor::from_vec(
        x.shape().to_vec(),
        x.data()
            .iter()
            .map(|&v| {
                let t = (2.0 * v - 1.0).clamp(-(1.0 - 1e-6), 1.0 - 1e-6);
                0.5 * ((1.0 + t) / (1.0 - t)).ln()
            })
            .collect(),
    )
    .expect("input shape");
    let mut adam = AdamState::new(&[&w]);
    let hp = AdamParams::with_lr(cfg.cw_lr);

    let mut best_adv = x.detached();
    let mut best_dist = vec![f64::INFINITY; n];
    let mut success = vec![false; n];
    let mut last_adv = x.detached();
    let mut last_dist = vec![0.0; n];

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let wv = tape.var(&w)?;
        let th = tape.forward(OpKind::Tanh, &[&wv], &Attrs::default())?;
        let half = tape.constant_scalar(0.5)?;
        let scaled = tape.forward(OpKind::Mul, &[&th, &half], &Attrs::default())?;
        let x_adv = tape.forward(OpKind::Add, &[&scaled, &half], &Attrs::default())?;
        let logits = target.logits_on_tape(&mut tape, &x_adv, &NoiseSpec::Zero)?;

        // Distortion, margin, and the two backward seeds, per example.
        let mut dist_seed = vec![0.0; x.numel()];
        let mut logit_seed = vec![0.0; n * classes];
        for i in 0..n {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let yi = y[i];
            let mut dist = 0.0;
            for p in 0..pixels {
                let d = x_adv.data()[i * pixels + p] - x.data()[i * pixels + p];
                dist += d * d;
                dist_seed[i * pixels + p] = 2.0 * d;
            }
            last_dist[i] = dist;

            let mut other_best = if yi == 0 { 1 } else { 0 };
            for (j, &v) in row.iter().enumerate() {
                if j != yi && v > row[other_best] {
                    other_best = j;
                }
            }
            let margin = row[yi] - row[other_best];
            if margin > -cfg.kappa {
                logit_seed[i * classes + yi] += cfg.c;
                logit_seed[i * classes + other_best] -= cfg.c;
            }

            let pred = argmax_row(row);
            if pred != yi && dist < best_dist[i] {
                best_dist[i] = dist;
                success[i] = true;
                best_adv.data_mut()[i * pixels..(i + 1) * pixels]
                    .copy_from_slice(&x_adv.data()[i * pixels..(i + 1) * pixels]);
            }
        }
        last_adv = x_adv.detached();

        let seeds = [
            (x_adv.node_id().expect("recorded"), Tensor::from_vec(x.shape().to_vec(), dist_seed)?),
            (logits.node_id().expect("recorded"), Tensor::from_vec(vec![n, classes], logit_seed)?),
        ];
        let grads = tape.backward_seeded(&seeds)?;
        let gw = grads.get_or_zero(&wv);
        if !gw.all_finite() {
            return Err(AttackError::NonFinite);
        }
        adam_step(&mut [&mut w], &[Some(gw)], &mut adam, &hp)?;
    }

    // Examples that never flipped fall back to the final evaluated iterate.
    let mut out = best_adv;
    let mut distortion = best_dist;
    for i in 0..n {
        if !success[i] {
            out.data_mut()[i * pixels..(i + 1) * pixels]
                .copy_from_slice(&last_adv.data()[i * pixels..(i + 1) * pixels]);
            distortion[i] = last_dist[i];
        }
    }
    Ok(CwOutcome { x_adv: out, success, distortion })
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Untargeted attack success rate: among examples the model got right on
/// clean inputs, the fraction flipped to a wrong label; 0/0 counts as 0.
pub fn attack_success_rate(clean_pred: &[usize], adv_pred: &[usize], y: &[usize]) -> Result<f64> {
    if clean_pred.len() != adv_pred.len() || clean_pred.len() != y.len() {
        return Err(AttackError::LengthMismatch(clean_pred.len(), adv_pred.len().min(y.len())));
    }
    let mut eligible = 0usize;
    let mut flipped = 0usize;
    for i in 0..y.len() {
        if clean_pred[i] == y[i] {
            eligible += 1;
            if adv_pred[i] != y[i] {
                flipped += 1;
            }
        }
    }
    if eligible == 0 {
        Ok(0.0)
    } else {
        Ok(flipped as f64 / eligible as f64)
    }
}

/// Crafted batch plus per-example success flags where the attack tracks
/// them (Carlini-Wagner).
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub x_adv: Tensor,
    pub success: Option<Vec<bool>>,
}

/// Dispatches an attack configuration against a target.
pub fn run_attack(target: &dyn TargetFn, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    let outcome = match cfg.kind {
        AttackKind::Fgsm => AttackOutcome { x_adv: fgsm(target, x, y, cfg.epsilon)?, success: None },
        AttackKind::Pgd => {
            AttackOutcome { x_adv: pgd_with_policy(target, x, y, cfg, GradPolicy::True)?, success: None }
        }
        AttackKind::BpdaPgd => {
            AttackOutcome { x_adv: pgd_with_policy(target, x, y, cfg, GradPolicy::Bpda)?, success: None }
        }
        AttackKind::EotPgd => AttackOutcome {
            x_adv: pgd_with_policy(target, x, y, cfg, GradPolicy::Eot { k: cfg.k, bpda: false })?,
            success: None,
        },
        AttackKind::EotBpdaPgd => AttackOutcome {
            x_adv: pgd_with_policy(target, x, y, cfg, GradPolicy::Eot { k: cfg.k, bpda: true })?,
            success: None,
        },
        AttackKind::Cw => {
            let out = cw_l2(target, x, y, cfg)?;
            AttackOutcome { x_adv: out.x_adv, success: Some(out.success) }
        }
    };
    Ok(outcome)
}

/// Sidecar metadata stored next to an adversarial tensor container.
#[derive(Serialize, Deserialize)]
pub struct AdversarialSidecar {
    pub config: AttackConfig,
    pub success: Option<Vec<bool>>,
}

/// Writes `{stem}.tensors` (weight-container format, one `x_adv` entry)
/// and `{stem}.json` with the attack config and success flags.
pub fn save_adversarial_batch(
    dir: &std::path::Path,
    stem: &str,
    outcome: &AttackOutcome,
    cfg: &AttackConfig,
) -> std::io::Result<()> {
    let entries = vec![("x_adv".to_string(), &outcome.x_adv)];
    crate::models::weights::save_file(&dir.join(format!("{stem}.tensors")), &entries)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let sidecar = AdversarialSidecar { config: *cfg, success: outcome.success.clone() };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
}

/// The undefended target: the bare classifier, purification is the
/// identity.
pub struct ClassifierTarget<'a> {
    pub classifier: &'a crate::models::ClassifierModel,
}

impl TargetFn for ClassifierTarget<'_> {
    fn class_count(&self) -> usize {
        self.classifier.config.classes
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn logits_on_tape(&self, tape: &mut Tape, x: &Tensor, _noise: &NoiseSpec) -> Result<Tensor> {
        Ok(self
            .classifier
            .forward(tape, x, crate::models::Reg::Frozen, &mut crate::models::Bound::default())?)
    }

    fn purify(&self, x: &Tensor, _noise: &NoiseSpec) -> Result<Tensor> {
        Ok(x.detached())
    }

    fn classifier_on_tape(&self, tape: &mut Tape, u: &Tensor) -> Result<Tensor> {
        self.logits_on_tape(tape, u, &NoiseSpec::Zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierConfig, ClassifierModel};
    use crate::rng::stream_rng;

    fn tiny_classifier() -> ClassifierModel {
        ClassifierModel::init(ClassifierConfig { conv1: 2, conv2: 3, dense: 12, classes: 10 }, &mut stream_rng(8, 0))
    }

    fn batch(n: usize) -> (Tensor, Vec<usize>) {
        crate::dataio::synthetic_digits(n, 21).all()
    }

    #[test]
    fn zero_epsilon_fgsm_is_bit_identical() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(4);
        let adv = fgsm(&target, &x, &y, 0.0).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn fgsm_respects_ball_and_range() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(4);
        let adv = fgsm(&target, &x, &y, 0.3).unwrap();
        assert!(within_ball(&adv, &x, 0.3));
    }

    #[test]
    fn single_step_pgd_equals_fgsm_bitwise() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(3);
        let cfg = AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: 0.2,
            alpha: Some(0.2),
            steps: 1,
            random_start: false,
            ..Default::default()
        };
        let via_pgd = pgd(&target, &x, &y, &cfg).unwrap();
        let via_fgsm = fgsm(&target, &x, &y, 0.2).unwrap();
        assert_eq!(via_pgd.data(), via_fgsm.data());
    }

    #[test]
    fn pgd_iterates_stay_in_ball() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(3);
        let cfg = AttackConfig { kind: AttackKind::Pgd, epsilon: 0.1, steps: 5, ..Default::default() };
        let adv = pgd(&target, &x, &y, &cfg).unwrap();
        assert!(within_ball(&adv, &x, 0.1));
    }

    #[test]
    fn seeded_attacks_are_bit_reproducible() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(3);
        let cfg = AttackConfig { kind: AttackKind::Pgd, epsilon: 0.1, steps: 3, seed: 42, ..Default::default() };
        let a = run_attack(&target, &x, &y, &cfg).unwrap();
        let b = run_attack(&target, &x, &y, &cfg).unwrap();
        assert_eq!(a.x_adv.data(), b.x_adv.data());
    }

    #[test]
    fn cw_with_vanishing_c_keeps_distortion_tiny() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(3);
        let cfg = AttackConfig { kind: AttackKind::Cw, c: 1e-12, steps: 5, ..Default::default() };
        let out = cw_l2(&target, &x, &y, &cfg).unwrap();
        let max_dev = out.x_adv.max_abs_diff(&x);
        assert!(max_dev < 1e-3, "distortion {max_dev}");
    }

    #[test]
    fn cw_output_is_always_valid_pixels() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(3);
        let cfg = AttackConfig { kind: AttackKind::Cw, c: 5.0, steps: 10, ..Default::default() };
        let out = cw_l2(&target, &x, &y, &cfg).unwrap();
        assert!(out.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out.success.len(), 3);
        assert_eq!(out.distortion.len(), 3);
    }

    #[test]
    fn bpda_on_identity_purifier_matches_true_gradient() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(4);
        let g_true = true_gradient(&target, &x, &y, &NoiseSpec::Zero).unwrap();
        let g_bpda = bpda_gradient(&target, &x, &y, &NoiseSpec::Zero).unwrap();
        assert!(g_true.max_abs_diff(&g_bpda) < 1e-10);
    }

    #[test]
    fn eot_of_deterministic_target_is_invariant_in_k() {
        let model = tiny_classifier();
        let target = ClassifierTarget { classifier: &model };
        let (x, y) = batch(2);
        let g1 = eot_gradient(&target, &x, &y, 1, 7).unwrap();
        let g16 = eot_gradient(&target, &x, &y, 16, 7).unwrap();
        assert!(g1.max_abs_diff(&g16) < 1e-12);
    }

    #[test]
    fn asr_counts_flips_among_clean_correct() {
        // Clean correct on {0,1,2} of 4; adversarial flips 0 and 2.
        let y = [1, 2, 3, 4];
        let clean = [1, 2, 3, 0];
        let adv = [9, 2, 9, 0];
        let asr = attack_success_rate(&clean, &adv, &y).unwrap();
        assert!((asr - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn asr_edge_cases() {
        assert_eq!(attack_success_rate(&[1, 2], &[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(attack_success_rate(&[1, 2], &[0, 0], &[1, 2]).unwrap(), 1.0);
        // Nothing clean-correct: defined as 0.
        assert_eq!(attack_success_rate(&[0, 0], &[1, 2], &[1, 2]).unwrap(), 0.0);
        assert!(matches!(
            attack_success_rate(&[0], &[1, 2], &[1, 2]),
            Err(AttackError::LengthMismatch(..))
        ));
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = AttackOutcome {
            x_adv: Tensor::from_vec(vec![1, 4], vec![0.1, 0.9, 0.5, 0.0]).unwrap(),
            success: Some(vec![true]),
        };
        let cfg = AttackConfig { kind: AttackKind::Cw, ..Default::default() };
        save_adversarial_batch(dir.path(), "adv_0_cw", &outcome, &cfg).unwrap();
        let tensors = crate::models::weights::load_file(&dir.path().join("adv_0_cw.tensors")).unwrap();
        assert_eq!(tensors[0].0, "x_adv");
        assert_eq!(tensors[0].1.shape(), &[1, 4]);
        let side: AdversarialSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("adv_0_cw.json")).unwrap()).unwrap();
        assert_eq!(side.config.kind, AttackKind::Cw);
        assert_eq!(side.success, Some(vec![true]));
    }
}
