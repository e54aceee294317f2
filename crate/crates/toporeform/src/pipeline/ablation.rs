//! Stage ablation: craft each attack white-box against every composition
//! stage and report accuracy, class-averaged F1/precision, and attack
//! success rate per cell.

use serde::{Deserialize, Serialize};

use super::{Bundle, PipelineConfig, Purifier, Result};
use crate::attacks::{attack_success_rate, run_attack, AttackConfig, NoiseSpec};
use crate::autodiff::Tensor;
use crate::dataio::Dataset;
use crate::metrics::{averaged_scores, confusion};
use crate::models::{AuxModule, ClassifierModel, ReformerVae, TopoAeModel};

/// Every model the five ablation stages draw from. The zero-warmup and
/// warmup reformers are separate trainings with the same budget.
pub struct TrainedStack {
    pub classifier: ClassifierModel,
    pub topoae: TopoAeModel,
    pub vae_w0: ReformerVae,
    pub aux_w0: AuxModule,
    pub vae_warm: ReformerVae,
    pub aux_warm: AuxModule,
}

/// The five compositions, weakest to strongest: bare classifier,
/// autoencoder reconstruction only, reformer fed a zero auxiliary vector,
/// the full zero-warmup model, and the full warmup-trained model.
pub fn stage_bundles(stack: &TrainedStack) -> Vec<(&'static str, Bundle<'_>)> {
    vec![
        ("no_defense", Bundle { classifier: &stack.classifier, purifier: Purifier::None }),
        ("topoae", Bundle { classifier: &stack.classifier, purifier: Purifier::Topoae(&stack.topoae) }),
        (
            "reformer",
            Bundle {
                classifier: &stack.classifier,
                purifier: Purifier::Reformer { topoae: &stack.topoae, vae: &stack.vae_w0, aux: None },
            },
        ),
        (
            "aux",
            Bundle {
                classifier: &stack.classifier,
                purifier: Purifier::Reformer {
                    topoae: &stack.topoae,
                    vae: &stack.vae_w0,
                    aux: Some(&stack.aux_w0),
                },
            },
        ),
        (
            "warmup",
            Bundle {
                classifier: &stack.classifier,
                purifier: Purifier::Reformer {
                    topoae: &stack.topoae,
                    vae: &stack.vae_warm,
                    aux: Some(&stack.aux_warm),
                },
            },
        ),
    ]
}

/// One attack row of the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: String,
    pub params: AttackConfig,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub precision_macro: f64,
    pub asr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub attacks: Vec<AttackReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub seed: u64,
    pub stages: Vec<StageReport>,
}

impl EvalReport {
    /// Flat CSV mirror of the nested report.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "stage,kind,epsilon,alpha,steps,c,kappa,cw_lr,k,seed,random_start,accuracy,f1_macro,precision_macro,asr\n",
        );
        for stage in &self.stages {
            for a in &stage.attacks {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    stage.name,
                    a.kind,
                    a.params.epsilon,
                    a.params.alpha(),
                    a.params.steps,
                    a.params.c,
                    a.params.kappa,
                    a.params.cw_lr,
                    a.params.k,
                    a.params.seed,
                    a.params.random_start,
                    a.accuracy,
                    a.f1_macro,
                    a.precision_macro,
                    a.asr
                ));
            }
        }
        out
    }
}

fn kind_name(cfg: &AttackConfig) -> String {
    serde_json::to_value(cfg.kind)
        .expect("kind serializes")
        .as_str()
        .expect("kind is a string")
        .to_string()
}

/// Crafts one attack against one stage (in batches) and scores the stage's
/// predictions on the adversarial set.
pub fn attack_stage_report(
    bundle: &Bundle<'_>,
    test: &Dataset,
    attack: &AttackConfig,
    cfg: &PipelineConfig,
) -> Result<AttackReport> {
    let y = test.labels().to_vec();
    let (x, _) = test.all();
    let clean_pred = super::predict(&x, bundle, &NoiseSpec::Zero)?;

    let n = test.len();
    let pixels = x.numel() / n;
    let mut adv_data = Vec::with_capacity(x.numel());
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (xb, yb) = test.gather(&idx);
        let outcome = run_attack(bundle, &xb, &yb, attack)?;
        adv_data.extend_from_slice(outcome.x_adv.data());
    }
    let mut shape = x.shape().to_vec();
    shape[0] = n;
    let x_adv = Tensor::from_vec(shape, adv_data).expect("adversarial batch shape");
    debug_assert_eq!(x_adv.numel(), n * pixels);

    let adv_pred = super::predict(&x_adv, bundle, &NoiseSpec::Zero)?;
    let cm = confusion(&y, &adv_pred, test.class_count())?;
    let scores = averaged_scores(&cm, cfg.metric_average)?;
    let asr = attack_success_rate(&clean_pred, &adv_pred, &y)?;
    Ok(AttackReport {
        kind: kind_name(attack),
        params: *attack,
        accuracy: scores.accuracy,
        f1_macro: scores.f1,
        precision_macro: scores.precision,
        asr,
    })
}

/// Clean metrics for a stage, reported in the same row shape with kind
/// `clean` and a zeroed attack config.
pub fn clean_report(bundle: &Bundle<'_>, test: &Dataset, cfg: &PipelineConfig) -> Result<AttackReport> {
    let y = test.labels().to_vec();
    let (x, _) = test.all();
    let pred = super::predict(&x, bundle, &NoiseSpec::Zero)?;
    let cm = confusion(&y, &pred, test.class_count())?;
    let scores = averaged_scores(&cm, cfg.metric_average)?;
    Ok(AttackReport {
        kind: "clean".to_string(),
        params: AttackConfig { epsilon: 0.0, steps: 1, random_start: false, ..Default::default() },
        accuracy: scores.accuracy,
        f1_macro: scores.f1,
        precision_macro: scores.precision,
        asr: 0.0,
    })
}

/// The full matrix: every configured attack crafted white-box against
/// every stage composition.
pub fn ablation_run(
    test: &Dataset,
    attacks: &[AttackConfig],
    cfg: &PipelineConfig,
    stack: &TrainedStack,
    dataset_name: &str,
) -> Result<EvalReport> {
    let mut stages = Vec::new();
    for (name, bundle) in stage_bundles(stack) {
        let mut rows = Vec::new();
        for attack in attacks {
            rows.push(attack_stage_report(&bundle, test, attack, cfg)?);
        }
        stages.push(StageReport { name: name.to_string(), attacks: rows });
    }
    Ok(EvalReport { dataset: dataset_name.to_string(), seed: cfg.seed, stages })
}
