//! Command-line surface: training, attacking, evaluating, ablating,
//! gradient-checking, and latent export, driven by a JSON config with
//! dotted-path overrides.
//!
//! Every run echoes its fully resolved configuration to
//! `resolved_config.json` in the output directory; feeding that file back
//! reproduces the run exactly. All artifacts are byte-deterministic given
//! one master seed; wall-clock timings go only to `run.log`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind};
use crate::dataio::{self, Dataset, LoadOptions};
use crate::models::{weights, AuxModule, ClassifierConfig, ClassifierModel, ReformerVae, TopoAeModel};
use crate::pipeline::{
    ablation_run, clean_report, train_classifier, train_reformer_freezeflow,
    train_topoae, Bundle, EvalReport, PipelineConfig, Purifier, StageReport, TrainedStack,
    TrainHistory,
};

/// Environment variable naming the default root for relative IDX paths.
pub const DATA_DIR_ENV: &str = "TOPOREFORM_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    ConfigInvalid(String),
    #[error("{0}")]
    MissingArtifact(String),
    #[error("{0}")]
    DataInvalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid(_) => "ConfigInvalid",
            CliError::MissingArtifact(_) => "MissingArtifact",
            CliError::DataInvalid(_) => "DataInvalid",
            CliError::Runtime(_) => "Runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid(_) | CliError::MissingArtifact(_) | CliError::DataInvalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<crate::pipeline::PipelineError> for CliError {
    fn from(e: crate::pipeline::PipelineError) -> Self {
        match e {
            crate::pipeline::PipelineError::Config(msg) => CliError::ConfigInvalid(msg),
            crate::pipeline::PipelineError::EmptyDataset => CliError::DataInvalid("dataset is empty".into()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::dataio::DataError> for CliError {
    fn from(e: crate::dataio::DataError) -> Self {
        CliError::DataInvalid(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io: {e}"))
    }
}

/// Where images come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedurally rendered ten-class digits; needs no files.
    #[default]
    Synthetic,
    /// IDX image/label pairs on disk.
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// The official EMNIST files store transposed glyphs; disable for
    /// datasets in standard orientation (MNIST).
    pub emnist_transpose: bool,
    pub train_limit: usize,
    pub test_limit: usize,
    /// Evaluation subset size for attack crafting, which dominates runtime.
    pub attack_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
            emnist_transpose: true,
            train_limit: 8000,
            test_limit: 2000,
            attack_limit: 512,
        }
    }
}

/// The full run configuration tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub attacks: Vec<AttackConfig>,
    pub output_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            pipeline: PipelineConfig::default(),
            attacks: vec![
                AttackConfig { kind: AttackKind::Fgsm, epsilon: 0.1, steps: 1, random_start: false, ..Default::default() },
                AttackConfig { kind: AttackKind::Pgd, epsilon: 0.1, steps: 40, ..Default::default() },
                AttackConfig { kind: AttackKind::Cw, c: 10.0, steps: 200, ..Default::default() },
            ],
            output_dir: "out".into(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses a config from JSON text, rejecting unknown keys.
    pub fn parse_json(text: &str) -> Result<RunConfig, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::ConfigInvalid(e.to_string()))
    }

    /// Fills derived defaults: a zero seed anywhere inherits the master
    /// seed so one `--seed` flag pins the whole run.
    pub fn resolve(mut self) -> RunConfig {
        if self.pipeline.seed == 0 {
            self.pipeline.seed = self.seed;
        }
        for (i, attack) in self.attacks.iter_mut().enumerate() {
            if attack.seed == 0 {
                attack.seed = self.seed.wrapping_add(1000 + i as u64);
            }
        }
        self
    }
}

/// Applies one `--set key.path=value` override onto the raw JSON tree.
fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::ConfigInvalid(format!("override '{spec}' is not KEY=VALUE")))?;
    let value: serde_json::Value = match serde_json::from_str(raw_value) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw_value.to_string()),
    };
    let mut cursor = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(index) = segment.parse::<usize>() {
            let arr = cursor
                .as_array_mut()
                .ok_or_else(|| CliError::ConfigInvalid(format!("'{path}': segment {segment} indexes a non-array")))?;
            if index >= arr.len() {
                return Err(CliError::ConfigInvalid(format!("'{path}': index {index} out of bounds")));
            }
            if last {
                arr[index] = value;
                return Ok(());
            }
            cursor = &mut arr[index];
        } else {
            if !cursor.is_object() {
                return Err(CliError::ConfigInvalid(format!("'{path}': segment {segment} indexes a non-object")));
            }
            let map = cursor.as_object_mut().expect("checked object");
            if last {
                map.insert(segment.to_string(), value);
                return Ok(());
            }
            cursor = map
                .entry(segment.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Loads, overrides, and validates the run configuration.
pub fn load_config(
    config_path: Option<&Path>,
    overrides: &[String],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut tree: serde_json::Value = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::ConfigInvalid(e.to_string()))?
        }
        None => serde_json::json!({}),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let mut config: RunConfig =
        serde_json::from_value(tree).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
    if let Some(out) = out {
        config.output_dir = out.display().to_string();
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.pipeline.validate().map_err(CliError::from)?;
    for attack in &config.attacks {
        attack.validate().map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
    }
    Ok(config.resolve())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Train the downstream classifier and freeze it.
    TrainClassifier,
    /// Train the topology-preserving autoencoder on clean images.
    TrainTopoae,
    /// Train the reformer VAE and auxiliary module (freeze-flow schedule).
    TrainReformer,
    /// Craft the configured attacks against the trained composition.
    Attack,
    /// Report clean metrics for the trained compositions.
    Evaluate,
    /// Full stage-by-attack ablation matrix.
    Ablate,
    /// Finite-difference check of every autodiff op.
    Gradcheck,
    /// Export encoder latents to CSV.
    ExportLatents,
}

#[derive(Debug, Parser)]
#[command(name = "toporeform", about = "Topology-preserving purification pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set pipeline.warmup_epochs=3 (repeatable).
    #[arg(long = "set", global = true)]
    pub overrides: Vec<String>,
    /// Output directory override.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

/// Parses argv and runs; returns the process exit code and prints
/// structured `ERROR <code>: <message>` lines to stderr on failure.
pub fn execute<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version printing itself.
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command, cli.config.as_deref(), &cli.overrides, cli.out.as_deref(), cli.seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code(), e);
            e.exit_code()
        }
    }
}

/// Runs one command under a resolved configuration.
pub fn run(
    command: Command,
    config_path: Option<&Path>,
    overrides: &[String],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let config = load_config(config_path, overrides, out, seed)?;
    let out_dir = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("resolved_config.json"),
        serde_json::to_string_pretty(&config).expect("config serializes"),
    )?;
    let mut log = RunLog::open(&out_dir)?;
    log.line(&format!("command {command:?} seed {}", config.seed))?;

    match command {
        Command::TrainClassifier => cmd_train_classifier(&config, &out_dir, &mut log),
        Command::TrainTopoae => cmd_train_topoae(&config, &out_dir, &mut log),
        Command::TrainReformer => cmd_train_reformer(&config, &out_dir, &mut log),
        Command::Attack => cmd_attack(&config, &out_dir, &mut log),
        Command::Evaluate => cmd_evaluate(&config, &out_dir, &mut log),
        Command::Ablate => cmd_ablate(&config, &out_dir, &mut log),
        Command::Gradcheck => cmd_gradcheck(&config, &out_dir, &mut log),
        Command::ExportLatents => cmd_export_latents(&config, &out_dir, &mut log),
    }
}

/// Timestamped log; the one artifact allowed to differ between reruns.
struct RunLog {
    file: std::fs::File,
}

impl RunLog {
    fn open(dir: &Path) -> Result<Self, CliError> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
        Ok(RunLog { file })
    }

    fn line(&mut self, msg: &str) -> Result<(), CliError> {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(self.file, "[{now}] {msg}")?;
        Ok(())
    }

    fn history(&mut self, phase: &str, history: &TrainHistory) -> Result<(), CliError> {
        for (epoch, (row, wall)) in history.rows.iter().zip(&history.wall_seconds).enumerate() {
            self.line(&format!("{phase} epoch {} {:?} wall {:.2}s", epoch + 1, row, wall))?;
        }
        Ok(())
    }
}

// ---- data and artifact plumbing -----------------------------------------

fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_data_path(name: &str) -> PathBuf {
    let p = PathBuf::from(name);
    if p.is_absolute() {
        p
    } else {
        data_root().join(p)
    }
}

/// Loads the train and test sets per the data config.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    match config.data.source {
        DataSource::Synthetic => {
            let train = dataio::synthetic_digits(config.data.train_limit, config.seed.wrapping_add(0x7472));
            let test = dataio::synthetic_digits(config.data.test_limit, config.seed.wrapping_add(0x7465));
            Ok((train, test))
        }
        DataSource::Idx => {
            let options = LoadOptions { transpose: config.data.emnist_transpose };
            let train = dataio::load_idx_with(
                &resolve_data_path(&config.data.train_images),
                &resolve_data_path(&config.data.train_labels),
                options,
            )?;
            let test = dataio::load_idx_with(
                &resolve_data_path(&config.data.test_images),
                &resolve_data_path(&config.data.test_labels),
                options,
            )?;
            Ok((train.take(config.data.train_limit), test.take(config.data.test_limit)))
        }
    }
}

fn reformer_file(out_dir: &Path, warmup: usize) -> PathBuf {
    out_dir.join(format!("reformer-w{warmup}.weights"))
}

fn load_artifact(path: &Path) -> Result<Vec<(String, crate::autodiff::Tensor)>, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "{} not found; run the corresponding train command first",
            path.display()
        )));
    }
    weights::load_file(path).map_err(|e| CliError::DataInvalid(format!("{}: {e}", path.display())))
}

fn load_classifier(config: &RunConfig, out_dir: &Path) -> Result<ClassifierModel, CliError> {
    let entries = load_artifact(&out_dir.join("classifier.weights"))?;
    let mut model = ClassifierModel::init(
        ClassifierConfig { ..config.pipeline.classifier },
        &mut crate::rng::stream_rng(0, 0),
    );
    model.load_named(&entries).map_err(|e| CliError::DataInvalid(e.to_string()))?;
    model.frozen = true;
    Ok(model)
}

fn load_topoae(config: &RunConfig, out_dir: &Path) -> Result<TopoAeModel, CliError> {
    let entries = load_artifact(&out_dir.join("topoae.weights"))?;
    let mut model = TopoAeModel::init(config.pipeline.topoae, &mut crate::rng::stream_rng(0, 0));
    model.load_named(&entries).map_err(|e| CliError::DataInvalid(e.to_string()))?;
    model.frozen = true;
    Ok(model)
}

fn load_reformer(config: &RunConfig, out_dir: &Path, warmup: usize) -> Result<(ReformerVae, AuxModule), CliError> {
    let entries = load_artifact(&reformer_file(out_dir, warmup))?;
    let mut vae = ReformerVae::init(config.pipeline.reformer, &mut crate::rng::stream_rng(0, 0));
    vae.load_named(&entries).map_err(|e| CliError::DataInvalid(e.to_string()))?;
    vae.frozen = true;
    let mut aux = AuxModule::init(
        config.pipeline.topoae.d_topo,
        &config.pipeline.reformer,
        &mut crate::rng::stream_rng(0, 0),
    );
    aux.load_named(&entries).map_err(|e| CliError::DataInvalid(e.to_string()))?;
    aux.frozen = true;
    Ok((vae, aux))
}

fn save_report(out_dir: &Path, stem: &str, report: &EvalReport) -> Result<(), CliError> {
    std::fs::write(
        out_dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    std::fs::write(out_dir.join(format!("{stem}.csv")), report.to_csv())?;
    Ok(())
}

// ---- commands ------------------------------------------------------------

fn cmd_train_classifier(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let (train, test) = load_data(config)?;
    let (model, history) = train_classifier(&train, &config.pipeline)?;
    weights::save_file(&out_dir.join("classifier.weights"), &model.named_params())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out_dir.join("classifier_history.csv"), history.to_csv())?;
    log.history("classifier", &history)?;

    let bundle = Bundle::undefended(&model);
    let row = clean_report(&bundle, &test, &config.pipeline)?;
    log.line(&format!("classifier clean accuracy {:.4}", row.accuracy))?;
    Ok(())
}

fn cmd_train_topoae(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let (train, _) = load_data(config)?;
    let (model, history) = train_topoae(&train, &config.pipeline)?;
    weights::save_file(&out_dir.join("topoae.weights"), &model.named_params())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out_dir.join("topoae_history.csv"), history.to_csv())?;
    log.history("topoae", &history)
}

fn cmd_train_reformer(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let (train, _) = load_data(config)?;
    let classifier = load_classifier(config, out_dir)?;
    let topoae = load_topoae(config, out_dir)?;
    let (vae, aux, history) = train_reformer_freezeflow(&train, &topoae, &classifier, &config.pipeline)?;
    let warmup = config.pipeline.warmup_epochs;
    let mut entries = vae.named_params();
    entries.extend(aux.named_params());
    weights::save_file(&reformer_file(out_dir, warmup), &entries).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out_dir.join(format!("reformer-w{warmup}_history.csv")), history.to_csv())?;
    log.history(&format!("reformer-w{warmup}"), &history)
}

/// The two compositions `attack` and `evaluate` report on: the bare
/// classifier and, when its artifacts exist, the full purification
/// pipeline trained with the configured warmup.
fn eval_stages<'a>(
    classifier: &'a ClassifierModel,
    purifier: Option<&'a (TopoAeModel, ReformerVae, AuxModule)>,
) -> Vec<(&'static str, Bundle<'a>)> {
    let mut stages = vec![("no_defense", Bundle::undefended(classifier))];
    if let Some((topoae, vae, aux)) = purifier {
        stages.push((
            "full",
            Bundle { classifier, purifier: Purifier::Reformer { topoae, vae, aux: Some(aux) } },
        ));
    }
    stages
}

fn load_full_purifier(
    config: &RunConfig,
    out_dir: &Path,
) -> Result<Option<(TopoAeModel, ReformerVae, AuxModule)>, CliError> {
    if !out_dir.join("topoae.weights").exists()
        || !reformer_file(out_dir, config.pipeline.warmup_epochs).exists()
    {
        return Ok(None);
    }
    let topoae = load_topoae(config, out_dir)?;
    let (vae, aux) = load_reformer(config, out_dir, config.pipeline.warmup_epochs)?;
    Ok(Some((topoae, vae, aux)))
}

fn cmd_attack(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let (_, test) = load_data(config)?;
    let test = test.take(config.data.attack_limit);
    let classifier = load_classifier(config, out_dir)?;
    let purifier = load_full_purifier(config, out_dir)?;

    let mut stages = Vec::new();
    for (name, bundle) in eval_stages(&classifier, purifier.as_ref()) {
        let mut rows = Vec::new();
        for (i, attack) in config.attacks.iter().enumerate() {
            let row = crate::pipeline::attack_stage_report(&bundle, &test, attack, &config.pipeline)?;
            // Persist the crafted batch for the strongest composition only;
            // one copy per attack is enough for inspection.
            if name != "no_defense" || purifier.is_none() {
                let (x, y) = test.all();
                let outcome = crate::attacks::run_attack(&bundle, &x, &y, attack)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                crate::attacks::save_adversarial_batch(out_dir, &format!("adv_{i}_{}", row.kind), &outcome, attack)?;
            }
            log.line(&format!("attack {} stage {name} f1 {:.4} asr {:.4}", row.kind, row.f1_macro, row.asr))?;
            rows.push(row);
        }
        stages.push(StageReport { name: name.to_string(), attacks: rows });
    }
    let report = EvalReport { dataset: dataset_name(config), seed: config.seed, stages };
    save_report(out_dir, "attack_report", &report)
}

fn cmd_evaluate(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let (_, test) = load_data(config)?;
    let test = test.take(config.data.attack_limit);
    let classifier = load_classifier(config, out_dir)?;
    let purifier = load_full_purifier(config, out_dir)?;

    let mut stages = Vec::new();
    for (name, bundle) in eval_stages(&classifier, purifier.as_ref()) {
        let row = clean_report(&bundle, &test, &config.pipeline)?;
        log.line(&format!("evaluate stage {name} accuracy {:.4}", row.accuracy))?;
        stages.push(StageReport { name: name.to_string(), attacks: vec![row] });
    }
    let report = EvalReport { dataset: dataset_name(config), seed: config.seed, stages };
    save_report(out_dir, "eval_report", &report)
}

fn cmd_ablate(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    if config.pipeline.warmup_epochs == 0 {
        return Err(CliError::ConfigInvalid(
            "ablate distinguishes the zero-warmup and warmup stages; set pipeline.warmup_epochs > 0".into(),
        ));
    }
    let (_, test) = load_data(config)?;
    let test = test.take(config.data.attack_limit);
    let classifier = load_classifier(config, out_dir)?;
    let topoae = load_topoae(config, out_dir)?;
    let (vae_w0, aux_w0) = load_reformer(config, out_dir, 0)?;
    let (vae_warm, aux_warm) = load_reformer(config, out_dir, config.pipeline.warmup_epochs)?;
    let stack = TrainedStack { classifier, topoae, vae_w0, aux_w0, vae_warm, aux_warm };

    let report = ablation_run(&test, &config.attacks, &config.pipeline, &stack, &dataset_name(config))?;
    for stage in &report.stages {
        for a in &stage.attacks {
            log.line(&format!("ablate {} {} f1 {:.4} asr {:.4}", stage.name, a.kind, a.f1_macro, a.asr))?;
        }
    }
    save_report(out_dir, "ablation_report", &report)
}

fn cmd_gradcheck(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let results = crate::autodiff::check_all_ops(config.seed).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut csv = String::from("op,max_rel_error\n");
    let mut worst: f64 = 0.0;
    println!("{:<22} max rel error", "op");
    for (op, err) in &results {
        println!("{:<22} {err:.3e}", format!("{op:?}"));
        csv.push_str(&format!("{op:?},{err}\n"));
        worst = worst.max(*err);
    }
    std::fs::write(out_dir.join("gradcheck.csv"), csv)?;
    log.line(&format!("gradcheck worst {worst:.3e}"))?;
    if worst >= 1e-4 {
        return Err(CliError::Runtime(format!("gradient check failed: worst relative error {worst:.3e}")));
    }
    Ok(())
}

fn cmd_export_latents(config: &RunConfig, out_dir: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let (_, test) = load_data(config)?;
    let topoae = load_topoae(config, out_dir)?;
    let rows = dataio::export_latents(&topoae, &test, &out_dir.join("latents.csv"))?;
    log.line(&format!("exported {rows} latent rows"))
}

fn dataset_name(config: &RunConfig) -> String {
    match config.data.source {
        DataSource::Synthetic => "synthetic".to_string(),
        DataSource::Idx => config.data.train_images.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse_json(r#"{"pipelines": {}}"#).unwrap_err();
        assert_eq!(err.code(), "ConfigInvalid");
        assert!(err.to_string().contains("pipelines"));
        let err = RunConfig::parse_json(r#"{"pipeline": {"warmup_epoch": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("warmup_epoch"));
    }

    #[test]
    fn defaults_parse_from_empty_object() {
        let cfg = RunConfig::parse_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_set_nested_and_array_paths() {
        let mut tree = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut tree, "pipeline.warmup_epochs=7").unwrap();
        apply_override(&mut tree, "attacks.1.epsilon=0.25").unwrap();
        apply_override(&mut tree, "data.source=\"idx\"").unwrap();
        let cfg: RunConfig = serde_json::from_value(tree).unwrap();
        assert_eq!(cfg.pipeline.warmup_epochs, 7);
        assert_eq!(cfg.attacks[1].epsilon, 0.25);
        assert_eq!(cfg.data.source, DataSource::Idx);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let mut tree = serde_json::to_value(RunConfig::default()).unwrap();
        assert!(apply_override(&mut tree, "no_equals_sign").is_err());
        assert!(apply_override(&mut tree, "attacks.99.epsilon=1").is_err());
        assert!(apply_override(&mut tree, "seed.too.deep=1").is_err());
    }

    #[test]
    fn typo_in_override_key_fails_validation() {
        let mut tree = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut tree, "pipeline.warmup_epoch=1").unwrap();
        let err = serde_json::from_value::<RunConfig>(tree).unwrap_err();
        assert!(err.to_string().contains("warmup_epoch"));
    }

    #[test]
    fn master_seed_propagates_at_resolution() {
        let cfg = RunConfig { seed: 99, ..Default::default() }.resolve();
        assert_eq!(cfg.pipeline.seed, 99);
        assert_eq!(cfg.attacks[0].seed, 99 + 1000);
        assert_eq!(cfg.attacks[1].seed, 99 + 1001);
        // Explicit seeds survive resolution.
        let mut explicit = RunConfig { seed: 5, ..Default::default() };
        explicit.pipeline.seed = 3;
        explicit.attacks[0].seed = 11;
        let resolved = explicit.resolve();
        assert_eq!(resolved.pipeline.seed, 3);
        assert_eq!(resolved.attacks[0].seed, 11);
    }

    #[test]
    fn resolved_config_reparses_to_itself() {
        let cfg = RunConfig { seed: 7, ..Default::default() }.resolve();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let reparsed = RunConfig::parse_json(&text).unwrap().resolve();
        assert_eq!(cfg, reparsed);
    }
}
