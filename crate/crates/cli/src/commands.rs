//! One function per CLI verb. Each validates fully before writing anything.

use std::fmt;
use std::path::{Path, PathBuf};

use minivlm::data::tokenizer::IMAGE_LITERAL;
use minivlm::data::{load_image, write_synth, Conversation, Turn};
use minivlm::eval::{evaluate, write_report, Benchmark, EvalReport};
use minivlm::model::{ComponentKind, MultimodalModel};
use minivlm::recipe::restore_checkpoint;
use minivlm::trainer::{run_pipeline, StageRun};
use minivlm::{Error, Model, Registry};

use crate::config::{ConfigErrors, ResolvedConfig, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Config(ConfigErrors),
    Run(Error),
}

impl Failure {
    /// 1 validation, 2 runtime/numeric, 3 I/O or integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(e) => e.exit_code(),
            Failure::Run(e) => e.exit_code(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "{e}"),
            Failure::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<ConfigErrors> for Failure {
    fn from(e: ConfigErrors) -> Self {
        Failure::Config(e)
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a config and applies command-line overrides. A config's own
/// `workdir` is relative to the config file; `--workdir` to the cwd.
pub fn load_config(path: &Path, workdir: Option<&Path>, seed: Option<u64>) -> Outcome<RunConfig> {
    let mut config = RunConfig::load(path)?;
    config.workdir = match workdir {
        Some(w) => w.to_path_buf(),
        None => config_dir(path).join(&config.workdir),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn resolve(config: &RunConfig, config_path: &Path, registry: &Registry) -> Outcome<ResolvedConfig> {
    Ok(config.resolve(registry, &config_dir(config_path))?)
}

pub struct TrainSummary {
    pub resolved: ResolvedConfig,
    pub stages: Vec<StageRun>,
    pub reports: Vec<EvalReport>,
}

pub fn train(config_path: &Path, workdir: Option<&Path>, seed: Option<u64>) -> Outcome<TrainSummary> {
    let registry = Registry::with_builtins();
    let config = load_config(config_path, workdir, seed)?;
    let resolved = resolve(&config, config_path, &registry)?;
    let echo = resolved.write(&resolved.workdir)?;
    log::info!("resolved config (seed {}) written to {}", resolved.seed, echo.display());

    let mut model = MultimodalModel::build(&registry, &resolved.model, resolved.seed)?;
    let stages = run_pipeline(
        &mut model,
        &registry,
        &resolved.recipe,
        &resolved.workdir,
        resolved.seed,
        &resolved.checkpoint_config(),
    )?;
    for s in &stages {
        let note = if s.resumed { " (already complete)".to_string() } else { format!(" ({} steps)", s.steps) };
        println!("stage {}: {}{note}", s.stage, s.checkpoint.display());
    }
    model.store.set_all_trainable(false);
    let mut reports = Vec::new();
    for path in &resolved.eval {
        let report = evaluate_and_write(&model, path, &resolved.workdir, minivlm::eval::DEFAULT_MAX_NEW_TOKENS)?;
        println!("eval {}: accuracy {:.4} on {} samples", report.benchmark, report.accuracy, report.samples);
        reports.push(report);
    }
    Ok(TrainSummary {
        resolved,
        stages,
        reports,
    })
}

fn evaluate_and_write(model: &Model, benchmark: &Path, workdir: &Path, max_new_tokens: usize) -> Outcome<EvalReport> {
    let bench = Benchmark::load(benchmark)?;
    let report = evaluate(model, &bench, max_new_tokens)?;
    let path = write_report(&report, workdir)?;
    log::info!("report written to {}", path.display());
    Ok(report)
}

/// Builds the configured model and loads checkpoints in order.
pub fn load_model(config: &RunConfig, checkpoints: &[PathBuf]) -> Outcome<Model> {
    let registry = Registry::with_builtins();
    let spec = config.resolve_model(&registry)?;
    if checkpoints.is_empty() {
        return Err(Error::Validation("at least one --checkpoint is required".into()).into());
    }
    let mut model = MultimodalModel::build(&registry, &spec, config.seed)?;
    for dir in checkpoints {
        let report = restore_checkpoint(&mut model.store, dir)?;
        if !report.extra.is_empty() {
            return Err(Error::Validation(format!(
                "checkpoint {} has tensors the model lacks: {}",
                dir.display(),
                report.extra.join(", ")
            ))
            .into());
        }
        log::info!("loaded {} tensors from {}", report.loaded.len(), dir.display());
    }
    Ok(model)
}

pub fn eval(
    config_path: &Path,
    checkpoints: &[PathBuf],
    benchmark: &Path,
    workdir: Option<&Path>,
    max_new_tokens: usize,
) -> Outcome<EvalReport> {
    let config = load_config(config_path, workdir, None)?;
    if !benchmark.is_file() {
        return Err(Error::Validation(format!("benchmark {} does not exist", benchmark.display())).into());
    }
    let model = load_model(&config, checkpoints)?;
    let report = evaluate_and_write(&model, benchmark, &config.workdir, max_new_tokens)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(report)
}

pub fn generate(
    config_path: &Path,
    checkpoints: &[PathBuf],
    prompt: &str,
    image: Option<&Path>,
    max_new_tokens: usize,
) -> Outcome<String> {
    let config = load_config(config_path, None, None)?;
    let conv = Conversation::new(
        "prompt",
        image.map(|p| p.to_string_lossy().into_owned()),
        vec![Turn::human(prompt)],
    )
    .map_err(|e| Error::Validation(format!("{e} (use {IMAGE_LITERAL} in --prompt together with --image)")))?;
    let model = load_model(&config, checkpoints)?;
    let raw = image.map(load_image::<f32>).transpose()?;
    let answer = model.generate(&conv, raw.as_ref(), max_new_tokens)?;
    println!("{answer}");
    Ok(answer)
}

pub fn components() -> Outcome {
    let registry = Registry::with_builtins();
    for kind in [
        ComponentKind::Vision,
        ComponentKind::Connector,
        ComponentKind::Llm,
        ComponentKind::Template,
        ComponentKind::Recipe,
    ] {
        println!("{kind}: {}", registry.names(kind).join(", "));
    }
    Ok(())
}

pub fn synth(out: &Path, n: usize, heldout_n: usize, seed: u64) -> Outcome {
    let files = write_synth(out, n, heldout_n, seed)?;
    for p in [&files.train, &files.heldout, &files.train_benchmark, &files.heldout_benchmark] {
        println!("{}", p.display());
    }
    Ok(())
}
