//! Stage execution: shuffling, token-weighted gradient accumulation, AdamW
//! steps on the cosine schedule, JSONL metrics, plan-scoped checkpoints, and
//! resumable multi-stage pipelines.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_dataset, load_image, truncate, ChatTemplate, Conversation, LabelMode, TokenizedSample};
use crate::data::tokenize_and_label;
use crate::error::{Error, Result};
use crate::model::{ComponentRegistry, Ctx, MultimodalModel, TensorKey};
use crate::numerics::{lr_schedule, AdamW, AdamWConfig, Scalar, SeedStream, Tensor, IGNORE_INDEX};
use crate::recipe::{
    apply_plan, load_checkpoint, merge_lora, save_checkpoint, verify_checkpoint, InitSource, Stage, TrainingRecipe,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
/// Decay of the running loss average.
pub const LOSS_EMA_DECAY: f64 = 0.99;

/// One training example with its image already prepared for the model.
#[derive(Debug, Clone)]
pub struct Example<S> {
    pub sample: TokenizedSample,
    pub image: Option<Tensor<S>>,
}

impl<S> Example<S> {
    /// Positions that contribute to the next-token loss.
    pub fn supervised_targets(&self) -> usize {
        self.sample.labels.iter().skip(1).filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Tokenizes, labels, truncates to the model's context, and loads images
/// (paths relative to `image_root`).
pub fn prepare_examples<S: Scalar>(
    model: &MultimodalModel<S>,
    convs: &[Conversation],
    template: &ChatTemplate,
    mode: LabelMode,
    image_root: &Path,
) -> Result<Vec<Example<S>>> {
    let max_pos = model.llm.max_positions();
    convs
        .iter()
        .map(|conv| {
            let sample = tokenize_and_label(conv, template, &model.tokenizer, mode)?;
            let (sample, image) = match &conv.image_path {
                Some(p) => {
                    let raw = load_image::<S>(&image_root.join(p))?;
                    let budget = (max_pos + 1).saturating_sub(model.image_tokens());
                    (truncate(&sample, budget)?, Some(model.prepare_image(&raw)?))
                }
                None => (truncate(&sample, max_pos)?, None),
            };
            Ok(Example { sample, image })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("preparing training data: {m}")),
            other => other,
        })
}

/// Loads a dataset file and prepares its examples.
pub fn load_examples<S: Scalar>(
    model: &MultimodalModel<S>,
    path: &Path,
    template: &ChatTemplate,
    mode: LabelMode,
) -> Result<Vec<Example<S>>> {
    let convs = load_dataset(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    prepare_examples(model, &convs, template, mode, root)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    /// Supervised target tokens in this step's accumulation group.
    pub tokens: usize,
    pub wall_ms: u64,
}

/// Append-only JSONL metrics file, flushed after every record.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: usize,
}

impl MetricsLog {
    /// Creates (truncating) the file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_step: 0,
        })
    }

    pub fn log(&mut self, record: &MetricRecord) -> Result<()> {
        if record.step <= self.last_step {
            return Err(Error::Usage(format!(
                "metric step {} after step {}",
                record.step, self.last_step
            )));
        }
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last_step = record.step;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

pub struct TrainState<S> {
    /// Optimizer steps taken.
    pub step: usize,
    pub epoch: usize,
    pub optimizer: AdamW<TensorKey, S>,
    pub loss_ema: Option<f64>,
    pub losses: Vec<f64>,
}

impl<S: Scalar> TrainState<S> {
    fn new(config: AdamWConfig) -> Self {
        Self {
            step: 0,
            epoch: 0,
            optimizer: AdamW::new(config),
            loss_ema: None,
            losses: Vec::new(),
        }
    }

    fn record_loss(&mut self, loss: f64) {
        self.losses.push(loss);
        self.loss_ema = Some(match self.loss_ema {
            None => loss,
            Some(ema) => LOSS_EMA_DECAY * ema + (1.0 - LOSS_EMA_DECAY) * loss,
        });
    }
}

/// Optimizer steps a stage takes over `n` examples.
pub fn planned_steps(stage: &Stage, n: usize) -> usize {
    stage.epochs * (n / stage.global_batch)
}

/// Adds to the store's gradient buffers the gradient of
/// `Σᵢ nᵢ·lossᵢ / total_tokens` over `examples`, one graph per example.
/// Returns the group loss `Σᵢ nᵢ·lossᵢ / total_tokens`.
pub fn accumulate_group<S: Scalar>(
    model: &mut MultimodalModel<S>,
    examples: &[&Example<S>],
    total_tokens: usize,
) -> Result<f64> {
    let mut group_loss = 0.0;
    for ex in examples {
        let n = ex.supervised_targets();
        if n == 0 {
            continue;
        }
        let weight = n as f64 / total_tokens as f64;
        let grads = {
            let mut ctx = Ctx::new(&model.store);
            let loss = model.loss(&mut ctx, &ex.sample, ex.image.as_ref())?;
            group_loss += weight * ctx.graph.item_f64(loss);
            let scaled = ctx.graph.scale(loss, S::from_f64c(weight));
            ctx.graph.backward(scaled)?;
            ctx.owned_grads()
        };
        model
            .store
            .accumulate_grads(grads.iter().map(|(k, g)| (*k, g.as_slice())))?;
    }
    Ok(group_loss)
}

/// Outcome of [`train_stage`].
pub struct StageOutcome<S> {
    pub state: TrainState<S>,
    pub checkpoint: PathBuf,
}

/// Trains one stage on prepared examples. The plan must already be applied
/// (see [`apply_plan`]). Writes `metrics.jsonl` and a plan-scoped checkpoint
/// under `dir`.
pub fn train_stage<S: Scalar>(
    model: &mut MultimodalModel<S>,
    stage: &Stage,
    examples: &[Example<S>],
    seeds: SeedStream,
    dir: &Path,
    config: &Value,
) -> Result<StageOutcome<S>> {
    stage.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation(format!("stage `{}` has an empty dataset", stage.name)));
    }
    let total_steps = planned_steps(stage, examples.len());
    if total_steps == 0 {
        return Err(Error::Validation(format!(
            "stage `{}`: {} examples do not fill one global batch of {}",
            stage.name,
            examples.len(),
            stage.global_batch
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut log = MetricsLog::create(&dir.join(METRICS_FILE))?;
    let mut state = TrainState::new(AdamWConfig {
        weight_decay: stage.weight_decay,
        ..AdamWConfig::default()
    });
    let mut shuffle_rng = seeds.split("shuffle").rng();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let start = Instant::now();
    for epoch in 0..stage.epochs {
        state.epoch = epoch;
        order.shuffle(&mut shuffle_rng);
        // The trailing partial group is dropped.
        for group in order.chunks_exact(stage.global_batch) {
            let step = state.step + 1;
            let lr = lr_schedule(step, total_steps, stage.lr, stage.warmup_ratio);
            model.store.zero_grad();
            let members: Vec<&Example<S>> = group.iter().map(|&i| &examples[i]).collect();
            let tokens: usize = members.iter().map(|e| e.supervised_targets()).sum();
            let mut loss = 0.0;
            if tokens > 0 {
                for micro in members.chunks(stage.micro_batch) {
                    loss += accumulate_group(model, micro, tokens)?;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite { step, lr });
            }
            state.optimizer.step(lr, model.store.tensors_mut())?;
            state.step = step;
            state.record_loss(loss);
            log.log(&MetricRecord {
                step,
                stage: stage.name.clone(),
                loss,
                lr,
                tokens,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
        }
    }
    model.store.clear_grads();
    let checkpoint = dir.join(CHECKPOINT_DIR);
    save_checkpoint(&model.store, &stage.plan, &checkpoint, config)?;
    info!(
        "stage `{}`: {} steps, final loss {:.4}",
        stage.name,
        state.step,
        state.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(StageOutcome { state, checkpoint })
}

/// Per-stage result of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageRun {
    pub stage: String,
    pub checkpoint: PathBuf,
    /// Optimizer steps taken in this invocation (0 when resumed).
    pub steps: usize,
    pub resumed: bool,
}

fn stage_checkpoint(workdir: &Path, stage: &str) -> PathBuf {
    workdir.join(stage).join(CHECKPOINT_DIR)
}

fn init_source_dir(workdir: &Path, source: &InitSource) -> PathBuf {
    match source {
        InitSource::Checkpoint(p) => p.clone(),
        InitSource::Stage(s) => stage_checkpoint(workdir, s),
    }
}

/// Checks datasets and external `init_from` checkpoints before any work.
pub fn validate_pipeline(recipe: &TrainingRecipe) -> Result<()> {
    recipe.validate()?;
    for stage in &recipe.stages {
        match &stage.dataset {
            None => {
                return Err(Error::Validation(format!("stage `{}` has no dataset", stage.name)));
            }
            Some(p) if !p.is_file() => {
                return Err(Error::Validation(format!(
                    "stage `{}` dataset {} does not exist",
                    stage.name,
                    p.display()
                )));
            }
            Some(p) => {
                let n = load_dataset(p)?.len();
                if n < stage.global_batch {
                    return Err(Error::Validation(format!(
                        "stage `{}` dataset {} has {n} records, fewer than the global batch {}",
                        stage.name,
                        p.display(),
                        stage.global_batch
                    )));
                }
            }
        }
        if let Some(init) = &stage.init_from {
            if let InitSource::Checkpoint(p) = &init.source {
                verify_checkpoint(p).map_err(|e| {
                    Error::Validation(format!("stage `{}` init_from {}: {e}", stage.name, p.display()))
                })?;
            }
        }
    }
    Ok(())
}

/// Runs every stage in order under `workdir/<stage>/`. A stage whose
/// checkpoint already verifies is not retrained; its checkpoint is loaded
/// instead. LoRA adapters are merged into the base weights after each stage.
pub fn run_pipeline<S: Scalar>(
    model: &mut MultimodalModel<S>,
    registry: &ComponentRegistry<S>,
    recipe: &TrainingRecipe,
    workdir: &Path,
    seed: u64,
    config: &Value,
) -> Result<Vec<StageRun>> {
    validate_pipeline(recipe)?;
    let root = SeedStream::new(seed).split("pipeline");
    let mut runs = Vec::with_capacity(recipe.stages.len());
    for stage in &recipe.stages {
        let seeds = root.split(&stage.name);
        let dir = workdir.join(&stage.name);
        let checkpoint = dir.join(CHECKPOINT_DIR);
        if let Some(init) = &stage.init_from {
            let src = init_source_dir(workdir, &init.source);
            let report = load_checkpoint(&mut model.store, &src, Some(&init.components))?;
            info!(
                "stage `{}`: initialized {} tensors from {}",
                stage.name,
                report.loaded.len(),
                src.display()
            );
        }
        apply_plan(&mut model.store, &stage.plan, &mut seeds.split("adapters").rng())?;
        let done = dir.join(METRICS_FILE).is_file() && verify_checkpoint(&checkpoint).is_ok();
        let (steps, resumed) = if done {
            load_checkpoint(&mut model.store, &checkpoint, None)?;
            info!("stage `{}`: complete, loaded {}", stage.name, checkpoint.display());
            (0, true)
        } else {
            let template = match &stage.template {
                Some(name) => registry.create_template(name, &Value::Null)?,
                None => model.template.clone(),
            };
            let path = stage.dataset.as_ref().expect("validated");
            let examples = load_examples(model, path, &template, stage.label_mode)?;
            let outcome = train_stage(model, stage, &examples, seeds, &dir, config)?;
            (outcome.state.step, false)
        };
        if model.store.adapters().next().is_some() {
            merge_lora(&mut model.store);
        }
        runs.push(StageRun {
            stage: stage.name.clone(),
            checkpoint,
            steps,
            resumed,
        });
    }
    Ok(runs)
}

#[cfg(test)]
mod tests;
