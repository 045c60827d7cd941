//! Tuning types, LoRA adapters, multi-stage training recipes and
//! tuning-scoped checkpoints.

pub mod checkpoint;
pub mod lora;
pub mod tuning;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LabelMode;
use crate::error::{Error, Result};
use crate::model::params::{Component, ParamStore};
use crate::numerics::{Scalar, SeedStream, DEFAULT_WARMUP_RATIO};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, verify_checkpoint, LoadReport, Manifest};
pub use lora::{lora_forward, merge_lora, LoraAdapter};
pub use tuning::{apply_plan, TuningPlan, TuningType, DEFAULT_LORA_TARGETS};

/// Loads a checkpoint for inference. A LoRA-scoped checkpoint gets adapters
/// attached from its own plan, filled from the file, then merged, so the
/// store ends up with plain weights either way.
pub fn restore_checkpoint<S: Scalar>(store: &mut ParamStore<S>, dir: &Path) -> Result<LoadReport> {
    let manifest = read_manifest(dir)?;
    let lora = Component::ALL.iter().any(|&c| matches!(manifest.plan.get(c), TuningType::Lora { .. }));
    if lora {
        // Adapter values are overwritten by the load; the stream only fixes shapes.
        apply_plan(store, &manifest.plan, &mut SeedStream::new(0).rng())?;
    }
    let report = load_checkpoint(store, dir, None)?;
    if lora {
        merge_lora(store);
    }
    store.set_all_trainable(false);
    Ok(report)
}

/// Where a stage's initial weights for some components come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum InitSource {
    /// A checkpoint directory outside this pipeline.
    Checkpoint(PathBuf),
    /// The checkpoint written by an earlier stage of this recipe.
    Stage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitFrom {
    pub source: InitSource,
    pub components: Vec<Component>,
}

fn default_warmup() -> f64 {
    DEFAULT_WARMUP_RATIO
}

fn default_micro_batch() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub plan: TuningPlan,
    /// Training data; usually supplied by the run config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Chat template; the model's template when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub label_mode: LabelMode,
    pub epochs: usize,
    pub lr: f64,
    pub global_batch: usize,
    #[serde(default = "default_micro_batch")]
    pub micro_batch: usize,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<InitFrom>,
}

impl Stage {
    /// Micro-batches per optimizer step.
    pub fn accumulation(&self) -> usize {
        self.global_batch / self.micro_batch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("stage `{}`: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return fail("name must be a plain directory name".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.micro_batch == 0 || self.global_batch == 0 || self.global_batch % self.micro_batch != 0 {
            return fail(format!(
                "global batch {} is not a positive multiple of micro batch {}",
                self.global_batch, self.micro_batch
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(init) = &self.init_from {
            if init.components.is_empty() {
                return fail("init_from lists no components".into());
            }
        }
        self.plan
            .validate()
            .map_err(|e| Error::Validation(format!("stage `{}`: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecipe {
    pub name: String,
    pub stages: Vec<Stage>,
}

impl TrainingRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation(format!("recipe `{}` has no stages", self.name)));
        }
        let mut earlier = BTreeSet::new();
        for s in &self.stages {
            s.validate()?;
            if let Some(InitFrom {
                source: InitSource::Stage(src),
                ..
            }) = &s.init_from
            {
                if !earlier.contains(src.as_str()) {
                    return Err(Error::Validation(format!(
                        "stage `{}` initializes from `{src}`, which is not an earlier stage",
                        s.name
                    )));
                }
            }
            if !earlier.insert(s.name.as_str()) {
                return Err(Error::Validation(format!("duplicate stage name `{}`", s.name)));
            }
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Vision frozen; connector and LLM fully tuned at 2e-5 with batch 128,
/// starting from the preceding stage's connector.
fn finetune_stage() -> Stage {
    Stage {
        name: "finetune".into(),
        plan: TuningPlan::new(TuningType::Frozen, TuningType::Full, TuningType::Full),
        dataset: None,
        template: None,
        label_mode: LabelMode::Finetune,
        epochs: 1,
        lr: 2e-5,
        global_batch: 128,
        micro_batch: default_micro_batch(),
        warmup_ratio: DEFAULT_WARMUP_RATIO,
        weight_decay: 0.0,
        init_from: Some(InitFrom {
            source: InitSource::Stage("pretrain".into()),
            components: vec![Component::Connector],
        }),
    }
}

/// Pretrain only the connector (lr 1e-3, batch 256), then finetune the
/// connector and LLM (lr 2e-5, batch 128).
pub fn builtin_base_recipe() -> TrainingRecipe {
    TrainingRecipe {
        name: "base".into(),
        stages: vec![
            Stage {
                name: "pretrain".into(),
                plan: TuningPlan::new(TuningType::Frozen, TuningType::Full, TuningType::Frozen),
                dataset: None,
                template: None,
                label_mode: LabelMode::Pretrain,
                epochs: 1,
                lr: 1e-3,
                global_batch: 256,
                micro_batch: default_micro_batch(),
                warmup_ratio: DEFAULT_WARMUP_RATIO,
                weight_decay: 0.0,
                init_from: None,
            },
            finetune_stage(),
        ],
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShareRecipeConfig {
    /// Checkpoint of a base-recipe pretrain stage.
    pub init_from: Option<PathBuf>,
}

/// Pretrain connector and LLM (lr 2e-5, batch 256) with the connector
/// loaded from a base pretrain checkpoint, then the base finetune stage.
pub fn builtin_share_recipe(base_pretrain: Option<&std::path::Path>) -> Result<TrainingRecipe> {
    let ckpt = base_pretrain.ok_or_else(|| {
        Error::Validation("recipe `share` needs `init_from`: a base pretrain checkpoint directory".into())
    })?;
    Ok(TrainingRecipe {
        name: "share".into(),
        stages: vec![
            Stage {
                name: "pretrain".into(),
                plan: TuningPlan::new(TuningType::Frozen, TuningType::Full, TuningType::Full),
                dataset: None,
                template: None,
                label_mode: LabelMode::Pretrain,
                epochs: 1,
                lr: 2e-5,
                global_batch: 256,
                micro_batch: default_micro_batch(),
                warmup_ratio: DEFAULT_WARMUP_RATIO,
                weight_decay: 0.0,
                init_from: Some(InitFrom {
                    source: InitSource::Checkpoint(ckpt.to_path_buf()),
                    components: vec![Component::Connector],
                }),
            },
            finetune_stage(),
        ],
    })
}
