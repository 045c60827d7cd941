//! The JSON run configuration: one file records a whole experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use minivlm::data::conversation::read_records;
use minivlm::model::{ComponentKind, ModelSpec, MultimodalModel};
use minivlm::recipe::{verify_checkpoint, InitSource, TrainingRecipe};
use minivlm::{Error, Registry};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

/// A recipe by registry name, by name with a config, or written out inline.
#[derive(Debug, Clone, PartialEq)]
pub enum RecipeRef {
    Named { name: String, config: Value },
    Inline(TrainingRecipe),
}

impl Default for RecipeRef {
    fn default() -> Self {
        RecipeRef::Named {
            name: "base".into(),
            config: Value::Null,
        }
    }
}

impl Serialize for RecipeRef {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        match self {
            RecipeRef::Named { name, config } if config.is_null() => name.serialize(s),
            RecipeRef::Named { name, config } => {
                serde_json::json!({ "name": name, "config": config }).serialize(s)
            }
            RecipeRef::Inline(r) => r.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for RecipeRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = Value::deserialize(d)?;
        match v {
            Value::String(name) => Ok(RecipeRef::Named {
                name,
                config: Value::Null,
            }),
            Value::Object(ref map) if map.contains_key("stages") => {
                serde_json::from_value(v).map(RecipeRef::Inline).map_err(D::Error::custom)
            }
            Value::Object(mut map) => {
                let name = match map.remove("name") {
                    Some(Value::String(n)) => n,
                    _ => return Err(D::Error::custom("recipe object needs a string `name`")),
                };
                let config = map.remove("config").unwrap_or(Value::Null);
                if let Some(k) = map.keys().next() {
                    return Err(D::Error::custom(format!("unknown recipe field `{k}`")));
                }
                Ok(RecipeRef::Named { name, config })
            }
            _ => Err(D::Error::custom("recipe must be a name, {name, config}, or {name, stages}")),
        }
    }
}

/// Dataset paths: one file for every stage, or one per stage name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataPaths {
    All(PathBuf),
    PerStage(BTreeMap<String, PathBuf>),
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths::PerStage(BTreeMap::new())
    }
}

/// Per-stage hyperparameter overrides for desk-scale runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub recipe: RecipeRef,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stages: BTreeMap<String, StageOverride>,
    /// Benchmark files evaluated after training.
    #[serde(default)]
    pub eval: Vec<PathBuf>,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
}

/// Every problem found in a config, reported together.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<Error>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl ConfigErrors {
    /// Highest exit status among the collected errors.
    pub fn exit_code(&self) -> i32 {
        self.0.iter().map(Error::exit_code).max().unwrap_or(1)
    }
}

impl From<Error> for ConfigErrors {
    fn from(e: Error) -> Self {
        ConfigErrors(vec![e])
    }
}

/// A validated config with the recipe expanded and every path absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub seed: u64,
    /// Model spec with every component config materialized.
    pub model: ModelSpec,
    /// Stages with datasets and overrides applied.
    pub recipe: TrainingRecipe,
    pub eval: Vec<PathBuf>,
    pub workdir: PathBuf,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Validates only the model section; enough for inference commands.
    pub fn resolve_model(&self, registry: &Registry) -> Result<ModelSpec, ConfigErrors> {
        let errors = self.model.name_errors(registry);
        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        Ok(MultimodalModel::build(registry, &self.model, self.seed)?.spec)
    }

    /// Validates everything without touching the filesystem beyond reads.
    /// Relative paths in the config resolve against `base`.
    pub fn resolve(&self, registry: &Registry, base: &Path) -> Result<ResolvedConfig, ConfigErrors> {
        let mut errors = Vec::new();

        let name_errors = self.model.name_errors(registry);
        let model = if name_errors.is_empty() {
            match MultimodalModel::build(registry, &self.model, self.seed) {
                Ok(m) => Some(m.spec),
                Err(e) => {
                    errors.push(e);
                    None
                }
            }
        } else {
            errors.extend(name_errors);
            None
        };

        let recipe = match &self.recipe {
            RecipeRef::Inline(r) => Some(r.clone()),
            RecipeRef::Named { name, config } => {
                if !registry.contains(ComponentKind::Recipe, name) {
                    errors.push(Error::Lookup {
                        kind: "recipe".into(),
                        name: name.clone(),
                        available: registry.names(ComponentKind::Recipe),
                    });
                    None
                } else {
                    let config = absolutize_recipe_config(config, base);
                    match registry.create_recipe(name, &config) {
                        Ok(r) => Some(r),
                        Err(e) => {
                            errors.push(e);
                            None
                        }
                    }
                }
            }
        };

        let recipe = recipe.map(|mut r| {
            self.apply_to_recipe(&mut r, registry, base, &mut errors);
            r
        });

        let eval: Vec<PathBuf> = self.eval.iter().map(|p| absolute(base, p)).collect();
        for p in &eval {
            if !p.is_file() {
                errors.push(Error::Validation(format!("eval benchmark {} does not exist", p.display())));
            }
        }

        match (model, recipe) {
            (Some(model), Some(recipe)) if errors.is_empty() => Ok(ResolvedConfig {
                seed: self.seed,
                model,
                recipe,
                eval,
                workdir: std::path::absolute(&self.workdir).unwrap_or_else(|_| self.workdir.clone()),
            }),
            _ => Err(ConfigErrors(errors)),
        }
    }

    fn apply_to_recipe(&self, r: &mut TrainingRecipe, registry: &Registry, base: &Path, errors: &mut Vec<Error>) {
        let names: Vec<String> = r.stages.iter().map(|s| s.name.clone()).collect();
        let unknown = |field: &str, stage: &str| {
            Error::Validation(format!(
                "{field}: recipe `{}` has no stage `{stage}` (stages: {})",
                r.name,
                names.join(", ")
            ))
        };
        if let DataPaths::PerStage(map) = &self.data {
            errors.extend(map.keys().filter(|k| !names.contains(k)).map(|k| unknown("data", k)));
        }
        errors.extend(self.stages.keys().filter(|k| !names.contains(k)).map(|k| unknown("stages", k)));

        for stage in &mut r.stages {
            let dataset = match &self.data {
                DataPaths::All(p) => Some(p),
                DataPaths::PerStage(map) => map.get(&stage.name),
            };
            if let Some(p) = dataset {
                stage.dataset = Some(p.clone());
            }
            if let Some(p) = &stage.dataset {
                stage.dataset = Some(absolute(base, p));
            }
            if let Some(o) = self.stages.get(&stage.name) {
                stage.epochs = o.epochs.unwrap_or(stage.epochs);
                stage.lr = o.lr.unwrap_or(stage.lr);
                stage.global_batch = o.global_batch.unwrap_or(stage.global_batch);
                stage.micro_batch = o.micro_batch.unwrap_or(stage.micro_batch);
                stage.warmup_ratio = o.warmup_ratio.unwrap_or(stage.warmup_ratio);
                stage.weight_decay = o.weight_decay.unwrap_or(stage.weight_decay);
            }
            if let Some(init) = &mut stage.init_from {
                if let InitSource::Checkpoint(p) = &mut init.source {
                    *p = absolute(base, p);
                    if let Err(e) = verify_checkpoint(p) {
                        errors.push(Error::Validation(format!(
                            "stage `{}` init_from {}: {e}",
                            stage.name,
                            p.display()
                        )));
                    }
                }
            }
            match &stage.dataset {
                None => errors.push(Error::Validation(format!(
                    "stage `{}` has no dataset; set `data`",
                    stage.name
                ))),
                Some(p) if !p.is_file() => errors.push(Error::Validation(format!(
                    "stage `{}` dataset {} does not exist",
                    stage.name,
                    p.display()
                ))),
                Some(p) => match read_records(p) {
                    Ok(records) if records.len() < stage.global_batch => errors.push(Error::Validation(format!(
                        "stage `{}` dataset {} has {} records, fewer than the global batch {}",
                        stage.name,
                        p.display(),
                        records.len(),
                        stage.global_batch
                    ))),
                    Ok(_) => {}
                    Err(e) => errors.push(e),
                },
            }
            if let Some(t) = &stage.template {
                if !registry.contains(ComponentKind::Template, t) {
                    errors.push(Error::Lookup {
                        kind: format!("template (stage `{}`)", stage.name),
                        name: t.clone(),
                        available: registry.names(ComponentKind::Template),
                    });
                }
            }
            if let Err(e) = stage.validate() {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            if let Err(e) = r.validate() {
                errors.push(e);
            }
        }
    }
}

/// Resolves `init_from` inside a named recipe's config relative to `base`.
fn absolutize_recipe_config(config: &Value, base: &Path) -> Value {
    let mut config = config.clone();
    if let Some(Value::String(p)) = config.get_mut("init_from") {
        *p = absolute(base, Path::new(p)).to_string_lossy().into_owned();
    }
    config
}

impl ResolvedConfig {
    /// The equivalent explicit config; feeding it back reproduces the run.
    pub fn to_run_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            model: self.model.clone(),
            recipe: RecipeRef::Inline(self.recipe.clone()),
            data: DataPaths::default(),
            stages: BTreeMap::new(),
            eval: self.eval.clone(),
            workdir: self.workdir.clone(),
        }
    }

    /// What checkpoints record about the run: everything except locations
    /// of outputs, so identical runs in different workdirs match.
    pub fn checkpoint_config(&self) -> Value {
        serde_json::json!({
            "seed": self.seed,
            "model": self.model,
            "recipe": self.recipe,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, Error> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(&self.to_run_config()).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
