//! Name → factory tables for every pluggable component.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde_json::Value;

use super::connector::{Connector, ConnectorConfig, Identity, LinearConnector, MlpConnector, QueryConnector};
use super::llm::{Decoder, LanguageModel, LanguageModelConfig};
use super::params::ParamBuilder;
use super::vision::{VisionTower, VisionTowerConfig, ViT};
use crate::data::ChatTemplate;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::recipe::{builtin_base_recipe, builtin_share_recipe, ShareRecipeConfig, TrainingRecipe};

pub type VisionFactory<S> =
    Arc<dyn Fn(&Value, &mut ParamBuilder<'_, S>) -> Result<Box<dyn VisionTower<S>>> + Send + Sync>;
pub type ConnectorFactory<S> =
    Arc<dyn Fn(&Value, &mut ParamBuilder<'_, S>) -> Result<Box<dyn Connector<S>>> + Send + Sync>;
pub type LlmFactory<S> =
    Arc<dyn Fn(&Value, &mut ParamBuilder<'_, S>) -> Result<Box<dyn LanguageModel<S>>> + Send + Sync>;
pub type TemplateFactory = Arc<dyn Fn(&Value) -> Result<ChatTemplate> + Send + Sync>;
pub type RecipeFactory = Arc<dyn Fn(&Value) -> Result<TrainingRecipe> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ComponentKind {
    Vision,
    Connector,
    Llm,
    Template,
    Recipe,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::Vision,
        ComponentKind::Connector,
        ComponentKind::Llm,
        ComponentKind::Template,
        ComponentKind::Recipe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Vision => "vision",
            ComponentKind::Connector => "connector",
            ComponentKind::Llm => "llm",
            ComponentKind::Template => "template",
            ComponentKind::Recipe => "recipe",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses a component config; `null` means all defaults.
pub fn parse_config<T: DeserializeOwned + Default>(kind: &str, value: &Value) -> Result<T> {
    if value.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(value.clone()).map_err(|e| Error::Validation(format!("invalid {kind} config: {e}")))
}

fn insert<F>(map: &mut BTreeMap<String, F>, kind: ComponentKind, name: &str, f: F) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Validation(format!("{kind} name is empty")));
    }
    if map.contains_key(name) {
        return Err(Error::Conflict {
            kind: kind.to_string(),
            name: name.to_string(),
        });
    }
    map.insert(name.to_string(), f);
    Ok(())
}

fn get<'m, F>(map: &'m BTreeMap<String, F>, kind: ComponentKind, name: &str) -> Result<&'m F> {
    map.get(name).ok_or_else(|| Error::Lookup {
        kind: kind.to_string(),
        name: name.to_string(),
        available: map.keys().cloned().collect(),
    })
}

/// Per-kind factory tables. [`ComponentRegistry::with_builtins`] pre-registers
/// every built-in name.
pub struct ComponentRegistry<S: Scalar> {
    vision: BTreeMap<String, VisionFactory<S>>,
    connectors: BTreeMap<String, ConnectorFactory<S>>,
    llms: BTreeMap<String, LlmFactory<S>>,
    templates: BTreeMap<String, TemplateFactory>,
    recipes: BTreeMap<String, RecipeFactory>,
    llm_templates: BTreeMap<String, String>,
}

impl<S: Scalar> Default for ComponentRegistry<S> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<S: Scalar> ComponentRegistry<S> {
    pub fn empty() -> Self {
        Self {
            vision: BTreeMap::new(),
            connectors: BTreeMap::new(),
            llms: BTreeMap::new(),
            templates: BTreeMap::new(),
            recipes: BTreeMap::new(),
            llm_templates: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register_builtins().expect("built-in names are distinct");
        r
    }

    fn register_builtins(&mut self) -> Result<()> {
        // One tiny ViT stands in for every tower family.
        for name in ["clip", "siglip", "dinov2"] {
            self.register_vision(name, |cfg, b| {
                let cfg: VisionTowerConfig = parse_config("vision", cfg)?;
                Ok(Box::new(ViT::new(b, cfg)?) as Box<dyn VisionTower<S>>)
            })?;
        }

        self.register_connector("identity", |cfg, _| {
            let cfg: ConnectorConfig = parse_config("connector", cfg)?;
            Ok(Box::new(Identity::new(&cfg)?) as Box<dyn Connector<S>>)
        })?;
        self.register_connector("linear", |cfg, b| {
            let cfg: ConnectorConfig = parse_config("connector", cfg)?;
            Ok(Box::new(LinearConnector::new(b, &cfg)?) as Box<dyn Connector<S>>)
        })?;
        self.register_connector("mlp", |cfg, b| {
            let cfg: ConnectorConfig = parse_config("connector", cfg)?;
            Ok(Box::new(MlpConnector::new(b, &cfg)?) as Box<dyn Connector<S>>)
        })?;
        self.register_connector("qformer", |cfg, b| {
            let cfg: ConnectorConfig = parse_config("connector", cfg)?;
            Ok(Box::new(QueryConnector::qformer(b, &cfg)?) as Box<dyn Connector<S>>)
        })?;
        self.register_connector("resampler", |cfg, b| {
            let cfg: ConnectorConfig = parse_config("connector", cfg)?;
            Ok(Box::new(QueryConnector::resampler(b, &cfg)?) as Box<dyn Connector<S>>)
        })?;

        // One tiny decoder stands in for every LLM family; the family keeps
        // its chat template.
        for (name, template) in [
            ("tinyllama", "llava_v1"),
            ("phi", "llava_v1"),
            ("gemma", "gemma_like"),
            ("openelm", "llava_v1"),
            ("stablelm", "llava_v1"),
            ("qwen", "llava_v1"),
        ] {
            self.register_llm(name, |cfg, b| {
                let cfg: LanguageModelConfig = parse_config("llm", cfg)?;
                Ok(Box::new(Decoder::new(b, cfg)?) as Box<dyn LanguageModel<S>>)
            })?;
            self.llm_templates.insert(name.to_string(), template.to_string());
        }

        for tpl in ChatTemplate::builtins() {
            let name = tpl.name.clone();
            self.register_template(&name, move |cfg| {
                if !cfg.is_null() {
                    return Err(Error::Validation(format!("template `{}` takes no config", tpl.name)));
                }
                Ok(tpl.clone())
            })?;
        }

        self.register_recipe("base", |cfg| {
            if !cfg.is_null() {
                return Err(Error::Validation("recipe `base` takes no config".into()));
            }
            Ok(builtin_base_recipe())
        })?;
        self.register_recipe("share", |cfg| {
            let cfg: ShareRecipeConfig = parse_config("share recipe", cfg)?;
            builtin_share_recipe(cfg.init_from.as_deref())
        })?;
        Ok(())
    }

    pub fn register_vision<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&Value, &mut ParamBuilder<'_, S>) -> Result<Box<dyn VisionTower<S>>> + Send + Sync + 'static,
    {
        insert(&mut self.vision, ComponentKind::Vision, name, Arc::new(f))
    }

    pub fn register_connector<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&Value, &mut ParamBuilder<'_, S>) -> Result<Box<dyn Connector<S>>> + Send + Sync + 'static,
    {
        insert(&mut self.connectors, ComponentKind::Connector, name, Arc::new(f))
    }

    pub fn register_llm<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&Value, &mut ParamBuilder<'_, S>) -> Result<Box<dyn LanguageModel<S>>> + Send + Sync + 'static,
    {
        insert(&mut self.llms, ComponentKind::Llm, name, Arc::new(f))
    }

    pub fn register_template<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&Value) -> Result<ChatTemplate> + Send + Sync + 'static,
    {
        insert(&mut self.templates, ComponentKind::Template, name, Arc::new(f))
    }

    pub fn register_recipe<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: Fn(&Value) -> Result<TrainingRecipe> + Send + Sync + 'static,
    {
        insert(&mut self.recipes, ComponentKind::Recipe, name, Arc::new(f))
    }

    pub fn create_vision(&self, name: &str, config: &Value, b: &mut ParamBuilder<'_, S>) -> Result<Box<dyn VisionTower<S>>> {
        get(&self.vision, ComponentKind::Vision, name)?(config, b)
    }

    pub fn create_connector(&self, name: &str, config: &Value, b: &mut ParamBuilder<'_, S>) -> Result<Box<dyn Connector<S>>> {
        get(&self.connectors, ComponentKind::Connector, name)?(config, b)
    }

    pub fn create_llm(&self, name: &str, config: &Value, b: &mut ParamBuilder<'_, S>) -> Result<Box<dyn LanguageModel<S>>> {
        get(&self.llms, ComponentKind::Llm, name)?(config, b)
    }

    pub fn create_template(&self, name: &str, config: &Value) -> Result<ChatTemplate> {
        let tpl = get(&self.templates, ComponentKind::Template, name)?(config)?;
        tpl.validate()?;
        Ok(tpl)
    }

    pub fn create_recipe(&self, name: &str, config: &Value) -> Result<TrainingRecipe> {
        let recipe = get(&self.recipes, ComponentKind::Recipe, name)?(config)?;
        recipe.validate()?;
        Ok(recipe)
    }

    /// Registered names of one kind, sorted.
    pub fn names(&self, kind: ComponentKind) -> Vec<String> {
        match kind {
            ComponentKind::Vision => self.vision.keys().cloned().collect(),
            ComponentKind::Connector => self.connectors.keys().cloned().collect(),
            ComponentKind::Llm => self.llms.keys().cloned().collect(),
            ComponentKind::Template => self.templates.keys().cloned().collect(),
            ComponentKind::Recipe => self.recipes.keys().cloned().collect(),
        }
    }

    pub fn contains(&self, kind: ComponentKind, name: &str) -> bool {
        self.names(kind).iter().any(|n| n == name)
    }

    /// Default chat template of a built-in language-model family.
    pub fn default_template(&self, llm: &str) -> Option<&str> {
        self.llm_templates.get(llm).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{Component, ParamStore};
    use crate::numerics::SeedStream;
    use serde_json::json;

    fn builder_env() -> (ParamStore<f32>, crate::numerics::rng::Rng) {
        (ParamStore::new(), SeedStream::new(1).rng())
    }

    #[test]
    fn builtin_connector_set() {
        let r = ComponentRegistry::<f32>::with_builtins();
        assert_eq!(r.names(ComponentKind::Connector), ["identity", "linear", "mlp", "qformer", "resampler"]);
        assert_eq!(r.names(ComponentKind::Recipe), ["base", "share"]);
        assert_eq!(r.names(ComponentKind::Template), ["gemma_like", "llava_v1", "plain"]);
    }

    #[test]
    fn create_identity() {
        let r = ComponentRegistry::<f32>::with_builtins();
        let (mut store, mut rng) = builder_env();
        let mut b = ParamBuilder::new(&mut store, Component::Connector, &mut rng);
        let c = r.create_connector("identity", &json!({"d_v": 32, "d_m": 32}), &mut b).unwrap();
        assert_eq!(c.kind(), "identity");
        assert_eq!((c.d_v(), c.d_m()), (32, 32));
    }

    #[test]
    fn unknown_name_lists_candidates() {
        let r = ComponentRegistry::<f32>::with_builtins();
        let (mut store, mut rng) = builder_env();
        let mut b = ParamBuilder::new(&mut store, Component::Connector, &mut rng);
        match r.create_connector("nope", &Value::Null, &mut b) {
            Err(Error::Lookup { available, .. }) => {
                assert_eq!(available, ["identity", "linear", "mlp", "qformer", "resampler"])
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("unknown name was created"),
        }
    }

    #[test]
    fn user_registration_and_duplicates() {
        let mut r = ComponentRegistry::<f32>::with_builtins();
        r.register_connector("my_conn", |cfg, b| {
            let cfg: ConnectorConfig = parse_config("connector", cfg)?;
            Ok(Box::new(LinearConnector::new(b, &cfg)?) as Box<dyn Connector<f32>>)
        })
        .unwrap();
        let (mut store, mut rng) = builder_env();
        let mut b = ParamBuilder::new(&mut store, Component::Connector, &mut rng);
        let c = r.create_connector("my_conn", &json!({"d_v": 8, "d_m": 4}), &mut b).unwrap();
        assert_eq!((c.d_v(), c.d_m()), (8, 4));
        let dup = r.register_connector("mlp", |_, _| Err(Error::Validation("unused".into())));
        assert!(matches!(dup, Err(Error::Conflict { .. })));
        assert!(r.register_template("", |_| Ok(ChatTemplate::plain())).is_err());
    }

    #[test]
    fn identity_rejects_width_change() {
        let r = ComponentRegistry::<f32>::with_builtins();
        let (mut store, mut rng) = builder_env();
        let mut b = ParamBuilder::new(&mut store, Component::Connector, &mut rng);
        assert!(r.create_connector("identity", &json!({"d_v": 8, "d_m": 4}), &mut b).is_err());
    }
}
