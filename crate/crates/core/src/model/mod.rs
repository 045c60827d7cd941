//! Vision towers, connectors, language models, their composition, and the
//! registry that makes each of them pluggable by name.

pub mod connector;
pub mod layers;
pub mod llm;
pub mod multimodal;
pub mod params;
pub mod registry;
pub mod vision;

pub use connector::{Connector, ConnectorConfig};
pub use llm::{LanguageModel, LanguageModelConfig};
pub use multimodal::{
    compose_multimodal, grad_check_params, next_token_loss, ComponentSpec, ImageSettings, ModelSpec, MultimodalModel,
};
pub use params::{Component, Ctx, ParamBuilder, ParamId, ParamStore, TensorKey};
pub use registry::{ComponentKind, ComponentRegistry};
pub use vision::{VisionEncoder, VisionTower, VisionTowerConfig};
