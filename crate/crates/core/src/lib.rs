//! Small, composable vision-language models.
//!
//! Vision towers, connectors and language models are looked up by name in a
//! [`model::ComponentRegistry`] and assembled into a [`model::MultimodalModel`].
//! Training runs as an ordered list of stages whose per-component tuning
//! types (frozen, full, partial, LoRA) come from a [`recipe::TrainingRecipe`].

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod recipe;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor = numerics::Tensor<f32>;
pub type Graph = numerics::Graph<f32>;
pub type ParamStore = model::ParamStore<f32>;
pub type Model = model::MultimodalModel<f32>;
pub type Registry = model::ComponentRegistry<f32>;
