//! Run configuration and command implementations behind the `minivlm` binary.

pub mod commands;
pub mod config;

pub use commands::Failure;
pub use config::{ConfigErrors, RecipeRef, ResolvedConfig, RunConfig};
