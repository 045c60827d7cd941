//! Tiny causal decoder with tied input/output embeddings.

use serde::{Deserialize, Serialize};

use super::layers::{causal_mask, Block, LayerNorm};
use super::params::{Ctx, ParamBuilder, ParamId, INIT_STD};
use crate::data::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Var};

pub trait LanguageModel<S: Scalar>: Send + Sync {
    fn width(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// Effective configuration with defaults materialized.
    fn config(&self) -> serde_json::Value;
    /// Token embeddings `[T, d_m]` for `ids`.
    fn embed(&self, ctx: &mut Ctx<'_, S>, ids: &[u32]) -> Result<Var>;
    /// `embeds: [T, d_m]` → logits `[T, vocab]`, causally masked.
    fn forward(&self, ctx: &mut Ctx<'_, S>, embeds: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanguageModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl Default for LanguageModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 2,
            heads: 4,
            max_positions: 256,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl LanguageModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Validation(format!(
                "vocab_size must be {VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Validation(format!(
                "llm width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Validation("max_positions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: LanguageModelConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Decoder {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: LanguageModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let tok_emb = b.normal("tok_emb", &[config.vocab_size, d], INIT_STD)?;
        let pos_emb = b.normal("pos_emb", &[config.max_positions, d], INIT_STD)?;
        let blocks = b.scoped("blocks", |b| {
            (0..config.depth)
                .map(|i| Block::new(b, &i.to_string(), d, config.heads))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(b, "ln_f", d)?,
        })
    }
}

impl<S: Scalar> LanguageModel<S> for Decoder {
    fn width(&self) -> usize {
        self.config.width
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn config(&self) -> serde_json::Value {
        serde_json::to_value(self.config).expect("config serializes")
    }

    fn embed(&self, ctx: &mut Ctx<'_, S>, ids: &[u32]) -> Result<Var> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = ctx.param(self.tok_emb);
        ctx.graph.gather_rows(table, &rows)
    }

    fn forward(&self, ctx: &mut Ctx<'_, S>, embeds: Var) -> Result<Var> {
        let (t, d) = match ctx.graph.shape(embeds) {
            [t, d] => (*t, *d),
            s => return Err(Error::Dimension(format!("llm expects [T, d] embeddings, got {s:?}"))),
        };
        if d != self.config.width {
            return Err(Error::Dimension(format!(
                "llm expects width {}, got {d}",
                self.config.width
            )));
        }
        if t > self.config.max_positions {
            return Err(Error::Length {
                len: t,
                max: self.config.max_positions,
            });
        }
        let pos_table = ctx.param(self.pos_emb);
        let pos = ctx.graph.slice_rows(pos_table, 0, t)?;
        let mut x = ctx.graph.add(embeds, pos)?;
        let mask = causal_mask::<S>(t);
        for block in &self.blocks {
            x = block.forward(ctx, x, Some(&mask))?;
        }
        let x = self.ln_f.forward(ctx, x)?;
        let table = ctx.param(self.tok_emb);
        ctx.graph.matmul_bt(x, table)
    }
}
