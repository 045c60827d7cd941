//! Connectors mapping vision features `[N, d_v]` to LLM-width tokens `[M, d_m]`.

use serde::{Deserialize, Serialize};

use super::layers::{Attention, FeedForward, LayerNorm, Linear};
use super::params::{Ctx, ParamBuilder, ParamId, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Var};

pub trait Connector<S: Scalar>: Send + Sync {
    fn kind(&self) -> &str;
    fn d_v(&self) -> usize;
    fn d_m(&self) -> usize;
    /// Output token count for `n` input tokens.
    fn num_tokens(&self, n: usize) -> usize;
    /// Effective configuration with defaults materialized.
    fn config(&self) -> serde_json::Value;
    fn forward(&self, ctx: &mut Ctx<'_, S>, feats: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorConfig {
    pub d_v: usize,
    pub d_m: usize,
    /// Learnable query count for the resampler and Q-former.
    pub num_queries: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_m: 64,
            num_queries: 4,
            depth: 1,
            heads: 4,
        }
    }
}

fn check_width<S: Scalar>(ctx: &Ctx<'_, S>, feats: Var, d_v: usize) -> Result<()> {
    match ctx.graph.shape(feats) {
        [_, d] if *d == d_v => Ok(()),
        s => Err(Error::Dimension(format!("connector expects [N, {d_v}] features, got {s:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Identity {
    d: usize,
}

impl Identity {
    pub fn new(config: &ConnectorConfig) -> Result<Self> {
        if config.d_v != config.d_m {
            return Err(Error::Validation(format!(
                "identity connector requires d_v == d_m, got {} and {}",
                config.d_v, config.d_m
            )));
        }
        Ok(Self { d: config.d_v })
    }
}

impl<S: Scalar> Connector<S> for Identity {
    fn kind(&self) -> &str {
        "identity"
    }
    fn config(&self) -> serde_json::Value {
        serde_json::json!({ "d_v": self.d, "d_m": self.d })
    }
    fn d_v(&self) -> usize {
        self.d
    }
    fn d_m(&self) -> usize {
        self.d
    }
    fn num_tokens(&self, n: usize) -> usize {
        n
    }
    fn forward(&self, ctx: &mut Ctx<'_, S>, feats: Var) -> Result<Var> {
        check_width(ctx, feats, self.d)?;
        Ok(feats)
    }
}

#[derive(Debug, Clone)]
pub struct LinearConnector {
    pub proj: Linear,
}

impl LinearConnector {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: &ConnectorConfig) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(b, "proj", config.d_v, config.d_m, true)?,
        })
    }
}

impl<S: Scalar> Connector<S> for LinearConnector {
    fn kind(&self) -> &str {
        "linear"
    }
    fn config(&self) -> serde_json::Value {
        serde_json::json!({ "d_v": self.proj.d_in, "d_m": self.proj.d_out })
    }
    fn d_v(&self) -> usize {
        self.proj.d_in
    }
    fn d_m(&self) -> usize {
        self.proj.d_out
    }
    fn num_tokens(&self, n: usize) -> usize {
        n
    }
    fn forward(&self, ctx: &mut Ctx<'_, S>, feats: Var) -> Result<Var> {
        check_width(ctx, feats, self.proj.d_in)?;
        self.proj.forward(ctx, feats)
    }
}

/// `Linear(d_v, d_m) → GELU → Linear(d_m, d_m)`.
#[derive(Debug, Clone)]
pub struct MlpConnector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpConnector {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: &ConnectorConfig) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, "fc1", config.d_v, config.d_m, true)?,
            fc2: Linear::new(b, "fc2", config.d_m, config.d_m, true)?,
        })
    }
}

impl<S: Scalar> Connector<S> for MlpConnector {
    fn kind(&self) -> &str {
        "mlp"
    }
    fn config(&self) -> serde_json::Value {
        serde_json::json!({ "d_v": self.fc1.d_in, "d_m": self.fc2.d_out })
    }
    fn d_v(&self) -> usize {
        self.fc1.d_in
    }
    fn d_m(&self) -> usize {
        self.fc2.d_out
    }
    fn num_tokens(&self, n: usize) -> usize {
        n
    }
    fn forward(&self, ctx: &mut Ctx<'_, S>, feats: Var) -> Result<Var> {
        check_width(ctx, feats, self.fc1.d_in)?;
        let h = self.fc1.forward(ctx, feats)?;
        let h = ctx.graph.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// One query-side block: optional self-attention over the queries, then
/// cross-attention to the features, then a feed-forward layer; all pre-norm.
#[derive(Debug, Clone)]
pub struct QueryBlock {
    pub self_attn: Option<(LayerNorm, Attention)>,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl QueryBlock {
    fn new<S: Scalar>(
        b: &mut ParamBuilder<'_, S>,
        name: &str,
        config: &ConnectorConfig,
        with_self_attn: bool,
    ) -> Result<Self> {
        let (d_v, d) = (config.d_v, config.d_m);
        b.scoped(name, |b| {
            let self_attn = if with_self_attn {
                Some((
                    LayerNorm::new(b, "ln_self", d)?,
                    Attention::new(b, "self_attn", d, d, d, config.heads)?,
                ))
            } else {
                None
            };
            Ok(Self {
                self_attn,
                ln_q: LayerNorm::new(b, "ln_q", d)?,
                ln_kv: LayerNorm::new(b, "ln_kv", d_v)?,
                cross_attn: Attention::new(b, "cross_attn", d, d_v, d, config.heads)?,
                ln_ff: LayerNorm::new(b, "ln_ff", d)?,
                ff: FeedForward::new(b, "ff", d, 4 * d)?,
            })
        })
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, mut q: Var, feats: Var) -> Result<Var> {
        if let Some((ln, attn)) = &self.self_attn {
            let h = ln.forward(ctx, q)?;
            let a = attn.forward(ctx, h, h, None)?;
            q = ctx.graph.add(q, a)?;
        }
        let h = self.ln_q.forward(ctx, q)?;
        let kv = self.ln_kv.forward(ctx, feats)?;
        let a = self.cross_attn.forward(ctx, h, kv, None)?;
        q = ctx.graph.add(q, a)?;
        let h = self.ln_ff.forward(ctx, q)?;
        let f = self.ff.forward(ctx, h)?;
        ctx.graph.add(q, f)
    }
}

/// `K` learnable queries refined by [`QueryBlock`]s; output `[K, d_m]`
/// regardless of the input token count.
#[derive(Debug, Clone)]
pub struct QueryConnector {
    kind: &'static str,
    pub config: ConnectorConfig,
    pub queries: ParamId,
    pub blocks: Vec<QueryBlock>,
    pub ln_out: LayerNorm,
}

impl QueryConnector {
    /// Cross-attention and feed-forward blocks.
    pub fn resampler<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: &ConnectorConfig) -> Result<Self> {
        Self::build(b, config, "resampler", false)
    }

    /// Self-attention, cross-attention and feed-forward blocks.
    pub fn qformer<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: &ConnectorConfig) -> Result<Self> {
        Self::build(b, config, "qformer", true)
    }

    fn build<S: Scalar>(
        b: &mut ParamBuilder<'_, S>,
        config: &ConnectorConfig,
        kind: &'static str,
        with_self_attn: bool,
    ) -> Result<Self> {
        if config.num_queries == 0 {
            return Err(Error::Validation(format!("{kind} connector needs at least one query")));
        }
        let queries = b.normal("queries", &[config.num_queries, config.d_m], INIT_STD)?;
        let blocks = b.scoped("blocks", |b| {
            (0..config.depth)
                .map(|i| QueryBlock::new(b, &i.to_string(), config, with_self_attn))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            kind,
            config: *config,
            queries,
            blocks,
            ln_out: LayerNorm::new(b, "ln_out", config.d_m)?,
        })
    }
}

impl<S: Scalar> Connector<S> for QueryConnector {
    fn kind(&self) -> &str {
        self.kind
    }
    fn config(&self) -> serde_json::Value {
        serde_json::to_value(self.config).expect("config serializes")
    }
    fn d_v(&self) -> usize {
        self.config.d_v
    }
    fn d_m(&self) -> usize {
        self.config.d_m
    }
    fn num_tokens(&self, _n: usize) -> usize {
        self.config.num_queries
    }
    fn forward(&self, ctx: &mut Ctx<'_, S>, feats: Var) -> Result<Var> {
        check_width(ctx, feats, self.config.d_v)?;
        let mut q = ctx.param(self.queries);
        for block in &self.blocks {
            q = block.forward(ctx, q, feats)?;
        }
        self.ln_out.forward(ctx, q)
    }
}
