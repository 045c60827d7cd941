//! Building blocks shared by the towers, connectors and language models.

use super::params::{Ctx, ParamBuilder, ParamId, TensorKey, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Var, LN_EPS, MASK_VALUE};

/// `y = x·Wᵀ + b` with `W: [d_out, d_in]`, plus `scale·(x·Aᵀ)·Bᵀ` when a
/// LoRA adapter is attached to `W`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.normal("weight", &[d_out, d_in], INIT_STD)?;
            let bias = if bias { Some(b.constant("bias", &[d_out], 0.0)?) } else { None };
            Ok(Self {
                weight,
                bias,
                d_in,
                d_out,
            })
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let mut y = ctx.graph.matmul_bt(x, w)?;
        if let Some(adapter) = ctx.store().adapter(self.weight) {
            let scale = S::from_f64c(adapter.scale());
            let a = ctx.key(TensorKey::LoraA(self.weight));
            let bm = ctx.key(TensorKey::LoraB(self.weight));
            let down = ctx.graph.matmul_bt(x, a)?;
            let up = ctx.graph.matmul_bt(down, bm)?;
            let up = ctx.graph.scale(up, scale);
            y = ctx.graph.add(y, up)?;
        }
        if let Some(bias) = self.bias {
            let bv = ctx.param(bias);
            y = ctx.graph.add(y, bv)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, name: &str, d: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gain: b.constant("gain", &[d], 1.0)?,
                bias: b.constant("bias", &[d], 0.0)?,
            })
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gain);
        let b = ctx.param(self.bias);
        ctx.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention. Queries come from `d_q`-wide
/// inputs, keys/values from `d_kv`-wide inputs, output width is `d`.
///
/// The key projection has no bias: a key bias shifts every score of a row by
/// the same amount and so never receives gradient.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<S: Scalar>(
        b: &mut ParamBuilder<'_, S>,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Validation(format!("width {d} is not divisible by {heads} heads")));
        }
        b.scoped(name, |b| {
            Ok(Self {
                q: Linear::new(b, "q", d_q, d, true)?,
                k: Linear::new(b, "k", d_kv, d, false)?,
                v: Linear::new(b, "v", d_kv, d, true)?,
                o: Linear::new(b, "o", d, d, true)?,
                heads,
            })
        })
    }

    /// `mask`, if given, is added to every head's `[T_q, T_kv]` score matrix.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, xq: Var, xkv: Var, mask: Option<&[S]>) -> Result<Var> {
        let q = self.q.forward(ctx, xq)?;
        let k = self.k.forward(ctx, xkv)?;
        let v = self.v.forward(ctx, xkv)?;
        let d = self.q.d_out;
        let dh = d / self.heads;
        let scale = S::from_f64c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.graph.slice_cols(q, lo, hi)?,
                    ctx.graph.slice_cols(k, lo, hi)?,
                    ctx.graph.slice_cols(v, lo, hi)?,
                )
            };
            let scores = ctx.graph.matmul_bt(qh, kh)?;
            let mut scores = ctx.graph.scale(scores, scale);
            if let Some(m) = mask {
                scores = ctx.graph.add_const(scores, m)?;
            }
            let p = ctx.graph.softmax(scores);
            outs.push(ctx.graph.matmul(p, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { ctx.graph.concat_cols(&outs)? };
        self.o.forward(ctx, merged)
    }
}

/// Causal additive mask for `t` positions: `MASK_VALUE` above the diagonal.
pub fn causal_mask<S: Scalar>(t: usize) -> Vec<S> {
    let mut m = vec![S::zero(); t * t];
    let blocked = S::from_f64c(MASK_VALUE);
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = blocked;
        }
    }
    m
}

/// Two-layer GELU MLP, `d → hidden → d`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, name: &str, d: usize, hidden: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                up: Linear::new(b, "up", d, hidden, true)?,
                down: Linear::new(b, "down", hidden, d, true)?,
            })
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.graph.gelu(h);
        self.down.forward(ctx, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, name: &str, d: usize, heads: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                ln1: LayerNorm::new(b, "ln1", d)?,
                attn: Attention::new(b, "attn", d, d, d, heads)?,
                ln2: LayerNorm::new(b, "ln2", d)?,
                ff: FeedForward::new(b, "ff", d, 4 * d)?,
            })
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var, mask: Option<&[S]>) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h, mask)?;
        let x = ctx.graph.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let f = self.ff.forward(ctx, h)?;
        ctx.graph.add(x, f)
    }
}
