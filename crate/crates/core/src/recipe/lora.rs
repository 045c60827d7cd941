//! Low-rank adapters: `W_eff = W + (alpha/r)·B·A`.

use log::warn;

use crate::error::{Error, Result};
use crate::model::params::{Component, ParamStore, TensorKey, INIT_STD};
use crate::numerics::kernels::matmul_acc;
use crate::numerics::rng::Rng;
use crate::numerics::{Graph, Scalar, Tensor};

/// Factors `A: [r, d_in]` and `B: [d_out, r]` for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub rank: usize,
    pub alpha: f64,
}

impl<S: Scalar> LoraAdapter<S> {
    /// `A ~ N(0, 0.02²)`, `B = 0`; both trainable.
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        validate_rank(rank, alpha)?;
        Ok(Self {
            a: Tensor::randn(&[rank, d_in], INIT_STD, rng).with_requires_grad(true),
            b: Tensor::zeros(&[d_out, rank]).with_requires_grad(true),
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `scale·B·A` as a `[d_out, d_in]` row-major buffer.
    pub fn delta(&self) -> Vec<S> {
        let (r, d_in) = (self.a.shape()[0], self.a.shape()[1]);
        let d_out = self.b.shape()[0];
        let mut out = vec![S::zero(); d_out * d_in];
        matmul_acc(self.b.data(), self.a.data(), &mut out, d_out, r, d_in);
        let s = S::from_f64c(self.scale());
        out.iter_mut().for_each(|v| *v *= s);
        out
    }
}

pub fn validate_rank(rank: usize, alpha: f64) -> Result<()> {
    if rank == 0 {
        return Err(Error::Validation("LoRA rank must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Validation(format!("LoRA alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// `y = x·Wᵀ + scale·(x·Aᵀ)·Bᵀ` for `x: [n, d_in]`, `W: [d_out, d_in]`.
pub fn lora_forward<S: Scalar>(w: &Tensor<S>, adapter: &LoraAdapter<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (wv, av, bv, xv) = (g.leaf(w), g.leaf(&adapter.a), g.leaf(&adapter.b), g.leaf(x));
    let base = g.matmul_bt(xv, wv)?;
    let down = g.matmul_bt(xv, av)?;
    let up = g.matmul_bt(down, bv)?;
    let up = g.scale(up, S::from_f64c(adapter.scale()));
    let y = g.add(base, up)?;
    Ok(g.tensor(y))
}

/// Folds every attached adapter into its base weight and detaches it.
/// Returns the number merged; with no adapters this is a no-op that warns.
pub fn merge_lora<S: Scalar>(store: &mut ParamStore<S>) -> usize {
    let targets: Vec<_> = store.adapters().map(|(id, _)| id).collect();
    if targets.is_empty() {
        warn!("merge_lora: no adapters attached, nothing to merge");
        return 0;
    }
    for id in &targets {
        let adapter = store.detach_adapter(*id).expect("listed adapter");
        let delta = adapter.delta();
        let w = store.tensor_mut(TensorKey::Base(*id));
        w.data_mut().iter_mut().zip(&delta).for_each(|(w, d)| *w += *d);
    }
    targets.len()
}

/// Number of adapter parameters attached within one component.
pub fn adapter_numel<S: Scalar>(store: &ParamStore<S>, component: Component) -> usize {
    store
        .adapters()
        .filter(|(id, _)| store.param(*id).component == component)
        .map(|(_, a)| a.numel())
        .sum()
}
