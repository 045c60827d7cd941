use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

/// AdamW with bias correction and decoupled weight decay.
///
/// Moment buffers are keyed by `K` and created lazily, only for tensors that
/// require grad.
#[derive(Debug, Clone)]
pub struct AdamW<K, S> {
    pub config: AdamWConfig,
    moments: BTreeMap<K, Moments<S>>,
    step_count: u64,
}

impl<K: Ord + Clone + std::fmt::Debug, S: Scalar> AdamW<K, S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn tracked(&self) -> impl Iterator<Item = &K> {
        self.moments.keys()
    }

    /// One update of every trainable tensor in `params` at learning rate `lr`.
    /// Frozen tensors are skipped; a trainable tensor without a gradient is a
    /// usage error and leaves all parameters untouched.
    pub fn step<'a, I>(&mut self, lr: f64, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, &'a mut Tensor<S>)>,
        S: 'a,
    {
        let params: Vec<_> = params.into_iter().filter(|(_, t)| t.requires_grad()).collect();
        if let Some((key, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Usage(format!("trainable tensor {key:?} has no gradient")));
        }
        self.step_count += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (S::from_f64c(beta1), S::from_f64c(beta2));
        let (one_b1, one_b2) = (S::from_f64c(1.0 - beta1), S::from_f64c(1.0 - beta2));
        let decay = S::from_f64c(1.0 - lr * weight_decay);
        let step_size = S::from_f64c(lr / bc1);
        let sqrt_bc2 = S::from_f64c(bc2.sqrt());
        let eps = S::from_f64c(eps);

        for (key, tensor) in params {
            let n = tensor.numel();
            let state = self.moments.entry(key).or_insert_with(|| Moments {
                first: vec![S::zero(); n],
                second: vec![S::zero(); n],
            });
            let grad = tensor.grad().expect("checked above").to_vec();
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                let m = b1 * state.first[i] + one_b1 * g;
                let v = b2 * state.second[i] + one_b2 * g * g;
                state.first[i] = m;
                state.second[i] = v;
                let w = data[i] * decay;
                data[i] = w - step_size * m / (v.sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
