//! Per-component tuning types and their application to a parameter store.

use serde::{Deserialize, Serialize};

use super::lora::{validate_rank, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::params::{Component, Param, ParamId, ParamStore, TensorKey};
use crate::numerics::rng::Rng;
use crate::numerics::Scalar;

/// Weight-path suffixes adapted when a LoRA plan names no targets: the
/// query/key/value/output projections of every attention layer.
pub const DEFAULT_LORA_TARGETS: [&str; 4] = ["attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.o.weight"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum TuningType {
    Frozen,
    Full,
    /// Parameters of transformer blocks with index in `[from_layer, to_layer)`.
    Partial {
        from_layer: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to_layer: Option<usize>,
    },
    /// Adapters on 2-D weights whose path ends with one of `targets`.
    Lora {
        rank: usize,
        alpha: f64,
        #[serde(default = "default_targets")]
        targets: Vec<String>,
    },
}

fn default_targets() -> Vec<String> {
    DEFAULT_LORA_TARGETS.iter().map(|s| s.to_string()).collect()
}

impl TuningType {
    pub fn lora(rank: usize, alpha: f64) -> Self {
        TuningType::Lora {
            rank,
            alpha,
            targets: default_targets(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self, TuningType::Frozen)
    }

    /// Whether base parameter `p` is trained (Full/Partial) or adapted (LoRA).
    pub fn selects<S: Scalar>(&self, p: &Param<S>) -> bool {
        match self {
            TuningType::Frozen => false,
            TuningType::Full => true,
            TuningType::Partial { from_layer, to_layer } => {
                p.layer.is_some_and(|l| l >= *from_layer && to_layer.is_none_or(|t| l < t))
            }
            TuningType::Lora { targets, .. } => {
                p.tensor.shape().len() == 2 && targets.iter().any(|t| p.path.ends_with(t.as_str()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TuningType::Partial {
                from_layer,
                to_layer: Some(to),
            } if to <= from_layer => Err(Error::Validation(format!(
                "partial tuning range [{from_layer}, {to}) is empty"
            ))),
            TuningType::Lora { rank, alpha, targets } => {
                validate_rank(*rank, *alpha)?;
                if targets.is_empty() {
                    return Err(Error::Validation("LoRA target list is empty".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningPlan {
    pub vision: TuningType,
    pub connector: TuningType,
    pub llm: TuningType,
}

impl TuningPlan {
    pub fn new(vision: TuningType, connector: TuningType, llm: TuningType) -> Self {
        Self { vision, connector, llm }
    }

    pub fn get(&self, c: Component) -> &TuningType {
        match c {
            Component::Vision => &self.vision,
            Component::Connector => &self.connector,
            Component::Llm => &self.llm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in Component::ALL {
            self.get(c).validate()?;
        }
        if Component::ALL.iter().all(|&c| self.get(c).is_frozen()) {
            return Err(Error::Validation("tuning plan freezes every component".into()));
        }
        Ok(())
    }

    /// Keys a checkpoint of this plan stores: trained base parameters for
    /// Full/Partial, adapter factors for LoRA.
    pub fn scope<S: Scalar>(&self, store: &ParamStore<S>) -> Vec<TensorKey> {
        let mut keys = Vec::new();
        for (id, p) in store.params() {
            match self.get(p.component) {
                TuningType::Frozen => {}
                TuningType::Lora { .. } => {
                    if store.adapter(id).is_some() {
                        keys.push(TensorKey::LoraA(id));
                        keys.push(TensorKey::LoraB(id));
                    }
                }
                t => {
                    if t.selects(p) {
                        keys.push(TensorKey::Base(id));
                    }
                }
            }
        }
        keys
    }
}

/// Sets trainability per the plan and attaches fresh adapters for LoRA
/// components. Returns the trainable keys.
pub fn apply_plan<S: Scalar>(store: &mut ParamStore<S>, plan: &TuningPlan, rng: &mut Rng) -> Result<Vec<TensorKey>> {
    plan.validate()?;
    if store.adapters().next().is_some() {
        return Err(Error::Validation("adapters are already attached; merge them first".into()));
    }
    let ids: Vec<(ParamId, Component)> = store.params().map(|(id, p)| (id, p.component)).collect();
    for c in Component::ALL {
        let t = plan.get(c);
        let selected: Vec<ParamId> = ids
            .iter()
            .filter(|(id, pc)| *pc == c && t.selects(store.param(*id)))
            .map(|(id, _)| *id)
            .collect();
        let has_params = ids.iter().any(|(_, pc)| *pc == c);
        if has_params && selected.is_empty() && matches!(t, TuningType::Partial { .. } | TuningType::Lora { .. }) {
            return Err(Error::Validation(format!("{c} tuning {t:?} selects no parameters")));
        }
        for &(id, pc) in &ids {
            if pc != c {
                continue;
            }
            let trainable = matches!(t, TuningType::Full | TuningType::Partial { .. }) && selected.contains(&id);
            store.param_mut(id).tensor.set_requires_grad(trainable);
        }
        if let TuningType::Lora { rank, alpha, .. } = t {
            for &id in &selected {
                let shape = store.param(id).tensor.shape().to_vec();
                let adapter = LoraAdapter::new(shape[1], shape[0], *rank, *alpha, rng)?;
                store.attach_adapter(id, adapter)?;
            }
        }
    }
    store.clear_grads();
    let trainable = store.trainable_keys();
    if trainable.is_empty() {
        return Err(Error::Validation("tuning plan leaves no trainable parameters".into()));
    }
    Ok(trainable)
}
