//! Named parameter storage shared by all components, and the binding of
//! parameters into a computation graph.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::recipe::lora::LoraAdapter;

/// Standard deviation of every weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Vision,
    Connector,
    Llm,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Vision, Component::Connector, Component::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Vision => "vision",
            Component::Connector => "connector",
            Component::Llm => "llm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown component `{s}`")))
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Addresses a base parameter or one factor of the LoRA adapter attached to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorKey {
    Base(ParamId),
    LoraA(ParamId),
    LoraB(ParamId),
}

impl TensorKey {
    pub fn param(self) -> ParamId {
        match self {
            TensorKey::Base(p) | TensorKey::LoraA(p) | TensorKey::LoraB(p) => p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub component: Component,
    pub path: String,
    /// Index of the transformer block this parameter belongs to, if any.
    pub layer: Option<usize>,
    pub tensor: Tensor<S>,
}

fn layer_of(path: &str) -> Option<usize> {
    let parts: Vec<&str> = path.split('.').collect();
    parts
        .windows(2)
        .find(|w| w[0] == "blocks")
        .and_then(|w| w[1].parse().ok())
}

/// All parameters of a model, addressed by `(component, path)`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: HashMap<(Component, String), ParamId>,
    adapters: BTreeMap<ParamId, LoraAdapter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            adapters: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, component: Component, path: &str, tensor: Tensor<S>) -> Result<ParamId> {
        let key = (component, path.to_string());
        if self.index.contains_key(&key) {
            return Err(Error::Conflict {
                kind: "parameter".into(),
                name: format!("{component}/{path}"),
            });
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            component,
            path: path.to_string(),
            layer: layer_of(path),
            tensor,
        });
        self.index.insert(key, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn lookup(&self, component: Component, path: &str) -> Option<ParamId> {
        self.index.get(&(component, path.to_string())).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    /// Base parameters in creation order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn component_params(&self, component: Component) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params().filter(move |(_, p)| p.component == component)
    }

    pub fn adapter(&self, id: ParamId) -> Option<&LoraAdapter<S>> {
        self.adapters.get(&id)
    }

    pub fn adapters(&self) -> impl Iterator<Item = (ParamId, &LoraAdapter<S>)> {
        self.adapters.iter().map(|(&k, v)| (k, v))
    }

    pub fn attach_adapter(&mut self, target: ParamId, adapter: LoraAdapter<S>) -> Result<()> {
        if self.adapters.contains_key(&target) {
            return Err(Error::Conflict {
                kind: "LoRA adapter".into(),
                name: self.name(TensorKey::Base(target)),
            });
        }
        self.adapters.insert(target, adapter);
        Ok(())
    }

    pub fn detach_adapter(&mut self, target: ParamId) -> Option<LoraAdapter<S>> {
        self.adapters.remove(&target)
    }

    pub fn tensor(&self, key: TensorKey) -> &Tensor<S> {
        match key {
            TensorKey::Base(p) => &self.params[p.0].tensor,
            TensorKey::LoraA(p) => &self.adapters[&p].a,
            TensorKey::LoraB(p) => &self.adapters[&p].b,
        }
    }

    pub fn tensor_mut(&mut self, key: TensorKey) -> &mut Tensor<S> {
        match key {
            TensorKey::Base(p) => &mut self.params[p.0].tensor,
            TensorKey::LoraA(p) => &mut self.adapters.get_mut(&p).expect("adapter present").a,
            TensorKey::LoraB(p) => &mut self.adapters.get_mut(&p).expect("adapter present").b,
        }
    }

    /// Mutable access to every tensor at once, in [`ParamStore::keys`] order.
    pub fn tensors_mut(&mut self) -> Vec<(TensorKey, &mut Tensor<S>)> {
        let mut out: Vec<(TensorKey, &mut Tensor<S>)> = self
            .params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (TensorKey::Base(ParamId(i)), &mut p.tensor))
            .collect();
        for (&id, a) in self.adapters.iter_mut() {
            out.push((TensorKey::LoraA(id), &mut a.a));
            out.push((TensorKey::LoraB(id), &mut a.b));
        }
        out
    }

    pub fn component_of(&self, key: TensorKey) -> Component {
        self.params[key.param().0].component
    }

    /// Path of a tensor within its component (`….lora_a` for adapter factors).
    pub fn path(&self, key: TensorKey) -> String {
        let base = &self.params[key.param().0].path;
        match key {
            TensorKey::Base(_) => base.clone(),
            TensorKey::LoraA(_) => format!("{base}.lora_a"),
            TensorKey::LoraB(_) => format!("{base}.lora_b"),
        }
    }

    /// `component/path`.
    pub fn name(&self, key: TensorKey) -> String {
        format!("{}/{}", self.component_of(key), self.path(key))
    }

    /// Every tensor key: base parameters then adapter factors, in a fixed order.
    pub fn keys(&self) -> Vec<TensorKey> {
        let mut keys: Vec<TensorKey> = (0..self.params.len()).map(|i| TensorKey::Base(ParamId(i))).collect();
        for &p in self.adapters.keys() {
            keys.push(TensorKey::LoraA(p));
            keys.push(TensorKey::LoraB(p));
        }
        keys
    }

    /// Looks a key up by component and path, including adapter factors.
    pub fn resolve(&self, component: Component, path: &str) -> Option<TensorKey> {
        if let Some(id) = self.lookup(component, path) {
            return Some(TensorKey::Base(id));
        }
        let (base, make): (&str, fn(ParamId) -> TensorKey) = if let Some(b) = path.strip_suffix(".lora_a") {
            (b, TensorKey::LoraA)
        } else if let Some(b) = path.strip_suffix(".lora_b") {
            (b, TensorKey::LoraB)
        } else {
            return None;
        };
        let id = self.lookup(component, base)?;
        self.adapters.contains_key(&id).then(|| make(id))
    }

    pub fn trainable_keys(&self) -> Vec<TensorKey> {
        self.keys()
            .into_iter()
            .filter(|&k| self.tensor(k).requires_grad())
            .collect()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for k in self.keys() {
            self.tensor_mut(k).set_requires_grad(trainable);
        }
    }

    pub fn zero_grad(&mut self) {
        for k in self.keys() {
            self.tensor_mut(k).zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for k in self.keys() {
            self.tensor_mut(k).clear_grad();
        }
    }

    pub fn accumulate_grads<'g>(&mut self, grads: impl IntoIterator<Item = (TensorKey, &'g [S])>) -> Result<()> {
        for (k, g) in grads {
            self.tensor_mut(k).accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn numel(&self, component: Option<Component>) -> usize {
        self.keys()
            .into_iter()
            .filter(|&k| component.is_none_or(|c| self.component_of(k) == c))
            .map(|k| self.tensor(k).numel())
            .sum()
    }

    /// SHA-256 over the names and values of a component's base parameters.
    pub fn component_hash(&self, component: Component) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.component_params(component) {
            h.update(p.path.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_f64c().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Snapshot of every base parameter value of a component.
    pub fn snapshot(&self, component: Component) -> Vec<(String, Tensor<S>)> {
        self.component_params(component)
            .map(|(_, p)| (p.path.clone(), p.tensor.clone()))
            .collect()
    }
}

/// Creates a component's parameters under a path prefix.
pub struct ParamBuilder<'a, S> {
    store: &'a mut ParamStore<S>,
    component: Component,
    prefix: String,
    rng: &'a mut Rng,
}

impl<'a, S: Scalar> ParamBuilder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, component: Component, rng: &'a mut Rng) -> Self {
        Self {
            store,
            component,
            prefix: String::new(),
            rng,
        }
    }

    pub fn component(&self) -> Component {
        self.component
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the path prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, S>) -> Result<T>) -> Result<T> {
        let prefix = self.full(name);
        let mut child = ParamBuilder {
            store: &mut *self.store,
            component: self.component,
            prefix,
            rng: &mut *self.rng,
        };
        f(&mut child)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        let path = self.full(name);
        self.store.add(self.component, &path, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let path = self.full(name);
        self.store.add(self.component, &path, Tensor::full(shape, S::from_f64c(value)))
    }
}

/// A graph under construction together with the parameters it reads.
///
/// Each parameter becomes one leaf, created on first use.
pub struct Ctx<'a, S> {
    pub graph: Graph<S>,
    store: &'a ParamStore<S>,
    bound: BTreeMap<TensorKey, Var>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn key(&mut self, key: TensorKey) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.graph.leaf(self.store.tensor(key));
        self.bound.insert(key, v);
        v
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.key(TensorKey::Base(id))
    }

    /// Leaf gradients per bound tensor, in key order.
    pub fn grads(&self) -> Vec<(TensorKey, &[S])> {
        self.bound
            .iter()
            .filter_map(|(&k, &v)| self.graph.grad(v).map(|g| (k, g)))
            .collect()
    }

    pub fn owned_grads(&self) -> Vec<(TensorKey, Vec<S>)> {
        self.grads().into_iter().map(|(k, g)| (k, g.to_vec())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedStream;

    #[test]
    fn layer_index_from_path() {
        assert_eq!(layer_of("blocks.3.attn.q.weight"), Some(3));
        assert_eq!(layer_of("tok_emb"), None);
    }

    #[test]
    fn duplicate_names_conflict() {
        let mut store = ParamStore::<f32>::new();
        store.add(Component::Llm, "a", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            store.add(Component::Llm, "a", Tensor::zeros(&[1])),
            Err(Error::Conflict { .. })
        ));
        store.add(Component::Vision, "a", Tensor::zeros(&[1])).unwrap();
    }

    #[test]
    fn builder_scopes_paths() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeedStream::new(0).rng();
        let mut b = ParamBuilder::new(&mut store, Component::Connector, &mut rng);
        b.scoped("blocks", |b| b.scoped("0", |b| b.normal("w", &[2, 2], 0.02))).unwrap();
        assert!(store.lookup(Component::Connector, "blocks.0.w").is_some());
        let id = store.lookup(Component::Connector, "blocks.0.w").unwrap();
        assert_eq!(store.param(id).layer, Some(0));
    }
}
