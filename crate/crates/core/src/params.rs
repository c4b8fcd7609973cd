//! Named parameter storage shared by every model variant.

use std::collections::BTreeMap;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimisation phase owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Network weights, updated by the per-epoch model phase.
    Model,
    /// Fusion-weight logits, updated by the minibatch fusion phase.
    Fusion,
}

#[derive(Debug, Clone)]
pub struct Param<T = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
}

/// Gradients keyed by parameter.
pub type ParamGradients<T = f32> = BTreeMap<ParamId, Tensor<T>>;

/// Graph handles of every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Pulls the parameter gradients for `ids` out of a backward result.
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>, ids: &[ParamId]) -> ParamGradients<T> {
        ids.iter()
            .filter_map(|&id| grads.take(self.var(id)).map(|g| (id, g)))
            .collect()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Leading name component, e.g. `tower` for `tower.0.1.w1`.
    pub fn family(&self, id: ParamId) -> &str {
        let name = self.name(id);
        name.split('.').next().unwrap_or(name)
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        BoundParams(self.params.iter().map(|p| graph.leaf(p.value.clone())).collect())
    }

    /// Hash of the exact bit patterns of a parameter group.
    pub fn fingerprint(&self, group: ParamGroup) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hasher.write(p.name.as_bytes());
            for v in p.value.data() {
                hasher.write_u64(v.to_f64_lossy().to_bits());
            }
        }
        hasher.finish()
    }

    /// True when both stores hold the same parameters with bit-identical values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.bit_eq(&b.value))
    }
}
