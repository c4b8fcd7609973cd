//! Reduced and ablated model variants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, FeatureSpace};
use crate::metrics::Predictor;
use crate::model::{pairs, Model, ModelDims, ModelError};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Full model with learned fusion weights.
    #[serde(rename = "m3oe")]
    M3oE,
    /// One hidden layer and one tower per `(domain, task)` pair, trained separately.
    MlpSingle,
    /// The shared module and the towers only.
    SharedOnly,
    NoDomainModule,
    NoTaskModule,
    /// Full architecture with fusion logits frozen at 0 (weights 0.5).
    #[serde(rename = "no_automl")]
    NoAutoML,
    /// The three module outputs are concatenated and mixed by one affine layer.
    ConcatModules,
    /// A per-pair softmax gate weighs the three module outputs.
    FullyGated,
}

impl VariantKind {
    pub const ALL: [VariantKind; 8] = [
        VariantKind::M3oE,
        VariantKind::MlpSingle,
        VariantKind::SharedOnly,
        VariantKind::NoDomainModule,
        VariantKind::NoTaskModule,
        VariantKind::NoAutoML,
        VariantKind::ConcatModules,
        VariantKind::FullyGated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::M3oE => "m3oe",
            VariantKind::MlpSingle => "mlp_single",
            VariantKind::SharedOnly => "shared_only",
            VariantKind::NoDomainModule => "no_domain_module",
            VariantKind::NoTaskModule => "no_task_module",
            VariantKind::NoAutoML => "no_automl",
            VariantKind::ConcatModules => "concat_modules",
            VariantKind::FullyGated => "fully_gated",
        }
    }

    pub fn has_domain_module(self) -> bool {
        !matches!(self, VariantKind::MlpSingle | VariantKind::SharedOnly | VariantKind::NoDomainModule)
    }

    pub fn has_task_module(self) -> bool {
        !matches!(self, VariantKind::MlpSingle | VariantKind::SharedOnly | VariantKind::NoTaskModule)
    }

    /// Whether the trainer runs the fusion-logit phase for this kind.
    pub fn learns_fusion(self) -> bool {
        self != VariantKind::NoAutoML && (self.has_domain_module() || self.has_task_module())
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let alias = match s {
            "mlp" => Some(VariantKind::MlpSingle),
            "full" => Some(VariantKind::M3oE),
            _ => None,
        };
        alias
            .or_else(|| VariantKind::ALL.into_iter().find(|k| k.name() == s))
            .ok_or_else(|| {
                let names: Vec<_> = VariantKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown variant '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// Builds a variant. `MlpSingle` needs a pair and is built with
/// [`Model::mlp_single`] instead.
pub fn build_variant(kind: VariantKind, space: &FeatureSpace, dims: ModelDims, seed: u64) -> Result<Model, ModelError> {
    Model::build(kind, space, dims, seed)
}

/// One single-pair MLP per `(domain, task)`, stored at index `d * T + t`.
#[derive(Debug, Clone)]
pub struct MlpEnsemble {
    space: FeatureSpace,
    members: Vec<Model>,
}

impl MlpEnsemble {
    /// Fresh members, each initialised from its own derived seed.
    pub fn build(space: &FeatureSpace, dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        let members = pairs(space.domains, space.tasks)
            .enumerate()
            .map(|(i, (d, t))| {
                let member_seed = crate::rng::derive_seed(seed, crate::rng::stream::MLP_MEMBER, i as u64);
                Model::mlp_single(space, dims, d, t, member_seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            space: space.clone(),
            members,
        })
    }

    pub fn from_members(space: &FeatureSpace, members: Vec<Model>) -> Result<Self, ModelError> {
        let expected: Vec<_> = pairs(space.domains, space.tasks).collect();
        let found: Vec<_> = members.iter().map(|m| m.arch.pair()).collect();
        if found.len() != expected.len() || found.iter().zip(&expected).any(|(f, e)| *f != Some(*e)) {
            return Err(ModelError::Incompatible(format!(
                "ensemble members must cover pairs {expected:?} in order, found {found:?}"
            )));
        }
        Ok(Self {
            space: space.clone(),
            members,
        })
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Model] {
        &mut self.members
    }

    pub fn member(&self, domain: usize, task: usize) -> &Model {
        &self.members[domain * self.space.tasks + task]
    }
}

impl Predictor for MlpEnsemble {
    fn space(&self) -> &FeatureSpace {
        &self.space
    }

    fn predict_batch(&self, batch: &Batch) -> Result<Vec<Vec<f32>>, ModelError> {
        if batch.domain >= self.space.domains {
            return Err(ModelError::DomainOutOfRange {
                domain: batch.domain,
                domains: self.space.domains,
            });
        }
        (0..self.space.tasks)
            .map(|t| Ok(self.member(batch.domain, t).predict(batch)?.remove(0)))
            .collect()
    }
}

/// Element count per parameter family (leading name component; the fusion
/// family is broken down per logit vector).
pub fn param_census<T: Real>(params: &ParamStore<T>) -> BTreeMap<String, usize> {
    let mut census = BTreeMap::new();
    for (id, p) in params.iter() {
        let key = if params.family(id) == "fusion" {
            p.name.clone()
        } else {
            params.family(id).to_string()
        };
        *census.entry(key).or_insert(0) += p.value.len();
    }
    census
}
