//! The multi-domain multi-task mixture-of-experts recommender.
//!
//! Forward pass for a batch of domain `d`:
//!
//! 1. embed the categorical fields into `x`;
//! 2. extract the domain representation `h` from `x`;
//! 3. for each task `t`, mix the shared experts with gate `(d, t)` into `S`;
//! 4. fuse the domain experts around expert `d` into `Dout` and the task
//!    experts around expert `t` into `Tout`;
//! 5. combine `S + α_d·Dout + α_t·Tout` and score it with tower `(d, t)`.
//!
//! The reduced variants in [`crate::variants`] reuse this code with
//! pathways removed or replaced. A model is an [`Architecture`] (layout of
//! named parameters plus forward logic) together with a [`ParamStore`].

pub mod export;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::data::{Batch, FeatureSpace};
use crate::embedding::{EmbeddingTables, DEFAULT_EMBEDDING_DIM};
use crate::params::{BoundParams, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::variants::VariantKind;
use ops::{Affine, DomainRepr, Tower};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("domain {domain} out of range for {domains} domains")]
    DomainOutOfRange { domain: usize, domains: usize },
    #[error("batch of domain {found} given to a model of domain {expected}")]
    WrongDomain { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has {found} feature fields and {found_tasks} label rows, model expects {fields} and {tasks}")]
    BatchLayout {
        found: usize,
        found_tasks: usize,
        fields: usize,
        tasks: usize,
    },
    #[error("incompatible hyperparameters: {0}")]
    Incompatible(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub expert_dim: usize,
    pub tower_hidden: usize,
    /// Number of shared experts `N`.
    pub shared_experts: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            hidden_dim: 32,
            expert_dim: 16,
            tower_hidden: 16,
            shared_experts: 1,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("expert_dim", self.expert_dim),
            ("tower_hidden", self.tower_hidden),
            ("shared_experts", self.shared_experts),
        ] {
            if v == 0 {
                return Err(ModelError::Incompatible(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AffineIds {
    w: ParamId,
    b: ParamId,
}

impl AffineIds {
    fn bind(self, p: &BoundParams) -> Affine {
        Affine {
            w: p.var(self.w),
            b: p.var(self.b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TowerIds {
    hidden: AffineIds,
    out: AffineIds,
}

impl TowerIds {
    fn bind(self, p: &BoundParams) -> Tower {
        Tower {
            hidden: self.hidden.bind(p),
            out: self.out.bind(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ReprIds {
    w_domain: Vec<ParamId>,
    b_domain: Vec<ParamId>,
    w_shared: ParamId,
    b_shared: ParamId,
    map: AffineIds,
    adapter: [AffineIds; 2],
}

/// Fusion-weight logit vectors present in a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FusionIds {
    pub alpha_d: Option<ParamId>,
    pub alpha_t: Option<ParamId>,
    pub beta_d: Option<ParamId>,
    pub beta_t: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
enum Combine {
    Additive,
    Concat(AffineIds),
    Gated(Vec<AffineIds>),
}

#[derive(Debug, Clone, PartialEq)]
struct MixtureIds {
    repr: ReprIds,
    shared_experts: Vec<AffineIds>,
    gates: Vec<AffineIds>,
    domain_experts: Option<Vec<AffineIds>>,
    task_experts: Option<Vec<AffineIds>>,
    combine: Combine,
    towers: Vec<TowerIds>,
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Mixture(MixtureIds),
    Mlp {
        domain: usize,
        task: usize,
        hidden: AffineIds,
        tower: TowerIds,
    },
}

/// Parameter layout and forward logic of one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    kind: VariantKind,
    space: FeatureSpace,
    dims: ModelDims,
    embedding: EmbeddingTables,
    fusion: FusionIds,
    body: Body,
}

/// Intermediate values of a forward pass, kept for export and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub x: Var,
    pub h: Var,
    /// Per task: shared-module output.
    pub shared: Vec<Option<Var>>,
    /// Per task: shared-gate weights `[batch, N]`.
    pub gate_weights: Vec<Option<Var>>,
    pub domain_module: Option<Var>,
    /// Per task: task-module output.
    pub task_module: Vec<Option<Var>>,
    /// Per task: tower input.
    pub fused: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Tasks predicted, in the order of `predictions`.
    pub tasks: Vec<usize>,
    /// One `[batch, 1]` probability column per predicted task.
    pub predictions: Vec<Var>,
    pub trace: Trace,
}

/// Sigmoid of every fusion logit, evaluated in double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha_d: Option<Vec<f64>>,
    pub alpha_t: Option<Vec<f64>>,
    pub beta_d: Option<Vec<f64>>,
    pub beta_t: Option<Vec<f64>>,
}

/// Elementwise sigmoid of a logit vector.
pub fn realize_fusion_weights<T: Real>(logits: &[T]) -> Vec<T> {
    logits.iter().map(|&e| crate::autodiff::sigmoid(e)).collect()
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.store.add(name, ParamGroup::Model, Tensor::new(shape.to_vec(), values).expect("positive dims"))
    }

    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize) -> AffineIds {
        let bound = 1.0 / (fan_in as f32).sqrt();
        AffineIds {
            w: self.uniform(format!("{name}.w"), &[fan_in, fan_out], bound),
            b: self.uniform(format!("{name}.b"), &[fan_out], bound),
        }
    }

    fn tower(&mut self, name: &str, fan_in: usize, hidden: usize) -> TowerIds {
        TowerIds {
            hidden: self.affine(&format!("{name}.hidden"), fan_in, hidden),
            out: self.affine(&format!("{name}.out"), hidden, 1),
        }
    }

    fn logits(&mut self, name: &str, len: usize) -> ParamId {
        self.store.add(format!("fusion.{name}"), ParamGroup::Fusion, Tensor::zeros(&[len]))
    }
}

impl Architecture {
    /// Registers the parameters of `kind` in a fresh store.
    pub fn build(kind: VariantKind, space: &FeatureSpace, dims: ModelDims, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        if kind == VariantKind::MlpSingle {
            return Err(ModelError::Incompatible(
                "a single-pair MLP needs its (domain, task); use Architecture::mlp_single".into(),
            ));
        }
        Self::build_inner(kind, space, dims, seed, None)
    }

    /// One-hidden-layer network with a single tower for the pair `(domain, task)`.
    pub fn mlp_single(space: &FeatureSpace, dims: ModelDims, domain: usize, task: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        if domain >= space.domains || task >= space.tasks {
            return Err(ModelError::Incompatible(format!(
                "pair ({domain}, {task}) outside {} domains x {} tasks",
                space.domains, space.tasks
            )));
        }
        Self::build_inner(VariantKind::MlpSingle, space, dims, seed, Some((domain, task)))
    }

    fn build_inner(kind: VariantKind, space: &FeatureSpace, dims: ModelDims, seed: u64, pair: Option<(usize, usize)>) -> Result<(Self, ParamStore<f32>)> {
        dims.validate()?;
        space.validate().map_err(|e| ModelError::Incompatible(e.to_string()))?;
        let (nd, nt) = (space.domains, space.tasks);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embedding = EmbeddingTables::register(b.store, space, dims.embedding_dim, &mut b.rng);
        let input = embedding.output_width();
        let (hd, k) = (dims.hidden_dim, dims.expert_dim);

        if let Some((domain, task)) = pair {
            let hidden = b.affine("mlp.hidden", input, hd);
            let tower = b.tower(&format!("tower.{domain}.{task}"), hd, dims.tower_hidden);
            let arch = Self {
                kind,
                space: space.clone(),
                dims,
                embedding,
                fusion: FusionIds::default(),
                body: Body::Mlp {
                    domain,
                    task,
                    hidden,
                    tower,
                },
            };
            return Ok((arch, store));
        }

        let bound_in = 1.0 / (input as f32).sqrt();
        let w_domain = (0..nd)
            .map(|d| b.uniform(format!("domain_repr.w.{d}"), &[input, hd], bound_in))
            .collect();
        let b_domain = (0..nd)
            .map(|d| b.uniform(format!("domain_repr.b.{d}"), &[hd], bound_in))
            .collect();
        let w_shared = b.store.add("domain_repr.w_shared", ParamGroup::Model, Tensor::full(&[input, hd], 1.0));
        let b_shared = b.uniform("domain_repr.b_shared".into(), &[hd], bound_in);
        let map = b.affine("domain_repr.map", hd, hd);
        let adapter = [b.affine("domain_repr.adapter.0", input, hd), b.affine("domain_repr.adapter.1", hd, hd)];
        let repr = ReprIds {
            w_domain,
            b_domain,
            w_shared,
            b_shared,
            map,
            adapter,
        };

        let shared_experts = (0..dims.shared_experts)
            .map(|e| b.affine(&format!("shared_expert.{e}"), hd, k))
            .collect();
        let gates = pairs(nd, nt)
            .map(|(d, t)| b.affine(&format!("gate.{d}.{t}"), hd, dims.shared_experts))
            .collect();
        let domain_experts = kind
            .has_domain_module()
            .then(|| (0..nd).map(|d| b.affine(&format!("domain_expert.{d}"), hd, k)).collect());
        let task_experts = kind
            .has_task_module()
            .then(|| (0..nt).map(|t| b.affine(&format!("task_expert.{t}"), hd, k)).collect());
        let combine = match kind {
            VariantKind::ConcatModules => Combine::Concat(b.affine("mix", 3 * k, k)),
            VariantKind::FullyGated => Combine::Gated(
                pairs(nd, nt)
                    .map(|(d, t)| b.affine(&format!("module_gate.{d}.{t}"), hd, 3))
                    .collect(),
            ),
            _ => Combine::Additive,
        };
        let towers = pairs(nd, nt)
            .map(|(d, t)| b.tower(&format!("tower.{d}.{t}"), k, dims.tower_hidden))
            .collect();
        let additive = matches!(combine, Combine::Additive);
        let fusion = FusionIds {
            alpha_d: (additive && domain_experts.is_some()).then(|| b.logits("alpha_d", nd)),
            alpha_t: (additive && task_experts.is_some()).then(|| b.logits("alpha_t", nt)),
            beta_d: domain_experts.is_some().then(|| b.logits("beta_d", nd)),
            beta_t: task_experts.is_some().then(|| b.logits("beta_t", nt)),
        };
        let arch = Self {
            kind,
            space: space.clone(),
            dims,
            embedding,
            fusion,
            body: Body::Mixture(MixtureIds {
                repr,
                shared_experts,
                gates,
                domain_experts,
                task_experts,
                combine,
                towers,
            }),
        };
        Ok((arch, store))
    }

    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn fusion_ids(&self) -> FusionIds {
        self.fusion
    }

    pub fn embedding(&self) -> &EmbeddingTables {
        &self.embedding
    }

    /// The `(domain, task)` pair of a single-pair MLP.
    pub fn pair(&self) -> Option<(usize, usize)> {
        match self.body {
            Body::Mlp { domain, task, .. } => Some((domain, task)),
            Body::Mixture(_) => None,
        }
    }

    /// Tasks this model predicts.
    pub fn output_tasks(&self) -> Vec<usize> {
        match self.body {
            Body::Mlp { task, .. } => vec![task],
            Body::Mixture(_) => (0..self.space.tasks).collect(),
        }
    }

    /// Width of the tower input (the exported embedding width).
    pub fn fused_width(&self) -> usize {
        match self.body {
            Body::Mlp { .. } => self.dims.hidden_dim,
            Body::Mixture(_) => self.dims.expert_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &BoundParams, batch: &Batch) -> Result<Forward> {
        let d = batch.domain;
        if d >= self.space.domains {
            return Err(ModelError::DomainOutOfRange {
                domain: d,
                domains: self.space.domains,
            });
        }
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if batch.features.len() != self.space.fields.len() || batch.labels.len() != self.space.tasks {
            return Err(ModelError::BatchLayout {
                found: batch.features.len(),
                found_tasks: batch.labels.len(),
                fields: self.space.fields.len(),
                tasks: self.space.tasks,
            });
        }
        let x = self.embedding.embed(g, params, &batch.features)?;
        match &self.body {
            Body::Mlp {
                domain,
                task,
                hidden,
                tower,
            } => {
                if d != *domain {
                    return Err(ModelError::WrongDomain {
                        expected: *domain,
                        found: d,
                    });
                }
                let h = ops::affine(g, x, hidden.bind(params))?;
                let h = g.relu(h)?;
                let h = g.layer_norm(h)?;
                let y = ops::tower(g, h, tower.bind(params))?;
                let mut trace = Trace::empty(x, h, self.space.tasks);
                trace.fused[*task] = Some(h);
                Ok(Forward {
                    tasks: vec![*task],
                    predictions: vec![y],
                    trace,
                })
            }
            Body::Mixture(m) => self.forward_mixture(g, params, m, x, d),
        }
    }

    fn forward_mixture<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, m: &MixtureIds, x: Var, d: usize) -> Result<Forward> {
        let nt = self.space.tasks;
        let repr = DomainRepr {
            w_domain: p.var(m.repr.w_domain[d]),
            b_domain: p.var(m.repr.b_domain[d]),
            w_shared: p.var(m.repr.w_shared),
            b_shared: p.var(m.repr.b_shared),
            map: m.repr.map.bind(p),
            adapter: [m.repr.adapter[0].bind(p), m.repr.adapter[1].bind(p)],
        };
        let h = ops::domain_repr(g, x, repr)?;
        let mut trace = Trace::empty(x, h, nt);

        let shared_experts: Vec<Affine> = m.shared_experts.iter().map(|a| a.bind(p)).collect();
        let domain_module = match (&m.domain_experts, self.fusion.beta_d) {
            (Some(experts), Some(beta)) => {
                let outs = experts
                    .iter()
                    .map(|a| ops::expert(g, h, a.bind(p)))
                    .collect::<Result<Vec<_>, _>>()?;
                let beta = ops::fusion_weight(g, p.var(beta), d)?;
                Some(ops::biased_fusion(g, &outs, d, beta)?)
            }
            _ => None,
        };
        trace.domain_module = domain_module;
        let task_outs = match &m.task_experts {
            Some(experts) => Some(
                experts
                    .iter()
                    .map(|a| ops::expert(g, h, a.bind(p)))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        let alpha_d = match self.fusion.alpha_d {
            Some(id) => Some(ops::fusion_weight(g, p.var(id), d)?),
            None => None,
        };

        let mut predictions = Vec::with_capacity(nt);
        for t in 0..nt {
            let pair = d * nt + t;
            let (s, weights) = ops::shared_module(g, h, &shared_experts, m.gates[pair].bind(p))?;
            trace.shared[t] = Some(s);
            trace.gate_weights[t] = Some(weights);
            let task_module = match (&task_outs, self.fusion.beta_t) {
                (Some(outs), Some(beta)) => {
                    let beta = ops::fusion_weight(g, p.var(beta), t)?;
                    Some(ops::biased_fusion(g, outs, t, beta)?)
                }
                _ => None,
            };
            trace.task_module[t] = task_module;
            let fused = match &m.combine {
                Combine::Additive => {
                    let alpha_t = match self.fusion.alpha_t {
                        Some(id) => Some(ops::fusion_weight(g, p.var(id), t)?),
                        None => None,
                    };
                    ops::fuse_views(
                        g,
                        s,
                        domain_module.zip(alpha_d),
                        task_module.zip(alpha_t),
                    )?
                }
                Combine::Concat(mix) => {
                    let parts = [s, domain_module.expect("concat has a domain module"), task_module.expect("concat has a task module")];
                    let joined = g.concat(&parts)?;
                    ops::affine(g, joined, mix.bind(p))?
                }
                Combine::Gated(gates) => {
                    let views = [s, domain_module.expect("gated has a domain module"), task_module.expect("gated has a task module")];
                    module_gate(g, h, &views, gates[pair].bind(p))?
                }
            };
            trace.fused[t] = Some(fused);
            predictions.push(ops::tower(g, fused, m.towers[pair].bind(p))?);
        }
        Ok(Forward {
            tasks: (0..nt).collect(),
            predictions,
            trace,
        })
    }
}

/// Softmax gate over the three module outputs.
pub fn module_gate<T: Real>(g: &mut Graph<T>, h: Var, views: &[Var; 3], gate: Affine) -> Result<Var, AutodiffError> {
    let logits = ops::affine(g, h, gate)?;
    let weights = g.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (i, &v) in views.iter().enumerate() {
        let w = g.slice(weights, i, 1)?;
        let term = g.mul(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("three views"))
}

impl Trace {
    pub(crate) fn empty(x: Var, h: Var, tasks: usize) -> Self {
        Self {
            x,
            h,
            shared: vec![None; tasks],
            gate_weights: vec![None; tasks],
            domain_module: None,
            task_module: vec![None; tasks],
            fused: vec![None; tasks],
        }
    }
}

/// All `(domain, task)` pairs in row-major order.
pub fn pairs(domains: usize, tasks: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..domains).flat_map(move |d| (0..tasks).map(move |t| (d, t)))
}

/// An architecture together with its trained values.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn build(kind: VariantKind, space: &FeatureSpace, dims: ModelDims, seed: u64) -> Result<Self> {
        let (arch, params) = Architecture::build(kind, space, dims, seed)?;
        Ok(Self { arch, params })
    }

    pub fn mlp_single(space: &FeatureSpace, dims: ModelDims, domain: usize, task: usize, seed: u64) -> Result<Self> {
        let (arch, params) = Architecture::mlp_single(space, dims, domain, task, seed)?;
        Ok(Self { arch, params })
    }

    /// Probabilities per predicted task (see [`Architecture::output_tasks`]).
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let out = self.arch.forward(&mut g, &bound, batch)?;
        Ok(out.predictions.iter().map(|&v| g.value(v).data().to_vec()).collect())
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        let f = self.arch.fusion_ids();
        let read = |id: Option<ParamId>| id.map(|id| realize_fusion_weights(self.params.get(id).cast::<f64>().data()));
        FusionWeights {
            alpha_d: read(f.alpha_d),
            alpha_t: read(f.alpha_t),
            beta_d: read(f.beta_d),
            beta_t: read(f.beta_t),
        }
    }
}
