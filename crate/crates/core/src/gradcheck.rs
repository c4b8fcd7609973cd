//! Central finite-difference checks of every autodiff primitive and of the
//! end-to-end model gradient, evaluated in double precision.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{AutodiffError, Graph, Primitive, Var};
use crate::data::{Batch, FeatureSpace, FieldSpec};
use crate::model::{pairs, Model, ModelDims};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::compute_loss;
use crate::variants::VariantKind;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
pub const PRIMITIVE_THRESHOLD: f64 = 1e-4;
pub const END_TO_END_THRESHOLD: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckScope {
    Primitive,
    EndToEnd,
}

/// Worst error found for one family of checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyResult {
    pub family: String,
    pub scope: CheckScope,
    pub cases: usize,
    pub entries: usize,
    pub worst_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub families: Vec<FamilyResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(|f| f.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.families.iter().filter(|f| !f.passed).map(|f| f.family.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub cases_per_primitive: usize,
    /// Corrupts the backward rule of one primitive, as a negative control.
    pub fault: Option<Primitive>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            cases_per_primitive: 10,
            fault: None,
        }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>>;

/// One randomised check: differentiable inputs and a scalar-valued function.
struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

/// Worst relative error of the gradient of `case` with respect to every input entry.
fn check_case(case: &Case, fault: Option<Primitive>) -> Result<(f64, usize), AutodiffError> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    if let Some(p) = fault {
        g.inject_backward_fault(p);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let (mut worst, mut entries) = (0f64, 0);
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf gradient");
        for j in 0..input.len() {
            let mut shifted = case.inputs.clone();
            shifted[i].data_mut()[j] += FD_STEP;
            let plus = eval(&shifted)?;
            shifted[i].data_mut()[j] -= 2.0 * FD_STEP;
            let minus = eval(&shifted)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
            entries += 1;
        }
    }
    Ok((worst, entries))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive dims")
}

/// Values in [-2, 2] kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// `sum(f(x) * r)` for a fixed random `r`, so every output entry matters.
fn projected(rng: &mut ChaCha8Rng, out_shape: Vec<usize>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError> + 'static) -> Build {
    let r = random_tensor(rng, &out_shape, -1.0, 1.0);
    Box::new(move |g, vars| {
        let y = f(g, vars)?;
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv)?;
        g.sum(prod)
    })
}

fn primitive_case(p: Primitive, index: usize, rng: &mut ChaCha8Rng) -> Case {
    let rows = rng.gen_range(1..=4);
    let cols = rng.gen_range(1..=5);
    let shape = vec![rows, cols];
    match p {
        Primitive::Matmul => {
            let (k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            Case {
                inputs: vec![random_tensor(rng, &[rows, k], -2.0, 2.0), random_tensor(rng, &[k, n], -2.0, 2.0)],
                build: projected(rng, vec![rows, n], |g, v| g.matmul(v[0], v[1])),
            }
        }
        Primitive::Add | Primitive::ElementwiseMul => {
            let rhs: Vec<usize> = match index % 4 {
                0 => shape.clone(),
                1 => vec![1],
                2 => vec![cols],
                _ => vec![rows, 1],
            };
            let mul = p == Primitive::ElementwiseMul;
            Case {
                inputs: vec![random_tensor(rng, &shape, -2.0, 2.0), random_tensor(rng, &rhs, -2.0, 2.0)],
                build: projected(rng, shape.clone(), move |g, v| if mul { g.mul(v[0], v[1]) } else { g.add(v[0], v[1]) }),
            }
        }
        Primitive::Relu => Case {
            inputs: vec![away_from_zero(rng, &shape, 0.05)],
            build: projected(rng, shape.clone(), |g, v| g.relu(v[0])),
        },
        Primitive::Sigmoid => Case {
            inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
            build: projected(rng, shape.clone(), |g, v| g.sigmoid(v[0])),
        },
        Primitive::SoftmaxLastdim => Case {
            inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
            build: projected(rng, shape.clone(), |g, v| g.softmax(v[0])),
        },
        Primitive::LayernormLastdim => {
            let shape = vec![rows, cols.max(2)];
            Case {
                inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
                build: projected(rng, shape.clone(), |g, v| g.layer_norm(v[0])),
            }
        }
        Primitive::ScalarScale => {
            let c = rng.gen_range(-2.0..2.0);
            Case {
                inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
                build: projected(rng, shape.clone(), move |g, v| g.scale(v[0], c)),
            }
        }
        Primitive::ScalarOffset => {
            let c = rng.gen_range(-2.0..2.0);
            Case {
                inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
                build: projected(rng, shape.clone(), move |g, v| g.offset(v[0], c)),
            }
        }
        Primitive::Sum => Case {
            inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
            build: projected(rng, vec![1], |g, v| g.sum(v[0])),
        },
        Primitive::ConcatLastdim => {
            let widths: Vec<usize> = (0..rng.gen_range(2..=3)).map(|_| rng.gen_range(1..=3)).collect();
            let total = widths.iter().sum();
            Case {
                inputs: widths.iter().map(|&w| random_tensor(rng, &[rows, w], -2.0, 2.0)).collect(),
                build: projected(rng, vec![rows, total], |g, v| g.concat(v)),
            }
        }
        Primitive::SliceLastdim => {
            let start = rng.gen_range(0..cols);
            let len = rng.gen_range(1..=cols - start);
            Case {
                inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
                build: projected(rng, vec![rows, len], move |g, v| g.slice(v[0], start, len)),
            }
        }
        Primitive::Gather => {
            let vocab = rng.gen_range(1..=5);
            let ids: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..vocab)).collect();
            let n = ids.len();
            Case {
                inputs: vec![random_tensor(rng, &[vocab, cols], -2.0, 2.0)],
                build: projected(rng, vec![n, cols], move |g, v| g.gather(v[0], &ids)),
            }
        }
        Primitive::Select => {
            let index = rng.gen_range(0..rows * cols);
            Case {
                inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
                build: projected(rng, vec![1], move |g, v| g.select(v[0], index)),
            }
        }
        Primitive::BinaryCrossEntropy => {
            let labels: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect();
            Case {
                inputs: vec![random_tensor(rng, &shape, 0.05, 0.95)],
                build: Box::new(move |g, v| g.binary_cross_entropy(v[0], &labels)),
            }
        }
    }
}

/// Finite-difference check of one primitive over `cases` random shapes.
pub fn check_primitive(p: Primitive, cases: usize, seed: u64, fault: Option<Primitive>) -> FamilyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(p as u64 + 1);
    let (mut worst, mut entries) = (0f64, 0);
    for i in 0..cases {
        let case = primitive_case(p, i, &mut rng);
        match check_case(&case, fault) {
            Ok((w, n)) => {
                worst = worst.max(w);
                entries += n;
            }
            Err(_) => worst = f64::INFINITY,
        }
    }
    FamilyResult {
        family: p.name().to_string(),
        scope: CheckScope::Primitive,
        cases,
        entries,
        worst_rel_error: worst,
        threshold: PRIMITIVE_THRESHOLD,
        passed: worst < PRIMITIVE_THRESHOLD,
    }
}

/// The tiny end-to-end setting: two domains, two tasks, two shared
/// experts, width 4 everywhere, three samples per domain.
pub fn tiny_setting() -> (FeatureSpace, ModelDims, Vec<Batch>) {
    let space = FeatureSpace::new(vec![FieldSpec::new("user", 5), FieldSpec::new("item", 4)], 2, 2).expect("valid space");
    let dims = ModelDims {
        embedding_dim: 4,
        hidden_dim: 4,
        expert_dim: 4,
        tower_hidden: 4,
        shared_experts: 2,
    };
    let batches = vec![
        Batch {
            domain: 0,
            features: vec![vec![1, 2, 4], vec![0, 3, 3]],
            labels: vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        },
        Batch {
            domain: 1,
            features: vec![vec![3, 0, 2], vec![1, 2, 0]],
            labels: vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 0.0]],
        },
    ];
    (space, dims, batches)
}

/// Records the summed per-batch losses of `model` under `params`.
fn record_loss(g: &mut Graph<f64>, model: &Model, params: &ParamStore<f64>, batches: &[Batch]) -> Result<(Var, crate::params::BoundParams), AutodiffError> {
    let bound = params.bind(g);
    let mut total = None;
    for batch in batches {
        let fwd = model.arch.forward(g, &bound, batch).map_err(|e| match e {
            crate::model::ModelError::Autodiff(a) => a,
            other => panic!("tiny setting is well formed: {other}"),
        })?;
        let loss = compute_loss(g, &fwd, batch)?;
        total = Some(match total {
            Some(acc) => g.add(acc, loss)?,
            None => loss,
        });
    }
    Ok((total.expect("at least one batch"), bound))
}

fn loss_value(model: &Model, params: &ParamStore<f64>, batches: &[Batch]) -> Result<f64, AutodiffError> {
    let mut g = Graph::new();
    let (loss, _) = record_loss(&mut g, model, params, batches)?;
    Ok(g.value(loss).item())
}

/// Analytic gradient of every parameter, indexed like the store.
fn loss_gradients(model: &Model, params: &ParamStore<f64>, batches: &[Batch], fault: Option<Primitive>) -> Result<Vec<Tensor<f64>>, AutodiffError> {
    let mut g = Graph::new();
    if let Some(p) = fault {
        g.inject_backward_fault(p);
    }
    let (loss, bound) = record_loss(&mut g, model, params, batches)?;
    let grads = g.backward(loss)?;
    Ok(params.ids().map(|id| grads.get(bound.var(id)).expect("leaf gradient").clone()).collect())
}

/// Models whose parameter families together cover every family.
fn end_to_end_models(seed: u64) -> Vec<(Model, Vec<Batch>)> {
    let (space, dims, batches) = tiny_setting();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in [VariantKind::M3oE, VariantKind::ConcatModules, VariantKind::FullyGated] {
        let mut model = Model::build(kind, &space, dims, rng.gen()).expect("tiny model");
        for id in model.params.ids_in(ParamGroup::Fusion) {
            let n = model.params.get(id).len();
            let logits: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            *model.params.get_mut(id) = Tensor::vector(&logits);
        }
        out.push((model, batches.clone()));
    }
    for (d, t) in pairs(space.domains, space.tasks) {
        let model = Model::mlp_single(&space, dims, d, t, rng.gen()).expect("tiny model");
        out.push((model, vec![batches[d].clone()]));
    }
    out
}

fn e2e_family(params: &ParamStore<f64>, id: crate::params::ParamId) -> String {
    if params.group(id) == ParamGroup::Fusion {
        params.name(id).to_string()
    } else {
        params.family(id).to_string()
    }
}

/// Finite-difference check of the model loss against every parameter
/// entry, reported per parameter family (each fusion vector separately).
pub fn check_end_to_end(seed: u64, fault: Option<Primitive>) -> Vec<FamilyResult> {
    let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (model, batches) in end_to_end_models(seed) {
        let params = model.params.cast::<f64>();
        let analytic = match loss_gradients(&model, &params, &batches, fault) {
            Ok(g) => g,
            Err(_) => {
                worst.insert("model".into(), (f64::INFINITY, 0));
                continue;
            }
        };
        for id in params.ids() {
            let family = e2e_family(&params, id);
            let entry = worst.entry(family).or_insert((0.0, 0));
            for j in 0..params.get(id).len() {
                let mut shifted = params.clone();
                shifted.get_mut(id).data_mut()[j] += FD_STEP;
                let plus = loss_value(&model, &shifted, &batches);
                shifted.get_mut(id).data_mut()[j] -= 2.0 * FD_STEP;
                let minus = loss_value(&model, &shifted, &batches);
                let err = match (plus, minus) {
                    (Ok(p), Ok(m)) => rel_error(analytic[id.index()].data()[j], (p - m) / (2.0 * FD_STEP)),
                    _ => f64::INFINITY,
                };
                entry.0 = entry.0.max(err);
                entry.1 += 1;
            }
        }
    }
    worst
        .into_iter()
        .map(|(family, (w, entries))| FamilyResult {
            family: format!("end_to_end.{family}"),
            scope: CheckScope::EndToEnd,
            cases: 1,
            entries,
            worst_rel_error: w,
            threshold: END_TO_END_THRESHOLD,
            passed: w < END_TO_END_THRESHOLD,
        })
        .collect()
}

/// Every primitive check followed by the end-to-end check.
pub fn run_gradcheck(opts: GradcheckOptions) -> GradcheckReport {
    let mut families: Vec<FamilyResult> = Primitive::ALL
        .iter()
        .map(|&p| check_primitive(p, opts.cases_per_primitive, opts.seed, opts.fault))
        .collect();
    families.extend(check_end_to_end(opts.seed, opts.fault));
    GradcheckReport { families }
}
