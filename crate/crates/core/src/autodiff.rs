//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in execution order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it in
//! reverse and accumulates vector-Jacobian products. One graph is built per
//! training step and dropped afterwards.
//!
//! Only the primitives the model needs are provided. Broadcasting is limited to
//! a right-hand operand that is a scalar `[1]`, a row `[k]` against `[.., k]`,
//! or a column `[b, 1]` against `[b, k]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, ShapeError, Tensor};

/// LayerNorm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// cross-entropy primitive.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Matmul,
    Add,
    ElementwiseMul,
    Relu,
    Sigmoid,
    SoftmaxLastdim,
    LayernormLastdim,
    ScalarScale,
    ScalarOffset,
    Sum,
    ConcatLastdim,
    SliceLastdim,
    Gather,
    Select,
    BinaryCrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::Matmul,
        Primitive::Add,
        Primitive::ElementwiseMul,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::SoftmaxLastdim,
        Primitive::LayernormLastdim,
        Primitive::ScalarScale,
        Primitive::ScalarOffset,
        Primitive::Sum,
        Primitive::ConcatLastdim,
        Primitive::SliceLastdim,
        Primitive::Gather,
        Primitive::Select,
        Primitive::BinaryCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::ElementwiseMul => "elementwise_mul",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::SoftmaxLastdim => "softmax_lastdim",
            Primitive::LayernormLastdim => "layernorm_lastdim",
            Primitive::ScalarScale => "scalar_scale",
            Primitive::ScalarOffset => "scalar_offset",
            Primitive::Sum => "sum",
            Primitive::ConcatLastdim => "concat_lastdim",
            Primitive::SliceLastdim => "slice_lastdim",
            Primitive::Gather => "gather",
            Primitive::Select => "select",
            Primitive::BinaryCrossEntropy => "binary_cross_entropy",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{primitive}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        primitive: Primitive,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{primitive}: index {index} out of bounds for dimension {bound}")]
    IndexOutOfBounds {
        primitive: Primitive,
        index: usize,
        bound: usize,
    },
    #[error("{primitive} produced a non-finite value")]
    NonFinite { primitive: Primitive },
    #[error("backward needs a scalar loss of shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Column,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Scale(Var, T),
    Offset(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Select { x: Var, index: usize },
    Bce { pred: Var, labels: Vec<T> },
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::Matmul(..) => Primitive::Matmul,
            Op::Add(..) => Primitive::Add,
            Op::Mul(..) => Primitive::ElementwiseMul,
            Op::Relu(_) => Primitive::Relu,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Softmax(_) => Primitive::SoftmaxLastdim,
            Op::LayerNorm { .. } => Primitive::LayernormLastdim,
            Op::Scale(..) => Primitive::ScalarScale,
            Op::Offset(_) => Primitive::ScalarOffset,
            Op::Sum(_) => Primitive::Sum,
            Op::Concat(_) => Primitive::ConcatLastdim,
            Op::Slice { .. } => Primitive::SliceLastdim,
            Op::Gather { .. } => Primitive::Gather,
            Op::Select { .. } => Primitive::Select,
            Op::Bce { .. } => Primitive::BinaryCrossEntropy,
        })
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    reached: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`. Every differentiable leaf
    /// has an entry (zeros when the loss does not depend on it).
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Whether the loss depends on `var` through the recorded graph.
    pub fn reached(&self, var: Var) -> bool {
        self.reached.get(var.0).copied().unwrap_or(false)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// The tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaves: Vec<Var>,
    faulty: Option<Primitive>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: Vec::new(),
            faulty: None,
        }
    }

    /// Scales the backward pass of `primitive` by 1.5. Used by negative
    /// controls of the gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, primitive: Primitive) {
        self.faulty = Some(primitive);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let var = self.push(Op::Leaf, value, true);
        self.leaves.push(var);
        var
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(var.0))
        }
    }

    fn record(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, inputs: &[Var]) -> Result<Var> {
        let primitive = op.primitive().expect("recorded ops are primitives");
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AutodiffError::NonFinite { primitive });
        }
        let value = Tensor::new(shape, data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(op, value, needs_grad))
    }

    fn mismatch(&self, primitive: Primitive, vars: &[Var]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            primitive,
            shapes: vars.iter().map(|v| self.value(*v).shape().to_vec()).collect(),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(Primitive::Matmul, &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record(Op::Matmul(a, b), vec![m, n], out, &[a, b])
    }

    fn broadcast(&self, primitive: Primitive, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb == [1] {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && sb[0] == *sa.last().expect("non-empty") {
            Ok(Broadcast::Row)
        } else if sa.len() == 2 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == 1 {
            Ok(Broadcast::Column)
        } else {
            Err(self.mismatch(primitive, &[a, b]))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, mode: Broadcast, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let k = va.last_dim();
        let (da, db) = (va.data(), vb.data());
        match mode {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::Row => da.iter().enumerate().map(|(i, &x)| f(x, db[i % k])).collect(),
            Broadcast::Column => da.iter().enumerate().map(|(i, &x)| f(x, db[i / k])).collect(),
        }
    }

    /// Elementwise `a + b` with right-hand broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let mode = self.broadcast(Primitive::Add, a, b)?;
        let out = self.zip_broadcast(a, b, mode, |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.record(Op::Add(a, b, mode), shape, out, &[a, b])
    }

    /// Elementwise `a * b` with right-hand broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let mode = self.broadcast(Primitive::ElementwiseMul, a, b)?;
        let out = self.zip_broadcast(a, b, mode, |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.record(Op::Mul(a, b, mode), shape, out, &[a, b])
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x);
        let shape = value.shape().to_vec();
        let out = value.data().iter().map(|&v| f(v)).collect();
        self.record(op, shape, out, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x);
        let k = value.last_dim();
        let mut out = Vec::with_capacity(value.len());
        for row in value.data().chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total = total + e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / total;
            }
        }
        let shape = value.shape().to_vec();
        self.record(Op::Softmax(x), shape, out, &[x])
    }

    /// LayerNorm over the last dimension without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x);
        let k = value.last_dim();
        let kf = T::from_usize(k).expect("dimension fits");
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut out = Vec::with_capacity(value.len());
        let mut inv_stds = Vec::with_capacity(value.outer_len());
        for row in value.data().chunks(k) {
            let mean = row.iter().copied().sum::<T>() / kf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / kf;
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds.push(inv_std);
            out.extend(row.iter().map(|&v| (v - mean) * inv_std));
        }
        let shape = value.shape().to_vec();
        self.record(Op::LayerNorm { x, inv_std: inv_stds }, shape, out, &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.record(Op::Sum(x), vec![1], vec![total], &[x])
    }

    /// Concatenate along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::ShapeMismatch {
                primitive: Primitive::ConcatLastdim,
                shapes: vec![],
            });
        };
        let lead = {
            let s = self.value(first).shape();
            s[..s.len() - 1].to_vec()
        };
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(self.mismatch(Primitive::ConcatLastdim, parts));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(first).outer_len();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.record(Op::Concat(parts.to_vec()), shape, out, parts)
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x);
        let k = value.last_dim();
        if len == 0 || start + len > k {
            return Err(AutodiffError::IndexOutOfBounds {
                primitive: Primitive::SliceLastdim,
                index: start + len,
                bound: k,
            });
        }
        let mut out = Vec::with_capacity(value.outer_len() * len);
        for row in value.data().chunks(k) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = value.shape().to_vec();
        *shape.last_mut().expect("non-empty") = len;
        self.record(Op::Slice { x, start }, shape, out, &[x])
    }

    /// Rows of a `[V, k]` table, giving `[ids.len(), k]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let value = self.value(table);
        if value.rank() != 2 || ids.is_empty() {
            return Err(self.mismatch(Primitive::Gather, &[table]));
        }
        let (rows, k) = (value.shape()[0], value.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * k);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfBounds {
                    primitive: Primitive::Gather,
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(value.row(id));
        }
        self.record(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), k],
            out,
            &[table],
        )
    }

    /// Element `index` of the flattened tensor, shape `[1]`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x);
        if index >= value.len() {
            return Err(AutodiffError::IndexOutOfBounds {
                primitive: Primitive::Select,
                index,
                bound: value.len(),
            });
        }
        let v = value.data()[index];
        self.record(Op::Select { x, index }, vec![1], vec![v], &[x])
    }

    /// Summed binary cross-entropy of probabilities `pred` against constant
    /// `labels` (same element count), with probabilities clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn binary_cross_entropy(&mut self, pred: Var, labels: &[T]) -> Result<Var> {
        self.check(pred)?;
        let value = self.value(pred);
        if value.len() != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                primitive: Primitive::BinaryCrossEntropy,
                shapes: vec![value.shape().to_vec(), vec![labels.len()]],
            });
        }
        let total = value
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| bce_term(p, y))
            .sum::<T>();
        self.record(
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![total],
            &[pred],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let shape = self.value(loss).shape();
        if shape != [1] {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.vjp(node, &g);
            let faulty = self.faulty.is_some() && node.op.primitive() == self.faulty;
            for (var, mut delta) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                if faulty {
                    let k = T::from_f64_lossy(1.5);
                    delta.iter_mut().for_each(|d| *d = *d * k);
                }
                accumulate(&mut grads[var.0], &self.nodes[var.0].value, delta);
            }
            grads[idx] = Some(g);
        }

        let reached = grads.iter().map(Option::is_some).collect();
        for &leaf in &self.leaves {
            if grads[leaf.0].is_none() {
                grads[leaf.0] = Some(Tensor::zeros(self.value(leaf).shape()));
            }
        }
        Ok(Gradients { grads, reached })
    }

    /// Input gradients of one node given its output gradient `g`.
    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Vec<T>)> {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                let (ad, bd) = (va.data(), vb.data());
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + grow[j] * brow[j];
                        }
                        da[i * k + p] = acc;
                        let aip = ad[i * k + p];
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            dbrow[j] = dbrow[j] + aip * grow[j];
                        }
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b, mode) => {
                let db = reduce_broadcast(gd, self.value(*a), self.value(*b), *mode, |g, _| g);
                vec![(*a, gd.to_vec()), (*b, db)]
            }
            Op::Mul(a, b, mode) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = va.last_dim();
                let bd = vb.data();
                let da = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        g * match mode {
                            Broadcast::Same => bd[i],
                            Broadcast::Scalar => bd[0],
                            Broadcast::Row => bd[i % k],
                            Broadcast::Column => bd[i / k],
                        }
                    })
                    .collect();
                let db = reduce_broadcast(gd, va, vb, *mode, |g, x| g * x);
                vec![(*a, da), (*b, db)]
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = gd
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softmax(x) => {
                let k = node.value.last_dim();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(k).zip(out.chunks(k)) {
                    let dot = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum::<T>();
                    dx.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - dot)));
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, inv_std } => {
                let k = node.value.last_dim();
                let kf = T::from_usize(k).expect("dimension fits");
                let mut dx = Vec::with_capacity(gd.len());
                for ((grow, yrow), &s) in gd.chunks(k).zip(out.chunks(k)).zip(inv_std) {
                    let mean_g = grow.iter().copied().sum::<T>() / kf;
                    let mean_gy = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum::<T>() / kf;
                    dx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&g, &y)| s * (g - mean_g - y * mean_gy)),
                    );
                }
                vec![(*x, dx)]
            }
            Op::Scale(x, c) => vec![(*x, gd.iter().map(|&g| g * *c).collect())],
            Op::Offset(x) => vec![(*x, gd.to_vec())],
            Op::Sum(x) => vec![(*x, vec![gd[0]; self.value(*x).len()])],
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.outer_len();
                let mut offset = 0;
                let mut result = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = self.value(*p).last_dim();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let base = r * total + offset;
                        dp.extend_from_slice(&gd[base..base + w]);
                    }
                    offset += w;
                    result.push((*p, dp));
                }
                result
            }
            Op::Slice { x, start } => {
                let vx = self.value(*x);
                let (k, len) = (vx.last_dim(), node.value.last_dim());
                let mut dx = vec![T::zero(); vx.len()];
                for (r, grow) in gd.chunks(len).enumerate() {
                    dx[r * k + start..r * k + start + len].copy_from_slice(grow);
                }
                vec![(*x, dx)]
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let k = vt.last_dim();
                let mut dt = vec![T::zero(); vt.len()];
                for (grow, &id) in gd.chunks(k).zip(ids) {
                    let row = &mut dt[id * k..(id + 1) * k];
                    for (d, &g) in row.iter_mut().zip(grow) {
                        *d = *d + g;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Select { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[*index] = gd[0];
                vec![(*x, dx)]
            }
            Op::Bce { pred, labels } => {
                let lo = T::from_f64_lossy(PROB_CLAMP);
                let hi = T::one() - lo;
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            gd[0] * (p - y) / (p * (T::one() - p))
                        }
                    })
                    .collect();
                vec![(*pred, dp)]
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, like: &Tensor<T>, delta: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), delta).expect("gradient matches value shape"));
        }
    }
}

/// Gradient for the broadcast right-hand operand: `f(g, a)` summed over the
/// broadcast axes.
fn reduce_broadcast<T: Real>(
    gd: &[T],
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: Broadcast,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let ad = a.data();
    let k = a.last_dim();
    let mut db = vec![T::zero(); b.len()];
    for (i, (&g, &x)) in gd.iter().zip(ad).enumerate() {
        let slot = match mode {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Row => i % k,
            Broadcast::Column => i / k,
        };
        db[slot] = db[slot] + f(g, x);
    }
    db
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn bce_term<T: Real>(p: T, y: T) -> T {
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let p = p.max(lo).min(T::one() - lo);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(&[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(&[1000.0, 1000.0, -1000.0]));
        let y = g.softmax(x).unwrap();
        assert!(close(g.value(y).data(), &[0.5, 0.5, 0.0], 1e-7));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(&[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        for c in [-3.5f32, 0.0, 1.0, 250.0] {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::vector(&[c; 4]));
            let y = g.layer_norm(x).unwrap();
            assert_eq!(g.value(y).data(), &[0.0; 4]);
        }
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 6.0, -4.0, 0.5, 3.0]).unwrap());
        let y = g.layer_norm(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f32>::new();
        let eye = g.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a_vals = vec![1.5, -2.0, 0.25, 3.0, 7.0, -1.0];
        let a = g.constant(Tensor::matrix(3, 2, a_vals.clone()).unwrap());
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), a_vals.as_slice());
        assert_eq!(g.value(y).shape(), &[3, 2]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                primitive: Primitive::Matmul,
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(&[f32::MAX]));
        let err = g.scale(x, 10.0).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { primitive: Primitive::ScalarScale });
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::vector(&[0.3, -1.0, 4.0, 2.0]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::vector(&[0.0]));
        let y = g.sigmoid(w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.25]);
    }

    #[test]
    fn unreachable_leaves_get_zero_gradients() {
        let mut g = Graph::<f32>::new();
        let used = g.leaf(Tensor::vector(&[1.0, 2.0]));
        let unused = g.leaf(Tensor::zeros(&[2, 3]));
        let loss = g.sum(used).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.reached(used));
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 6]);
        assert_eq!(grads.get(unused).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert_eq!(
            g.backward(x).unwrap_err(),
            AutodiffError::NonScalarLoss(vec![2])
        );
        let other = {
            let mut h = Graph::<f32>::new();
            for _ in 0..5 {
                h.constant(Tensor::scalar(0.0));
            }
            Var(4)
        };
        assert_eq!(g.backward(other).unwrap_err(), AutodiffError::UnknownNode(4));
    }

    /// Chain rule on a 2x2 composition: loss = sum(sigmoid(W x)), compared
    /// against the explicit product of Jacobians.
    #[test]
    fn chain_rule_matches_jacobian_product() {
        let w_vals = [0.5f64, -1.0, 2.0, 0.25];
        let x_vals = [1.5f64, -0.5];
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(1, 2, x_vals.to_vec()).unwrap());
        let w = g.leaf(Tensor::matrix(2, 2, w_vals.to_vec()).unwrap());
        let z = g.matmul(x, w).unwrap();
        let s = g.sigmoid(z).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();

        // z_j = sum_i x_i W_ij ; dL/dz_j = s_j (1 - s_j) ; dL/dx_i = sum_j W_ij dL/dz_j
        let z0 = x_vals[0] * w_vals[0] + x_vals[1] * w_vals[2];
        let z1 = x_vals[0] * w_vals[1] + x_vals[1] * w_vals[3];
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let dz = [s(z0) * (1.0 - s(z0)), s(z1) * (1.0 - s(z1))];
        let dx = [
            w_vals[0] * dz[0] + w_vals[1] * dz[1],
            w_vals[2] * dz[0] + w_vals[3] * dz[1],
        ];
        let dw = [x_vals[0] * dz[0], x_vals[0] * dz[1], x_vals[1] * dz[0], x_vals[1] * dz[1]];
        for (a, b) in grads.get(x).unwrap().data().iter().zip(dx) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in grads.get(w).unwrap().data().iter().zip(dw) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn broadcast_add_and_mul_gradients_reduce() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let row = g.leaf(Tensor::vector(&[1., 1., 1.]));
        let col = g.leaf(Tensor::matrix(2, 1, vec![2., 3.]).unwrap());
        let s = g.leaf(Tensor::scalar(0.5));
        let y = g.add(a, row).unwrap();
        let y = g.mul(y, col).unwrap();
        let y = g.mul(y, s).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        // dL/drow_j = sum_i col_i * s = (2 + 3) * 0.5
        assert_eq!(grads.get(row).unwrap().data(), &[2.5, 2.5, 2.5]);
        // dL/dcol_i = s * sum_j (a_ij + 1)
        assert_eq!(grads.get(col).unwrap().data(), &[0.5 * 9.0, 0.5 * 18.0]);
        // dL/ds = sum_ij col_i (a_ij + 1)
        assert_eq!(grads.get(s).unwrap().data(), &[2.0 * 9.0 + 3.0 * 18.0]);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::vector(&[0.5]));
        let l = g.binary_cross_entropy(p, &[1.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let build = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::matrix(2, 3, vec![0.1, -0.7, 1.3, 2.2, 0.0, -1.1]).unwrap());
            let w = g.leaf(Tensor::matrix(3, 2, vec![0.3, 0.9, -0.4, 0.2, 0.5, -0.6]).unwrap());
            let z = g.matmul(x, w).unwrap();
            let z = g.layer_norm(z).unwrap();
            let z = g.softmax(z).unwrap();
            g.value(z).clone()
        };
        assert!(build().bit_eq(&build()));
    }
}
