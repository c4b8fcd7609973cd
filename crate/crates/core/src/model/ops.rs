//! Building blocks of the forward pass, expressed on graph handles.

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::tensor::Real;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Weight `[in, out]` and bias `[out]` of an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: Var,
    pub b: Var,
}

/// `x·W + b`.
pub fn affine<T: Real>(g: &mut Graph<T>, x: Var, layer: Affine) -> Result<Var> {
    let y = g.matmul(x, layer.w)?;
    g.add(y, layer.b)
}

/// Expert network: `ReLU(LayerNorm(x·W + b))`.
pub fn expert<T: Real>(g: &mut Graph<T>, x: Var, layer: Affine) -> Result<Var> {
    let y = affine(g, x, layer)?;
    let y = g.layer_norm(y)?;
    g.relu(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainRepr {
    pub w_domain: Var,
    pub b_domain: Var,
    pub w_shared: Var,
    pub b_shared: Var,
    pub map: Affine,
    pub adapter: [Affine; 2],
}

/// Domain representation. The input passes through the domain weight masked
/// elementwise by the shared weight and is mapped into the common space. A
/// two-layer residual adapter of the input is added on top.
pub fn domain_repr<T: Real>(g: &mut Graph<T>, x: Var, p: DomainRepr) -> Result<Var> {
    let w_hat = g.mul(p.w_domain, p.w_shared)?;
    let z = g.matmul(x, w_hat)?;
    let z = g.add(z, p.b_domain)?;
    let z = g.add(z, p.b_shared)?;
    let mapped = affine(g, z, p.map)?;
    let a = affine(g, x, p.adapter[0])?;
    let a = g.relu(a)?;
    let a = affine(g, a, p.adapter[1])?;
    g.add(mapped, a)
}

/// Gated mixture of the shared experts. Returns the mixture and the
/// per-sample gate weights `[batch, N]`.
pub fn shared_module<T: Real>(g: &mut Graph<T>, h: Var, experts: &[Affine], gate: Affine) -> Result<(Var, Var)> {
    let logits = affine(g, h, gate)?;
    let weights = g.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (e, &layer) in experts.iter().enumerate() {
        let out = expert(g, h, layer)?;
        let column = if experts.len() == 1 { weights } else { g.slice(weights, e, 1)? };
        let term = g.mul(out, column)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let s = acc.ok_or(AutodiffError::ShapeMismatch {
        primitive: crate::autodiff::Primitive::Add,
        shapes: vec![],
    })?;
    Ok((s, weights))
}

/// Biased affine fusion of expert outputs: the focal output gets weight
/// `beta` and the others share `1 - beta` equally. A single output is
/// returned unchanged.
pub fn biased_fusion<T: Real>(g: &mut Graph<T>, outputs: &[Var], focal: usize, beta: Var) -> Result<Var> {
    if focal >= outputs.len() {
        return Err(AutodiffError::IndexOutOfBounds {
            primitive: crate::autodiff::Primitive::Select,
            index: focal,
            bound: outputs.len(),
        });
    }
    if outputs.len() == 1 {
        return Ok(outputs[0]);
    }
    let share = T::one() / T::from_usize(outputs.len() - 1).expect("count fits");
    let mut others: Option<Var> = None;
    for (i, &o) in outputs.iter().enumerate() {
        if i != focal {
            others = Some(match others {
                Some(a) => g.add(a, o)?,
                None => o,
            });
        }
    }
    let others = others.expect("at least two outputs");
    let coef = g.scale(beta, -share)?;
    let coef = g.offset(coef, share)?;
    let focal_term = g.mul(outputs[focal], beta)?;
    let other_term = g.mul(others, coef)?;
    g.add(focal_term, other_term)
}

/// `S + α_d·Dout + α_t·Tout`; a missing module contributes nothing.
pub fn fuse_views<T: Real>(g: &mut Graph<T>, shared: Var, domain: Option<(Var, Var)>, task: Option<(Var, Var)>) -> Result<Var> {
    let mut h = shared;
    for (out, alpha) in [domain, task].into_iter().flatten() {
        let term = g.mul(out, alpha)?;
        h = g.add(h, term)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tower {
    pub hidden: Affine,
    pub out: Affine,
}

/// `sigmoid(W2·ReLU(W1·h + b1) + b2)`, shape `[batch, 1]`.
pub fn tower<T: Real>(g: &mut Graph<T>, h: Var, t: Tower) -> Result<Var> {
    let z = affine(g, h, t.hidden)?;
    let z = g.relu(z)?;
    let z = affine(g, z, t.out)?;
    g.sigmoid(z)
}

/// Realised weight of one logit entry: `sigmoid(logits[index])`, shape `[1]`.
pub fn fusion_weight<T: Real>(g: &mut Graph<T>, logits: Var, index: usize) -> Result<Var> {
    let e = g.select(logits, index)?;
    g.sigmoid(e)
}
