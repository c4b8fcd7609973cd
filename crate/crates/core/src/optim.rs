//! First-order optimisers over a [`ParamStore`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer '{other}' (expected adam or sgd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("no gradient supplied for parameter '{0}'")]
    MissingGradient(String),
    #[error("update of parameter '{0}' is not finite")]
    NonFiniteUpdate(String),
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f32),
}

/// Adam state of one parameter. `steps` counts the updates this parameter
/// has received and drives its bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub steps: u64,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: AdamHyper,
    steps: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self::with_hyper(kind, AdamHyper::default())
    }

    pub fn with_hyper(kind: OptimizerKind, hyper: AdamHyper) -> Self {
        Self {
            kind,
            hyper,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(&id)
    }

    /// Restores saved state (used when resuming from a checkpoint).
    pub fn restore(&mut self, steps: u64, moments: BTreeMap<ParamId, Moments>) {
        self.steps = steps;
        self.moments = moments;
    }

    /// Applies one update to the parameters in `ids`; parameters not listed
    /// keep their values and state. Either every listed parameter is updated
    /// or none is.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &ParamGradients<f32>,
        ids: &[ParamId],
        lr: f32,
    ) -> Result<(), OptimError> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(OptimError::InvalidLearningRate(lr));
        }
        for &id in ids {
            if !grads.contains_key(&id) {
                return Err(OptimError::MissingGradient(store.name(id).to_string()));
            }
        }
        let steps = self.steps + 1;
        let mut staged: Vec<(ParamId, Vec<f32>, Option<Moments>)> = Vec::with_capacity(ids.len());
        for &id in ids {
            let grad = grads[&id].data();
            let current = store.get(id).data();
            let (next, moments) = match self.kind {
                OptimizerKind::Sgd => (
                    current.iter().zip(grad).map(|(&w, &g)| w - lr * g).collect::<Vec<_>>(),
                    None,
                ),
                OptimizerKind::Adam => {
                    let AdamHyper { beta1, beta2, eps } = self.hyper;
                    let mut m = self
                        .moments
                        .get(&id)
                        .cloned()
                        .unwrap_or_else(|| Moments {
                            steps: 0,
                            first: vec![0.0; current.len()],
                            second: vec![0.0; current.len()],
                        });
                    m.steps += 1;
                    let bc1 = (1.0 - (beta1 as f64).powi(m.steps as i32)) as f32;
                    let bc2 = (1.0 - (beta2 as f64).powi(m.steps as i32)) as f32;
                    let mut next = Vec::with_capacity(current.len());
                    for (i, (&w, &g)) in current.iter().zip(grad).enumerate() {
                        m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                        m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                        let m_hat = m.first[i] / bc1;
                        let v_hat = m.second[i] / bc2;
                        next.push(w - lr * m_hat / (v_hat.sqrt() + eps));
                    }
                    (next, Some(m))
                }
            };
            if !next.iter().all(|v| v.is_finite()) {
                return Err(OptimError::NonFiniteUpdate(store.name(id).to_string()));
            }
            staged.push((id, next, moments));
        }
        for (id, next, moments) in staged {
            store.get_mut(id).data_mut().copy_from_slice(&next);
            if let Some(m) = moments {
                self.moments.insert(id, m);
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    fn single(value: f32, grad: f32) -> (ParamStore<f32>, ParamGradients<f32>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Model, Tensor::vector(&[value]));
        let grads = [(id, Tensor::vector(&[grad]))].into_iter().collect();
        (store, grads, id)
    }

    #[test]
    fn sgd_step() {
        let (mut store, grads, id) = single(1.0, 2.0);
        Optimizer::new(OptimizerKind::Sgd)
            .step(&mut store, &grads, &[id], 0.5)
            .unwrap();
        assert_eq!(store.get(id).data(), &[0.0]);
    }

    #[test]
    fn sgd_zero_gradient_is_a_fixed_point() {
        let (mut store, grads, id) = single(0.37, 0.0);
        Optimizer::new(OptimizerKind::Sgd)
            .step(&mut store, &grads, &[id], 0.1)
            .unwrap();
        assert_eq!(store.get(id).data(), &[0.37]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> w -= 0.1 / (1 + 1e-8)
        let (mut store, grads, id) = single(0.0, 1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut store, &grads, &[id], 0.1).unwrap();
        let expected = -(0.1f64 / (1.0 + 1e-8)) as f32;
        assert!((store.get(id).data()[0] - expected).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
        let m = opt.moments(id).unwrap();
        assert_eq!(m.steps, 1);
        assert!((m.first[0] - 0.1).abs() < 1e-7);
        assert!((m.second[0] / 0.001 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn bias_correction_is_per_parameter() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Model, Tensor::vector(&[0.0]));
        let b = store.add("b", ParamGroup::Model, Tensor::vector(&[0.0]));
        let grads: ParamGradients<f32> = [(a, Tensor::vector(&[1.0])), (b, Tensor::vector(&[1.0]))].into_iter().collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut store, &grads, &[a], 0.1).unwrap();
        opt.step(&mut store, &grads, &[a], 0.1).unwrap();
        opt.step(&mut store, &grads, &[b], 0.1).unwrap();
        // b's first update is a first Adam step regardless of the global count.
        assert!((store.get(b).data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(opt.moments(a).unwrap().steps, 2);
        assert_eq!(opt.moments(b).unwrap().steps, 1);
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (mut store, grads, id) = single(0.25, 3.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut store, &grads, &[id], 0.0).unwrap();
        assert_eq!(store.get(id).data(), &[0.25]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, _, id) = single(1.0, 0.0);
        let err = Optimizer::new(OptimizerKind::Adam)
            .step(&mut store, &BTreeMap::new(), &[id], 0.1)
            .unwrap_err();
        assert_eq!(err, OptimError::MissingGradient("w".into()));
    }

    #[test]
    fn non_finite_update_leaves_store_untouched() {
        let (mut store, grads, id) = single(1.0, f32::INFINITY);
        let err = Optimizer::new(OptimizerKind::Sgd)
            .step(&mut store, &grads, &[id], 0.1)
            .unwrap_err();
        assert_eq!(err, OptimError::NonFiniteUpdate("w".into()));
        assert_eq!(store.get(id).data(), &[1.0]);
    }
}
