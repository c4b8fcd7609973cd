//! Bi-level training: each epoch updates the network weights with the
//! fusion logits frozen, then takes one fusion-logit step on a random
//! training minibatch with the network frozen.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    ensemble_checkpoint, load_predictor, model_checkpoint, model_from_checkpoint, read_architecture, Checkpoint, CheckpointError, LoadedPredictor,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::data::{domain_batches, Batch, DataError, Dataset};
use crate::metrics::{auc, evaluate, logloss, EvalReport, PairMetrics};
use crate::model::{Forward, FusionWeights, Model, ModelDims, ModelError};
use crate::optim::{Moments, OptimError, Optimizer, OptimizerKind};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Real, Tensor};
use crate::variants::MlpEnsemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Fusion-logit learning rate; the model rate when unset.
    pub fusion_lr: Option<f32>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Consecutive epochs without a better validation AUC before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr: 1e-2,
            fusion_lr: None,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn fusion_lr(&self) -> f32 {
        self.fusion_lr.unwrap_or(self.lr)
    }

    /// Rates must be finite and non-negative (zero freezes a phase).
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        for (name, rate) in [("lr", self.lr), ("fusion_lr", self.fusion_lr())] {
            if !rate.is_finite() || rate < 0.0 {
                return Err(TrainError::Config(format!("{name} must be finite and non-negative, got {rate}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Model,
    Fusion,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Model => "model",
            Phase::Fusion => "fusion",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss {loss} in the {phase} phase at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { phase: Phase, epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite value in the {phase} phase at epoch {epoch}, batch {batch}: {source}")]
    NonFiniteValue {
        phase: Phase,
        epoch: usize,
        batch: usize,
        source: ModelError,
    },
    #[error("non-finite gradient for '{param}' in the {phase} phase at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { phase: Phase, epoch: usize, batch: usize, param: String },
    #[error("the {0} phase changed parameters it must leave frozen")]
    FreezeViolation(Phase),
}

impl TrainError {
    /// Failures caused by numbers going non-finite, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::NonFiniteValue { .. }
                | TrainError::NonFiniteGradient { .. }
                | TrainError::Optim(OptimError::NonFiniteUpdate(_))
        )
    }
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Summed binary cross-entropy over the predicted tasks of one batch.
pub fn summed_bce<T: Real>(g: &mut Graph<T>, fwd: &Forward, batch: &Batch) -> Result<Var, AutodiffError> {
    let mut total: Option<Var> = None;
    for (&t, &pred) in fwd.tasks.iter().zip(&fwd.predictions) {
        let labels: Vec<T> = batch.labels[t].iter().map(|&y| T::from_f64_lossy(f64::from(y))).collect();
        let bce = g.binary_cross_entropy(pred, &labels)?;
        total = Some(match total {
            Some(acc) => g.add(acc, bce)?,
            None => bce,
        });
    }
    Ok(total.expect("a forward pass predicts at least one task"))
}

/// Batch mean of the per-sample loss summed over tasks.
pub fn compute_loss<T: Real>(g: &mut Graph<T>, fwd: &Forward, batch: &Batch) -> Result<Var, AutodiffError> {
    let total = summed_bce(g, fwd, batch)?;
    g.scale(total, T::from_f64_lossy(1.0 / batch.len() as f64))
}

struct StepAt {
    phase: Phase,
    epoch: usize,
    batch: usize,
}

impl StepAt {
    fn wrap(&self, err: ModelError) -> TrainError {
        match err {
            ModelError::Autodiff(AutodiffError::NonFinite { .. }) => TrainError::NonFiniteValue {
                phase: self.phase,
                epoch: self.epoch,
                batch: self.batch,
                source: err,
            },
            other => TrainError::Model(other),
        }
    }
}

/// One optimiser step of `group` on the mean loss over `batches`; returns
/// that loss. Parameters the loss does not reach are left untouched.
fn step_group(model: &mut Model, opt: &mut Optimizer, batches: &[Batch], group: ParamGroup, lr: f32, at: StepAt) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g);
    let n: usize = batches.iter().map(Batch::len).sum();
    let mut total: Option<Var> = None;
    for batch in batches {
        let fwd = model.arch.forward(&mut g, &bound, batch).map_err(|e| at.wrap(e))?;
        let part = summed_bce(&mut g, &fwd, batch).map_err(|e| at.wrap(e.into()))?;
        total = Some(match total {
            Some(acc) => g.add(acc, part).map_err(|e| at.wrap(e.into()))?,
            None => part,
        });
    }
    let total = total.ok_or(ModelError::EmptyBatch)?;
    let loss = g.scale(total, 1.0 / n as f32).map_err(|e| at.wrap(e.into()))?;
    let value = f64::from(g.value(loss).item());
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            phase: at.phase,
            epoch: at.epoch,
            batch: at.batch,
            loss: value,
        });
    }
    let mut grads = g.backward(loss).map_err(|e| at.wrap(e.into()))?;
    let ids: Vec<ParamId> = model
        .params
        .ids_in(group)
        .into_iter()
        .filter(|&id| grads.reached(bound.var(id)))
        .collect();
    let param_grads = bound.gradients(&mut grads, &ids);
    for (&id, grad) in &param_grads {
        if !grad.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                phase: at.phase,
                epoch: at.epoch,
                batch: at.batch,
                param: model.params.name(id).to_string(),
            });
        }
    }
    opt.step(&mut model.params, &param_grads, &ids, lr)?;
    Ok(value)
}

/// One pass over the training batches updating every network weight while
/// the fusion logits stay frozen. Returns the sample-weighted mean loss.
pub fn train_model_epoch(model: &mut Model, opt: &mut Optimizer, train: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let frozen = model.params.fingerprint(ParamGroup::Fusion);
    let order_seed = derive_seed(cfg.seed, stream::BATCH_ORDER, epoch as u64);
    let (mut weighted, mut count) = (0.0, 0usize);
    for (i, db) in domain_batches(train, cfg.batch_size, order_seed)?.enumerate() {
        let batch = Batch::gather(train, &db);
        let at = StepAt {
            phase: Phase::Model,
            epoch,
            batch: i,
        };
        let loss = step_group(model, opt, std::slice::from_ref(&batch), ParamGroup::Model, cfg.lr, at)?;
        weighted += loss * batch.len() as f64;
        count += batch.len();
    }
    if model.params.fingerprint(ParamGroup::Fusion) != frozen {
        return Err(TrainError::FreezeViolation(Phase::Model));
    }
    Ok(weighted / count as f64)
}

/// Draws the fusion minibatch of `epoch`: up to `batch_size` training
/// samples chosen uniformly without replacement, grouped by domain.
pub fn fusion_minibatch(train: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if train.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::FUSION_BATCH, epoch as u64));
    let mut picked = sample(&mut rng, train.len(), batch_size.min(train.len())).into_vec();
    picked.sort_unstable();
    let mut by_domain: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for i in picked {
        by_domain.entry(train.samples()[i].domain).or_default().push(i);
    }
    let (fields, tasks) = (train.space().fields.len(), train.tasks());
    Ok(by_domain
        .into_iter()
        .map(|(d, idx)| Batch::from_samples(d as usize, fields, tasks, idx.iter().map(|&i| &train.samples()[i])))
        .collect())
}

/// One step of the fusion logits on `batches` with every network weight
/// frozen. Returns the minibatch loss, or `None` when the model has no
/// fusion logits.
pub fn update_fusion_logits(model: &mut Model, opt: &mut Optimizer, batches: &[Batch], lr: f32, epoch: usize) -> Result<Option<f64>> {
    if model.params.ids_in(ParamGroup::Fusion).is_empty() {
        return Ok(None);
    }
    if batches.iter().all(Batch::is_empty) {
        return Err(ModelError::EmptyBatch.into());
    }
    let frozen = model.params.fingerprint(ParamGroup::Model);
    let at = StepAt {
        phase: Phase::Fusion,
        epoch,
        batch: 0,
    };
    let loss = step_group(model, opt, batches, ParamGroup::Fusion, lr, at)?;
    if model.params.fingerprint(ParamGroup::Model) != frozen {
        return Err(TrainError::FreezeViolation(Phase::Fusion));
    }
    Ok(Some(loss))
}

/// Validation metrics used for model selection. A single-pair MLP is
/// scored on its own pair only.
pub fn validation_report(model: &Model, valid: &Dataset, batch_size: usize) -> Result<EvalReport, ModelError> {
    let Some((d, t)) = model.arch.pair() else {
        return evaluate(model, valid, batch_size);
    };
    let slice = valid.domain_slice(d);
    let (fields, tasks) = (valid.space().fields.len(), valid.tasks());
    let mut scores = Vec::with_capacity(slice.len());
    for chunk in slice.samples().chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(d, fields, tasks, chunk);
        scores.extend(model.predict(&batch)?.remove(0).into_iter().map(f64::from));
    }
    let labels: Vec<u8> = slice.samples().iter().map(|s| s.labels[t]).collect();
    let pair = PairMetrics {
        domain: d,
        task: t,
        n_samples: slice.len(),
        auc: auc(&scores, &labels).ok(),
        logloss: logloss(&scores, &labels).ok(),
    };
    Ok(EvalReport::from_pairs(valid.split(), vec![pair]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Loss of the fusion minibatch before its step.
    pub fusion_loss: Option<f64>,
    pub valid: EvalReport,
    /// Realised fusion weights after the epoch.
    pub fusion: FusionWeights,
    /// Whether this epoch set a new best validation AUC.
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
struct Best {
    epoch: usize,
    auc: f64,
    params: ParamStore<f32>,
}

/// Training state that can be advanced one epoch at a time, saved, and
/// resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    model_opt: Optimizer,
    fusion_opt: Optimizer,
    epoch: usize,
    best: Option<Best>,
    bad_epochs: usize,
    stopped: bool,
    history: TrainHistory,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch (the initial ones if no epoch ran).
    pub model: Model,
    /// Parameters after the last epoch.
    pub last: Model,
    pub history: TrainHistory,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model_opt: Optimizer::new(cfg.optimizer),
            fusion_opt: Optimizer::new(cfg.optimizer),
            cfg,
            model,
            epoch: 0,
            best: None,
            bad_epochs: 0,
            stopped: false,
            history: TrainHistory::default(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed epochs, including those before a resume.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Records produced since this trainer was created or resumed.
    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch >= self.cfg.epochs
    }

    /// Runs one model epoch and one fusion step, then validates.
    pub fn run_epoch(&mut self, train: &Dataset, valid: &Dataset) -> Result<&EpochRecord> {
        let epoch = self.epoch + 1;
        let train_loss = train_model_epoch(&mut self.model, &mut self.model_opt, train, &self.cfg, epoch)?;
        let fusion_loss = if self.model.arch.kind().learns_fusion() {
            let batches = fusion_minibatch(train, self.cfg.batch_size, self.cfg.seed, epoch)?;
            update_fusion_logits(&mut self.model, &mut self.fusion_opt, &batches, self.cfg.fusion_lr(), epoch)?
        } else {
            None
        };
        let report = validation_report(&self.model, valid, self.cfg.batch_size)?;
        let improved = match (report.overall_auc, &self.best) {
            (Some(score), Some(best)) => score > best.auc,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best = Some(Best {
                epoch,
                auc: report.overall_auc.expect("improvement needs a score"),
                params: self.model.params.clone(),
            });
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.cfg.patience {
                self.stopped = true;
            }
        }
        self.epoch = epoch;
        self.history.best_epoch = self.best.as_ref().map(|b| b.epoch);
        self.history.stopped_early = self.stopped && epoch < self.cfg.epochs;
        self.history.records.push(EpochRecord {
            epoch,
            train_loss,
            fusion_loss,
            valid: report,
            fusion: self.model.fusion_weights(),
            improved,
        });
        Ok(self.history.records.last().expect("just pushed"))
    }

    /// Runs epochs until the budget is spent or early stopping triggers.
    pub fn run(&mut self, train: &Dataset, valid: &Dataset) -> Result<()> {
        while !self.finished() {
            self.run_epoch(train, valid)?;
        }
        Ok(())
    }

    /// The best-validation model so far (the current one before any improvement).
    pub fn best_model(&self) -> Model {
        let mut model = self.model.clone();
        if let Some(best) = &self.best {
            model.params = best.params.clone();
        }
        model
    }

    pub fn best_validation_auc(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.auc)
    }

    pub fn finish(self) -> FitOutcome {
        FitOutcome {
            model: self.best_model(),
            last: self.model,
            history: self.history,
        }
    }

    /// Full resumable state: parameters, best parameters, optimiser moments
    /// and counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model);
        ck.set("state.seed", self.cfg.seed);
        ck.set("state.epoch", self.epoch);
        ck.set("state.bad_epochs", self.bad_epochs);
        ck.set("state.stopped", self.stopped);
        if let Some(best) = &self.best {
            ck.set("state.best_epoch", best.epoch);
            ck.set("state.best_auc", best.auc);
            ck.put_params("best.", &best.params);
        }
        for (tag, opt) in [("model", &self.model_opt), ("fusion", &self.fusion_opt)] {
            ck.set(format!("opt.{tag}.kind"), opt.kind());
            ck.set(format!("opt.{tag}.steps"), opt.steps());
            for id in self.model.params.ids() {
                if let Some(m) = opt.moments(id) {
                    let name = self.model.params.name(id);
                    let shape = self.model.params.get(id).shape().to_vec();
                    ck.set(format!("opt.{tag}.steps.{name}"), m.steps);
                    ck.tensors.insert(format!("opt.{tag}.m.{name}"), Tensor::new(shape.clone(), m.first.clone()).expect("moment shape"));
                    ck.tensors.insert(format!("opt.{tag}.v.{name}"), Tensor::new(shape, m.second.clone()).expect("moment shape"));
                }
            }
        }
        ck
    }

    /// Model-only checkpoint of the best parameters.
    pub fn best_checkpoint(&self) -> Checkpoint {
        model_checkpoint(&self.best_model())
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`]. Continuing it
    /// reproduces the uninterrupted run.
    pub fn resume(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let seed: u64 = ck.get("state.seed")?;
        if seed != cfg.seed {
            return Err(TrainError::Config(format!("checkpoint was trained with seed {seed}, config has {}", cfg.seed)));
        }
        let mut trainer = Trainer::new(model, cfg)?;
        trainer.epoch = ck.get("state.epoch")?;
        trainer.bad_epochs = ck.get("state.bad_epochs")?;
        trainer.stopped = ck.get("state.stopped")?;
        if ck.entries.contains_key("state.best_epoch") {
            let mut params = trainer.model.params.clone();
            ck.read_params("best.", &mut params)?;
            trainer.best = Some(Best {
                epoch: ck.get("state.best_epoch")?,
                auc: ck.get("state.best_auc")?,
                params,
            });
        }
        let params = &trainer.model.params;
        for (tag, opt) in [("model", &mut trainer.model_opt), ("fusion", &mut trainer.fusion_opt)] {
            let kind: OptimizerKind = ck.get(&format!("opt.{tag}.kind"))?;
            if kind != opt.kind() {
                return Err(TrainError::Config(format!("checkpoint optimizer is {kind}, config has {}", opt.kind())));
            }
            let mut moments = BTreeMap::new();
            for id in params.ids() {
                let name = params.name(id);
                let key = format!("opt.{tag}.steps.{name}");
                if !ck.entries.contains_key(&key) {
                    continue;
                }
                moments.insert(
                    id,
                    Moments {
                        steps: ck.get(&key)?,
                        first: ck.tensor(&format!("opt.{tag}.m.{name}"))?.data().to_vec(),
                        second: ck.tensor(&format!("opt.{tag}.v.{name}"))?.data().to_vec(),
                    },
                );
            }
            opt.restore(ck.get(&format!("opt.{tag}.steps"))?, moments);
        }
        Ok(trainer)
    }
}

/// Trains `model` with early stopping on validation overall AUC.
pub fn fit(model: Model, cfg: &TrainConfig, train: &Dataset, valid: &Dataset) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(train, valid)?;
    Ok(trainer.finish())
}

/// Trained per-pair MLP baseline.
#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub ensemble: MlpEnsemble,
    /// One history per member, in pair order.
    pub histories: Vec<TrainHistory>,
}

/// Trains one single-pair MLP per `(domain, task)` on that domain's data,
/// each with its own early stopping on its pair's validation AUC.
pub fn fit_mlp_ensemble(dims: ModelDims, cfg: &TrainConfig, train: &Dataset, valid: &Dataset) -> Result<EnsembleOutcome> {
    let mut ensemble = MlpEnsemble::build(train.space(), dims, cfg.seed)?;
    let tasks = train.tasks();
    let mut histories = Vec::new();
    for (i, member) in ensemble.members_mut().iter_mut().enumerate() {
        let d = i / tasks;
        let member_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, stream::MLP_MEMBER, i as u64),
            ..cfg.clone()
        };
        let outcome = fit(member.clone(), &member_cfg, &train.domain_slice(d), &valid.domain_slice(d))?;
        *member = outcome.model;
        histories.push(outcome.history);
    }
    Ok(EnsembleOutcome { ensemble, histories })
}

#[cfg(test)]
mod tests;
