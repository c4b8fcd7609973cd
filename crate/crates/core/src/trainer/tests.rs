use super::*;
use crate::data::test_support::toy;
use crate::model::Trace;
use crate::variants::VariantKind;

fn tiny_dims() -> ModelDims {
    ModelDims {
        embedding_dim: 3,
        hidden_dim: 4,
        expert_dim: 3,
        tower_hidden: 3,
        shared_experts: 2,
    }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr: 0.05,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Loss of a graph whose predictions are the given constant columns.
fn loss_of(preds: &[Vec<f64>], labels: &[Vec<f32>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = preds
        .iter()
        .map(|p| g.leaf(Tensor::new(vec![p.len(), 1], p.clone()).unwrap()))
        .collect();
    let fwd = Forward {
        tasks: (0..preds.len()).collect(),
        predictions: vars.clone(),
        trace: Trace::empty(vars[0], vars[0], preds.len()),
    };
    let batch = Batch {
        domain: 0,
        features: vec![vec![0; preds[0].len()]],
        labels: labels.to_vec(),
    };
    let loss = compute_loss(&mut g, &fwd, &batch).unwrap();
    g.value(loss).item()
}

#[test]
fn loss_at_half_is_ln2() {
    assert!((loss_of(&[vec![0.5]], &[vec![1.0]]) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn loss_of_perfect_clamped_predictions_is_near_zero() {
    let loss = loss_of(&[vec![1e-7, 1.0 - 1e-7], vec![1.0 - 1e-7, 1e-7]], &[vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert!((0.0..1e-6).contains(&loss), "{loss}");
    // Exact 0 and 1 are clamped rather than producing infinities.
    let clamped = loss_of(&[vec![0.0]], &[vec![1.0]]);
    assert!((clamped - (-(1e-7f64).ln())).abs() < 1e-9);
}

#[test]
fn loss_matches_scalar_oracle() {
    let preds: Vec<Vec<f64>> = vec![vec![0.9, 0.2, 0.35, 0.6], vec![0.15, 0.7, 0.5, 0.99]];
    let labels = vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]];
    let mut oracle = 0.0;
    for i in 0..4 {
        for t in 0..2 {
            let (p, y) = (preds[t][i], f64::from(labels[t][i]));
            oracle -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    oracle /= 4.0;
    assert!((loss_of(&preds, &labels) - oracle).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = toy(&[6, 5], 2);
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let mut model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
        let before = model.params.clone();
        let mut opt = Optimizer::new(kind);
        let c = TrainConfig {
            lr: 0.0,
            optimizer: kind,
            ..cfg(1)
        };
        train_model_epoch(&mut model, &mut opt, &ds, &c, 1).unwrap();
        assert!(model.params.bit_eq(&before), "{kind}");
        assert!(opt.steps() > 0);
    }
}

#[test]
fn model_epoch_keeps_fusion_logits_frozen() {
    let ds = toy(&[6, 5], 2);
    let mut model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let fusion = model.params.ids_in(ParamGroup::Fusion);
    for &id in &fusion {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.3);
    }
    let before_fusion = model.params.fingerprint(ParamGroup::Fusion);
    let before_model = model.params.fingerprint(ParamGroup::Model);
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    train_model_epoch(&mut model, &mut opt, &ds, &cfg(1), 1).unwrap();
    assert_eq!(model.params.fingerprint(ParamGroup::Fusion), before_fusion);
    assert_ne!(model.params.fingerprint(ParamGroup::Model), before_model);
}

#[test]
fn parameters_of_other_domains_are_not_touched() {
    let ds = toy(&[6, 5], 2).domain_slice(0);
    let mut model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let before = model.params.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    train_model_epoch(&mut model, &mut opt, &ds, &cfg(1), 1).unwrap();
    for name in ["domain_repr.w.1", "domain_repr.b.1", "gate.1.0.w", "tower.1.1.out.w"] {
        let id = model.params.find(name).unwrap();
        assert!(model.params.get(id).bit_eq(before.get(id)), "{name} moved");
        assert!(opt.moments(id).is_none(), "{name} has optimiser state");
    }
    let touched = model.params.find("domain_repr.w.0").unwrap();
    assert!(!model.params.get(touched).bit_eq(before.get(touched)));
}

/// Loss of `model` (cast to f64) on one batch.
fn loss_f64(params: &ParamStore<f64>, model: &Model, batch: &Batch) -> f64 {
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let fwd = model.arch.forward(&mut g, &bound, batch).unwrap();
    let loss = compute_loss(&mut g, &fwd, batch).unwrap();
    g.value(loss).item()
}

fn central_difference(params: &ParamStore<f64>, id: ParamId, j: usize, f: impl Fn(&ParamStore<f64>) -> f64) -> f64 {
    let h = 1e-4;
    let mut plus = params.clone();
    plus.get_mut(id).data_mut()[j] += h;
    let mut minus = params.clone();
    minus.get_mut(id).data_mut()[j] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

#[test]
fn one_sgd_step_moves_weights_by_lr_times_finite_difference_gradient() {
    let ds = toy(&[5], 2);
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 3).unwrap();
    let batch = Batch::from_samples(0, 2, 2, ds.samples());
    let lr = 0.1;
    let mut stepped = model.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd);
    let c = TrainConfig {
        lr,
        optimizer: OptimizerKind::Sgd,
        batch_size: 16,
        ..cfg(1)
    };
    train_model_epoch(&mut stepped, &mut opt, &ds, &c, 1).unwrap();
    let base = model.params.cast::<f64>();
    let mut checked = 0;
    for id in model.params.ids_in(ParamGroup::Model) {
        let n = model.params.get(id).len();
        for j in [0, n / 2, n - 1] {
            let fd = central_difference(&base, id, j, |p| loss_f64(p, &model, &batch));
            let delta = f64::from(model.params.get(id).data()[j]) - f64::from(stepped.params.get(id).data()[j]);
            let expected = lr as f64 * fd;
            let err = (delta - expected).abs() / expected.abs().max(1e-3);
            assert!(err < 1e-2, "{} [{j}]: moved {delta}, expected {expected}", model.params.name(id));
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn fusion_step_moves_only_fusion_logits() {
    let ds = toy(&[6, 5], 2);
    let mut model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let batches = fusion_minibatch(&ds, 8, 3, 1).unwrap();
    let model_before = model.params.fingerprint(ParamGroup::Model);
    let fusion_before = model.params.fingerprint(ParamGroup::Fusion);
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    update_fusion_logits(&mut model, &mut opt, &batches, 0.0, 1).unwrap();
    assert_eq!(model.params.fingerprint(ParamGroup::Fusion), fusion_before);
    update_fusion_logits(&mut model, &mut opt, &batches, 0.1, 1).unwrap();
    assert_ne!(model.params.fingerprint(ParamGroup::Fusion), fusion_before);
    assert_eq!(model.params.fingerprint(ParamGroup::Model), model_before);
}

#[test]
fn fusion_step_follows_finite_difference_gradient_of_beta_d() {
    let ds = toy(&[6, 5], 2);
    let mut model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 2).unwrap();
    for id in model.params.ids_in(ParamGroup::Fusion) {
        let values: Vec<f32> = (0..model.params.get(id).len()).map(|i| 0.4 - 0.3 * i as f32).collect();
        *model.params.get_mut(id) = Tensor::vector(&values);
    }
    let batches = fusion_minibatch(&ds, 11, 5, 1).unwrap();
    assert_eq!(batches.len(), 2);
    let n: usize = batches.iter().map(Batch::len).sum();
    let beta_d = model.arch.fusion_ids().beta_d.unwrap();
    let base = model.params.cast::<f64>();
    let minibatch_loss = |p: &ParamStore<f64>| batches.iter().map(|b| loss_f64(p, &model, b) * b.len() as f64).sum::<f64>() / n as f64;
    let lr = 0.5;
    let mut stepped = model.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd);
    update_fusion_logits(&mut stepped, &mut opt, &batches, lr, 1).unwrap();
    for j in 0..2 {
        let fd = central_difference(&base, beta_d, j, minibatch_loss);
        let analytic = (f64::from(model.params.get(beta_d).data()[j]) - f64::from(stepped.params.get(beta_d).data()[j])) / lr as f64;
        let err = (analytic - fd).abs() / fd.abs().max(1e-6);
        assert!(err < 1e-3, "beta_d[{j}]: {analytic} vs {fd}");
    }
}

#[test]
fn fusion_minibatch_is_seeded_and_domain_grouped() {
    let ds = toy(&[20, 12], 2);
    let a = fusion_minibatch(&ds, 10, 1, 2).unwrap();
    let b = fusion_minibatch(&ds, 10, 1, 2).unwrap();
    let c = fusion_minibatch(&ds, 10, 1, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.iter().map(Batch::len).sum::<usize>(), 10);
    assert!(a.windows(2).all(|w| w[0].domain < w[1].domain));
    assert_eq!(fusion_minibatch(&ds, 100, 1, 2).unwrap().iter().map(Batch::len).sum::<usize>(), 32);
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let ds = toy(&[6, 5], 2);
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let out = fit(model.clone(), &cfg(0), &ds, &ds).unwrap();
    assert!(out.model.params.bit_eq(&model.params));
    assert!(out.history.records.is_empty());
    assert_eq!(out.history.best_epoch, None);
}

#[test]
fn identical_runs_give_identical_histories() {
    let ds = toy(&[12, 9], 2);
    let run = || {
        let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
        fit(model, &cfg(4), &ds, &ds).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(serde_json::to_string(&a.history).unwrap(), serde_json::to_string(&b.history).unwrap());
    assert!(a.model.params.bit_eq(&b.model.params));
}

#[test]
fn early_stopping_returns_the_best_validation_epoch() {
    let ds = toy(&[12, 9], 2);
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let c = TrainConfig {
        patience: 1,
        lr: 0.3,
        ..cfg(12)
    };
    let out = fit(model, &c, &ds, &ds).unwrap();
    let best_epoch = out.history.best_epoch.unwrap();
    let best = out.history.records[best_epoch - 1].valid.overall_auc.unwrap();
    for r in &out.history.records {
        assert!(r.valid.overall_auc.unwrap() <= best);
    }
    let rescored = validation_report(&out.model, &ds, 4).unwrap().overall_auc.unwrap();
    assert_eq!(rescored, best);
    if out.history.stopped_early {
        let last = out.history.records.last().unwrap().epoch;
        assert_eq!(last, best_epoch + 1);
    }
}

#[test]
fn patience_counts_consecutive_non_improving_epochs() {
    let ds = toy(&[12, 9], 2);
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let out = fit(model, &TrainConfig { lr: 0.0, patience: 2, ..cfg(10) }, &ds, &ds).unwrap();
    // With a frozen model every epoch after the first ties the best score.
    assert_eq!(out.history.records.len(), 3);
    assert!(out.history.stopped_early);
    assert_eq!(out.history.best_epoch, Some(1));
}

#[test]
fn weight_snapshots_are_open_unit_interval() {
    let ds = toy(&[12, 9], 2);
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let out = fit(model, &cfg(3), &ds, &ds).unwrap();
    for r in &out.history.records {
        let f = &r.fusion;
        for v in [&f.alpha_d, &f.alpha_t, &f.beta_d, &f.beta_t] {
            assert!(v.as_ref().unwrap().iter().all(|&w| w > 0.0 && w < 1.0));
        }
    }
}

#[test]
fn zero_fusion_rate_matches_the_frozen_fusion_variant() {
    let ds = toy(&[12, 9], 2);
    let full = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let frozen = Model::build(VariantKind::NoAutoML, ds.space(), tiny_dims(), 1).unwrap();
    let c = TrainConfig {
        fusion_lr: Some(0.0),
        ..cfg(3)
    };
    let a = fit(full, &c, &ds, &ds).unwrap();
    let b = fit(frozen, &c, &ds, &ds).unwrap();
    let losses = |h: &TrainHistory| h.records.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a.history), losses(&b.history));
    assert!(a.last.params.bit_eq(&b.last.params));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let ds = toy(&[12, 9], 2);
    let c = TrainConfig { patience: 10, ..cfg(5) };
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let full = fit(model.clone(), &c, &ds, &ds).unwrap();

    let mut first = Trainer::new(model, c.clone()).unwrap();
    first.run_epoch(&ds, &ds).unwrap();
    first.run_epoch(&ds, &ds).unwrap();
    let bytes = first.checkpoint().encode();
    let restored = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(restored.encode(), bytes);
    let mut second = Trainer::resume(&restored, c).unwrap();
    assert_eq!(second.epoch(), 2);
    second.run(&ds, &ds).unwrap();
    let resumed = second.finish();
    assert_eq!(resumed.history.records, full.history.records[2..]);
    assert!(resumed.last.params.bit_eq(&full.last.params));
    assert!(resumed.model.params.bit_eq(&full.model.params));
}

#[test]
fn resume_rejects_a_different_seed() {
    let ds = toy(&[6, 5], 2);
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let trainer = Trainer::new(model, cfg(2)).unwrap();
    let err = Trainer::resume(&trainer.checkpoint(), TrainConfig { seed: 12, ..cfg(2) }).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)));
}

#[test]
fn config_validation() {
    assert!(TrainConfig { batch_size: 0, ..cfg(1) }.validate().is_err());
    assert!(TrainConfig { lr: -1.0, ..cfg(1) }.validate().is_err());
    assert!(TrainConfig { fusion_lr: Some(f32::NAN), ..cfg(1) }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..cfg(1) }.validate().is_ok());
    assert_eq!(cfg(1).fusion_lr(), 0.05);
}

#[test]
fn exploding_learning_rate_reports_a_numerical_failure() {
    let ds = toy(&[12, 9], 2);
    let model = Model::build(VariantKind::M3oE, ds.space(), tiny_dims(), 1).unwrap();
    let c = TrainConfig {
        lr: 1e30,
        optimizer: OptimizerKind::Sgd,
        ..cfg(3)
    };
    let err = fit(model, &c, &ds, &ds).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn mlp_ensemble_members_train_on_their_own_pair() {
    let ds = toy(&[12, 9], 2);
    let out = fit_mlp_ensemble(tiny_dims(), &cfg(2), &ds, &ds).unwrap();
    assert_eq!(out.histories.len(), 4);
    for (i, h) in out.histories.iter().enumerate() {
        let r = &h.records[0];
        assert_eq!(r.valid.pairs.len(), 1);
        assert_eq!((r.valid.pairs[0].domain, r.valid.pairs[0].task), (i / 2, i % 2));
        assert!(r.fusion_loss.is_none());
    }
    let report = evaluate(&out.ensemble, &ds, 8).unwrap();
    assert_eq!(report.pairs.len(), 4);
}
