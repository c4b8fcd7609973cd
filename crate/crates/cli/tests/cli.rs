use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mdmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdmt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run mdmt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

/// The single JSON error record a failing command prints.
fn error_record(o: &Output) -> Value {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got:\n{err}");
    serde_json::from_str(lines[0]).expect("error record is JSON")
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("line is JSON"))
        .collect()
}

const SMALL: [&str; 6] = ["--set", "synth.samples=200,200,100", "--set", "train.epochs=3", "--set", "train.batch_size=64"];

/// Trains with `extra` settings and returns the run directory.
fn train(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    let o = mdmt(dir, &args);
    assert_ok(&o);
    let run = stdout(&o).lines().last().unwrap().to_string();
    dir.join(run)
}

#[test]
fn train_on_500_samples_writes_parseable_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "runs", &[]);
    let history = jsonl(&run.join("history.jsonl"));
    assert_eq!(history.iter().filter(|l| l["record"] == "epoch").count(), 3);
    assert_eq!(history.last().unwrap()["record"], "summary");
    let report = jsonl(&run.join("report.jsonl"));
    assert_eq!(report.len(), 3 * 2 + 1);
    let ck = m3oe::trainer::Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    m3oe::trainer::load_predictor(&ck).unwrap();
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-seed0"));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), "a", &["--set", "train.seed=4"]);
    let b = train(tmp.path(), "b", &["--seed", "4"]);
    for file in ["history.jsonl", "report.jsonl", "checkpoint.bin", "config.txt"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let c = train(tmp.path(), "c", &["--seed", "5"]);
    assert_ne!(std::fs::read(a.join("history.jsonl")).unwrap(), std::fs::read(c.join("history.jsonl")).unwrap());
}

fn eval_overall(dir: &Path, run: &Path, split: &str, extra: &[&str]) -> f64 {
    let ck = run.join("checkpoint.bin");
    let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--split", split];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    let o = mdmt(dir, &args);
    assert_ok(&o);
    let last: Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(last["record"], "overall");
    last["auc"].as_f64().unwrap()
}

#[test]
fn history_validation_auc_matches_eval_of_best_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    for variant in ["m3oe", "mlp_single", "concat_modules"] {
        let setting = format!("model.variant={variant}");
        let extra = ["--set", setting.as_str()];
        let run = train(tmp.path(), variant, &extra);
        let history = jsonl(&run.join("history.jsonl"));
        let summary = history.last().unwrap();
        let recorded = summary["valid_overall_auc"].as_f64().unwrap();
        let evaluated = eval_overall(tmp.path(), &run, "valid", &extra);
        assert!((recorded - evaluated).abs() < 1e-9, "{variant}: {recorded} vs {evaluated}");
        if variant != "mlp_single" {
            let best = summary["best_epochs"][0].as_u64().unwrap();
            let record = history.iter().find(|l| l["epoch"] == best).unwrap();
            let at_best = record["valid"]["overall_auc"].as_f64().unwrap();
            assert!((at_best - evaluated).abs() < 1e-9, "{variant}: {at_best} vs {evaluated}");
        }
    }
}

#[test]
fn untrained_model_scores_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = ["--set", "synth.samples=3000,3000,3000"];
    for seed in 0..5u64 {
        let seed_arg = seed.to_string();
        let mut args = vec!["train", "--out", "runs", "--seed", &seed_arg, "--set", "train.epochs=0"];
        args.extend_from_slice(&data);
        let o = mdmt(tmp.path(), &args);
        assert_ok(&o);
        let run = tmp.path().join(stdout(&o).lines().last().unwrap());
        let ck = run.join("checkpoint.bin");
        let mut args = vec!["eval", "--checkpoint", ck.to_str().unwrap(), "--split", "test"];
        args.extend_from_slice(&data);
        let o = mdmt(tmp.path(), &args);
        assert_ok(&o);
        let last: Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
        let auc = last["auc"].as_f64().unwrap();
        assert!((auc - 0.5).abs() <= 0.05, "seed {seed}: untrained AUC {auc}");
    }
}

#[test]
fn report_overall_is_mean_of_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "runs", &[]);
    let report = jsonl(&run.join("report.jsonl"));
    let (pairs, overall) = report.split_at(report.len() - 1);
    for key in ["auc", "logloss"] {
        let mean = pairs.iter().map(|p| p[key].as_f64().unwrap()).sum::<f64>() / pairs.len() as f64;
        assert!((overall[0][key].as_f64().unwrap() - mean).abs() < 1e-9, "{key}");
    }
}

#[test]
fn evaluating_on_mismatched_domains_names_both_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "runs", &[]);
    let ck = run.join("checkpoint.bin");
    let o = mdmt(
        tmp.path(),
        &["eval", "--checkpoint", ck.to_str().unwrap(), "--set", "synth.samples=200,200"],
    );
    assert_eq!(o.status.code(), Some(1));
    let record = error_record(&o);
    assert_eq!(record["error"], "mismatch");
    let msg = record["message"].as_str().unwrap();
    assert!(msg.contains("D=3") && msg.contains("D=2"), "{msg}");
}

#[test]
fn synth_prints_skewed_proportions() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdmt(tmp.path(), &["synth", "--set", "synth.samples=700,8900,400", "--out", "ds.bin"]);
    assert_ok(&o);
    let out = stdout(&o);
    for expected in ["(7.0%)", "(89.0%)", "(4.0%)"] {
        assert!(out.contains(expected), "{expected} missing from:\n{out}");
    }
    let ds = m3oe::data::read_cache_file(&tmp.path().join("ds.bin")).unwrap();
    assert_eq!(ds.domain_counts(), vec![700, 8900, 400]);
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "synth", "--set", "synth.noise=0", "--set", "synth.rho_domain=1", "--set", "synth.rho_task=1", "--out", out,
        ]
    };
    assert_ok(&mdmt(tmp.path(), &args("a.bin")));
    assert_ok(&mdmt(tmp.path(), &args("b.bin")));
    assert_eq!(
        std::fs::read(tmp.path().join("a.bin")).unwrap(),
        std::fs::read(tmp.path().join("b.bin")).unwrap()
    );
}

#[test]
fn synth_rejects_out_of_range_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdmt(tmp.path(), &["synth", "--set", "synth.rho_domain=1.5", "--out", "x.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_record(&o)["message"].as_str().unwrap().contains("rho_domain"));
    assert!(!tmp.path().join("x.bin").exists());
}

#[test]
fn gradcheck_passes_and_lists_each_primitive_once() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdmt(tmp.path(), &["gradcheck"]);
    assert_ok(&o);
    let out = stdout(&o);
    for p in m3oe::autodiff::Primitive::ALL {
        let count = out.lines().filter(|l| l.split_whitespace().next() == Some(p.name())).count();
        assert_eq!(count, 1, "{}", p.name());
    }
    assert!(out.lines().any(|l| l.starts_with("end_to_end.")));
}

#[test]
fn gradcheck_with_corrupted_sigmoid_fails_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mdmt(tmp.path(), &["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(1));
    let record = error_record(&o);
    assert_eq!(record["error"], "gradcheck");
    let families: Vec<&str> = record["families"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(families.contains(&"sigmoid"), "{families:?}");
    let sigmoid = stdout(&o).lines().find(|l| l.starts_with("sigmoid ")).unwrap().to_string();
    assert!(sigmoid.ends_with("FAIL"));
}

#[test]
fn ablation_table_aligns_seeds_and_shares_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--out", "runs", "--seeds", "0,1", "--variants", "full,no_automl"];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(&["--set", "synth.rho_domain=0.8"]);
    let o = mdmt(tmp.path(), &args);
    assert_ok(&o);
    let dir = tmp.path().join(stdout(&o).lines().last().unwrap());
    let rows = jsonl(&dir.join("table.jsonl"));
    assert_eq!(rows.len(), 2);
    let seeds = |r: &Value| r["cells"].as_array().unwrap().iter().map(|c| c["seed"].as_u64().unwrap()).collect::<Vec<_>>();
    assert_eq!(seeds(&rows[0]), vec![0, 1]);
    assert_eq!(seeds(&rows[0]), seeds(&rows[1]));
    for (a, b) in rows[0]["cells"].as_array().unwrap().iter().zip(rows[1]["cells"].as_array().unwrap()) {
        assert_eq!(a["initial_valid_auc"], b["initial_valid_auc"]);
    }
    for row in &rows {
        let cells = row["cells"].as_array().unwrap();
        let mean = cells.iter().map(|c| c["test_auc"].as_f64().unwrap()).sum::<f64>() / cells.len() as f64;
        assert!((row["mean_test_auc"].as_f64().unwrap() - mean).abs() < 1e-12);
    }
    assert!(std::fs::read_to_string(dir.join("table.txt")).unwrap().contains("no_automl"));
}

#[test]
fn sweep_reports_welch_comparison_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep", "--out", "runs", "--seeds", "0,1", "--grid", "model.shared_experts=1,2", "--set", "sweep.compare=shared_only",
    ];
    args.extend_from_slice(&SMALL);
    let o = mdmt(tmp.path(), &args);
    assert_ok(&o);
    let dir = tmp.path().join(stdout(&o).lines().last().unwrap());
    let lines = jsonl(&dir.join("sweep.jsonl"));
    assert_eq!(lines.len(), 2);
    for l in &lines {
        assert_eq!(l["sweep"]["runs"].as_array().unwrap().len(), 2);
        assert!(l["comparison"]["overall_auc"].is_object());
    }
}

#[test]
fn numerical_failure_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "runs", "--set", "train.lr=1e30"];
    args.extend_from_slice(&SMALL);
    let o = mdmt(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["error"], "numerical");
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.cfg"), "model.depth = 3\n").unwrap();
    for args in [
        vec!["train", "--config", "bad.cfg"],
        vec!["train", "--set", "train.lr=fast"],
        vec!["train", "--config", "missing.cfg"],
        vec!["no-such-command"],
    ] {
        let o = mdmt(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        error_record(&o);
    }
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("run.cfg"),
        "# small run\nsynth.samples = 200,200,100\ntrain.epochs = 5\ntrain.batch_size = 64\n",
    )
    .unwrap();
    let o = mdmt(tmp.path(), &["train", "--config", "run.cfg", "--set", "train.epochs=1", "--out", "runs"]);
    assert_ok(&o);
    let run = tmp.path().join(stdout(&o).lines().last().unwrap());
    let history = jsonl(&run.join("history.jsonl"));
    assert_eq!(history.len(), 2);
    assert!(std::fs::read_to_string(run.join("config.txt")).unwrap().contains("train.epochs = 1\n"));
}

#[test]
fn export_writes_one_row_per_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), "runs", &[]);
    let ck = run.join("checkpoint.bin");
    let mut args = vec!["export-embeddings", "--checkpoint", ck.to_str().unwrap(), "--stage", "task_module", "--out", "emb.tsv"];
    args.extend_from_slice(&SMALL);
    assert_ok(&mdmt(tmp.path(), &args));
    let text = std::fs::read_to_string(tmp.path().join("emb.tsv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 50);
}
