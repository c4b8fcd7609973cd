//! Command implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use m3oe::autodiff::Primitive;
use m3oe::data::{movielens, write_cache_file, DataError, Dataset, Split};
use m3oe::experiment::{
    self, check_compatible, compare_sweeps, run_variant, seed_sweep, ExperimentError, SeedSweepResult, Splits, SweepComparison,
};
use m3oe::gradcheck::{run_gradcheck, GradcheckOptions};
use m3oe::metrics::{evaluate, EvalReport, Predictor};
use m3oe::model::export::{export_embeddings as export_rows, ExportError, Stage};
use m3oe::trainer::{load_predictor, Checkpoint, CheckpointError, EpochRecord, LoadedPredictor, TrainHistory};
use m3oe::variants::VariantKind;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::ConfigArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("gradient check failed for: {}", .0.join(", "))]
    Gradcheck(Vec<String>),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Experiment(e) if e.is_numerical() => "numerical",
            CliError::Experiment(ExperimentError::Mismatch { .. }) => "mismatch",
            CliError::Experiment(_) => "experiment",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Export(_) => "export",
            CliError::Io { .. } => "io",
            CliError::Gradcheck(_) => "gradcheck",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Experiment(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }

    /// Prints the one-line error record and returns the exit code.
    pub fn report(&self) -> ExitCode {
        let mut record = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::Gradcheck(families) = self {
            record["families"] = json!(families);
        }
        eprintln!("{record}");
        ExitCode::from(self.exit_code())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(format!("cannot create {}", path.display())))?))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(format!("cannot create {}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    let ctx = || format!("cannot write {}", path.display());
    for line in lines {
        serde_json::to_writer(&mut w, &line).map_err(|e| CliError::Io {
            context: ctx(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(ctx()))?;
    }
    w.flush().map_err(io_err(ctx()))
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::resolve(args.config.as_deref(), &args.overrides)?)
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits::load(&cfg.data_source()?, cfg.split, cfg.split_seed)?)
}

fn pick_split<'a>(splits: &'a Splits, name: &str) -> Result<&'a Dataset> {
    let split: Split = name.parse().map_err(CliError::Usage)?;
    Ok(match split {
        Split::Train => &splits.train,
        Split::Valid => &splits.valid,
        Split::Test => &splits.test,
        Split::Full => return Err(CliError::Usage("split must be train, valid or test".into())),
    })
}

fn load_checkpoint(path: &Path) -> Result<LoadedPredictor> {
    Ok(load_predictor(&Checkpoint::load(path)?)?)
}

/// One line of `history.jsonl`.
#[derive(Serialize)]
struct HistoryLine<'a> {
    record: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    member: Option<usize>,
    #[serde(flatten)]
    epoch: &'a EpochRecord,
}

/// The closing line of `history.jsonl`: the chosen parameters' scores.
#[derive(Serialize)]
struct HistorySummary {
    record: &'static str,
    variant: VariantKind,
    best_epochs: Vec<Option<usize>>,
    stopped_early: Vec<bool>,
    valid_overall_auc: Option<f64>,
    valid_overall_logloss: Option<f64>,
    test_overall_auc: Option<f64>,
}

fn write_history(path: &Path, histories: &[TrainHistory], summary: &HistorySummary) -> Result<()> {
    let ensemble = histories.len() > 1;
    let epochs = histories.iter().enumerate().flat_map(|(i, h)| {
        h.records.iter().map(move |epoch| HistoryLine {
            record: "epoch",
            member: ensemble.then_some(i),
            epoch,
        })
    });
    let mut w = create(path)?;
    let ctx = || format!("cannot write {}", path.display());
    let mut put = |line: String| w.write_all(line.as_bytes()).and_then(|_| w.write_all(b"\n")).map_err(io_err(ctx()));
    for line in epochs {
        put(serde_json::to_string(&line).expect("history lines serialise"))?;
    }
    put(serde_json::to_string(summary).expect("summary serialises"))?;
    w.flush().map_err(io_err(ctx()))
}

pub fn train(args: &ConfigArgs, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let splits = load_splits(&cfg)?;
    let outcome = run_variant(cfg.variant, cfg.dims, &cfg.train, &splits)?;
    let dir = out.join(cfg.run_name());
    create_dir(&dir)?;
    let config_path = dir.join("config.txt");
    fs::write(&config_path, cfg.render()).map_err(io_err(format!("cannot write {}", config_path.display())))?;

    let summary = HistorySummary {
        record: "summary",
        variant: outcome.kind,
        best_epochs: outcome.histories.iter().map(|h| h.best_epoch).collect(),
        stopped_early: outcome.histories.iter().map(|h| h.stopped_early).collect(),
        valid_overall_auc: outcome.valid.overall_auc,
        valid_overall_logloss: outcome.valid.overall_logloss,
        test_overall_auc: outcome.test.overall_auc,
    };
    write_history(&dir.join("history.jsonl"), &outcome.histories, &summary)?;
    write_jsonl(&dir.join("report.jsonl"), outcome.test.records(None))?;
    outcome.predictor.checkpoint().save(&dir.join("checkpoint.bin"))?;

    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"));
    println!("variant {}  seed {}", outcome.kind, cfg.train.seed);
    println!("valid overall AUC {}", fmt(outcome.valid.overall_auc));
    println!("test overall AUC {}", fmt(outcome.test.overall_auc));
    println!("{}", dir.display());
    Ok(())
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, split: &str, baseline: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = resolve(args)?;
    let predictor = load_checkpoint(checkpoint)?;
    let splits = load_splits(&cfg)?;
    check_compatible(predictor.space(), splits.space()).map_err(CliError::from)?;
    let ds = pick_split(&splits, split)?;
    let batch = cfg.train.batch_size;
    let report = evaluate(&predictor, ds, batch).map_err(ExperimentError::from)?;
    let base: Option<EvalReport> = match baseline {
        Some(path) => {
            let b = load_checkpoint(path)?;
            check_compatible(b.space(), splits.space())?;
            Some(evaluate(&b, ds, batch).map_err(ExperimentError::from)?)
        }
        None => None,
    };
    let records = report.records(base.as_ref());
    match out {
        Some(path) => write_jsonl(path, records),
        None => {
            for r in records {
                println!("{}", serde_json::to_string(&r).expect("records serialise"));
            }
            Ok(())
        }
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<VariantKind>> {
    names.iter().map(|n| n.trim().parse().map_err(CliError::Usage)).collect()
}

pub fn ablate(args: &ConfigArgs, out: &Path, seeds: &[u64], variants: Option<&[String]>) -> Result<()> {
    let cfg = resolve(args)?;
    let variants = match variants {
        Some(v) => parse_variants(v)?,
        None => cfg.ablate_variants.clone(),
    };
    if variants.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one variant and one seed".into()));
    }
    let splits = load_splits(&cfg)?;
    let table = experiment::ablate(&variants, cfg.dims, &cfg.train, &splits, seeds);
    let dir = out.join(format!("ablate-{}", cfg.hash()));
    create_dir(&dir)?;
    let rendered = table.render();
    fs::write(dir.join("table.txt"), &rendered).map_err(io_err("cannot write table.txt"))?;
    write_jsonl(&dir.join("table.jsonl"), &table.rows)?;
    print!("{rendered}");
    for row in &table.rows {
        for cell in &row.cells {
            if let Some(f) = &cell.failure {
                eprintln!("{} seed {}: {f}", row.variant, cell.seed);
            }
        }
    }
    println!("{}", dir.display());
    Ok(())
}

/// Cartesian product of `KEY=V1,V2` axes.
fn grid_points(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("grid axis '{axis}' must look like key=v1,v2")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::Usage(format!("grid axis '{axis}' has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.trim().to_string(), v.to_string()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

#[derive(Serialize)]
struct SweepLine {
    grid: Vec<(String, String)>,
    sweep: SeedSweepResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<SeedSweepResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<SweepComparison>,
}

pub fn sweep(args: &ConfigArgs, out: &Path, seeds: &[u64], grid: &[String]) -> Result<()> {
    let base = resolve(args)?;
    let points = grid_points(grid)?;
    let mut configs = Vec::new();
    for point in &points {
        let mut cfg = base.clone();
        for (k, v) in point {
            cfg.set(k, v)?;
        }
        configs.push(cfg);
    }
    let mut lines = Vec::new();
    for (point, cfg) in points.into_iter().zip(&configs) {
        let splits = load_splits(cfg)?;
        let sweep = seed_sweep(cfg.variant, cfg.dims, &cfg.train, &splits, seeds)?;
        let baseline = match cfg.compare {
            Some(kind) => Some(seed_sweep(kind, cfg.dims, &cfg.train, &splits, seeds)?),
            None => None,
        };
        let comparison = baseline.as_ref().map(|b| compare_sweeps(&sweep, b));
        let label: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let describe = |s: &SeedSweepResult| match s.overall_auc {
            Some(m) => format!("{} AUC {:.4} ± {:.4} (n={})", s.variant, m.mean, m.std, m.n),
            None => format!("{} AUC n/a", s.variant),
        };
        let mut text = format!("[{}] {}", label.join(" "), describe(&sweep));
        if let Some(b) = &baseline {
            text.push_str(&format!(" | {}", describe(b)));
        }
        if let Some(c) = &comparison {
            match &c.overall_auc {
                Ok(w) => text.push_str(&format!(" | welch {}", serde_json::to_string(w).expect("serialises"))),
                Err(e) => text.push_str(&format!(" | welch undefined: {e}")),
            }
        }
        println!("{text}");
        for run in sweep.runs.iter().chain(baseline.iter().flat_map(|b| &b.runs)) {
            if let Some(f) = &run.failure {
                eprintln!("seed {}: {f}", run.seed);
            }
        }
        lines.push(SweepLine {
            grid: point,
            sweep,
            baseline,
            comparison,
        });
    }
    let dir = out.join(format!("sweep-{}", base.hash()));
    create_dir(&dir)?;
    write_jsonl(&dir.join("sweep.jsonl"), &lines)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn synth(args: &ConfigArgs, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(seed) = seed {
        cfg.synth.seed = seed;
    }
    let ds = m3oe::data::generate_synthetic(&cfg.synth)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_cache_file(&ds, out)?;
    let total = ds.len() as f64;
    for (d, count) in ds.domain_counts().into_iter().enumerate() {
        let rates: Vec<String> = (0..ds.tasks())
            .map(|t| ds.label_rate(d, t).map_or_else(|| "n/a".into(), |r| format!("{r:.4}")))
            .collect();
        println!(
            "domain {d}: {count} samples ({:.1}%), label rates {}",
            100.0 * count as f64 / total,
            rates.join(" ")
        );
    }
    println!("{}", out.display());
    Ok(())
}

pub fn gradcheck(seed: u64, fault: Option<&str>) -> Result<()> {
    let fault = match fault {
        Some(name) => Some(
            Primitive::ALL
                .into_iter()
                .find(|p| p.name() == name)
                .ok_or_else(|| CliError::Usage(format!("unknown primitive '{name}'")))?,
        ),
        None => None,
    };
    let report = run_gradcheck(GradcheckOptions {
        seed,
        fault,
        ..GradcheckOptions::default()
    });
    for f in &report.families {
        println!(
            "{:<34} worst {:.3e}  threshold {:.0e}  {}",
            f.family,
            f.worst_rel_error,
            f.threshold,
            if f.passed { "pass" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(report.failing().into_iter().map(String::from).collect()))
    }
}

pub fn export_embeddings(args: &ConfigArgs, checkpoint: &Path, stage: &str, task: usize, split: &str, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let stage: Stage = stage.parse().map_err(CliError::Usage)?;
    let predictor = load_checkpoint(checkpoint)?;
    let model = predictor
        .as_model()
        .ok_or_else(|| CliError::Usage("the per-pair MLP baseline has no shared representations to export".into()))?;
    let splits = load_splits(&cfg)?;
    check_compatible(predictor.space(), splits.space())?;
    let ds = pick_split(&splits, split)?;
    let rows = export_rows(model, ds, stage, task, cfg.train.batch_size, create(out)?)?;
    println!("{rows} rows written to {}", out.display());
    Ok(())
}

pub fn prepare_movielens(raw: &Path, out: &Path) -> Result<()> {
    let counts = movielens::convert(raw, out, movielens::Recipe::default())?;
    let total: usize = counts.iter().sum();
    for (d, c) in counts.iter().enumerate() {
        println!("domain {d}: {c} rows ({:.2}%)", 100.0 * *c as f64 / total.max(1) as f64);
    }
    println!("{}", out.display());
    Ok(())
}
