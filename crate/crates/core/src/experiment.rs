//! Experiment runners on top of the trainer, from a single variant run up to
//! ablation tables and multi-seed sweeps.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_interactions, read_cache_file, split_dataset, CsvSchema, DataError, Dataset, FeatureSpace, SplitRatios,
    SyntheticSpec,
};
use crate::metrics::{evaluate, mean_std, welch_test, EvalReport, MetricError, WelchOutcome};
use crate::model::{pairs, Model, ModelDims, ModelError};
use crate::trainer::{fit, fit_mlp_ensemble, LoadedPredictor, TrainConfig, TrainError, TrainHistory};
use crate::variants::{MlpEnsemble, VariantKind};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{what} mismatch: the model expects {expected}, the dataset has {found}")]
    Mismatch { what: String, expected: String, found: String },
    #[error("{0}")]
    Invalid(String),
}

impl ExperimentError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, ExperimentError::Train(e) if e.is_numerical())
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf, schema: CsvSchema },
    /// A binary dataset cache.
    Cache(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        Ok(match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Csv { path, schema } => load_interactions(path, schema)?.0,
            DataSource::Cache(path) => read_cache_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Self> {
        let (train, valid, test) = split_dataset(ds, ratios, seed)?;
        Ok(Self { train, valid, test })
    }

    pub fn load(source: &DataSource, ratios: SplitRatios, seed: u64) -> Result<Self> {
        Self::new(&source.load()?, ratios, seed)
    }

    pub fn space(&self) -> &FeatureSpace {
        self.train.space()
    }
}

/// Checks that a model built for `expected` can score data from `found`.
pub fn check_compatible(expected: &FeatureSpace, found: &FeatureSpace) -> Result<()> {
    let mismatch = |what: &str, e: String, f: String| {
        Err(ExperimentError::Mismatch {
            what: what.into(),
            expected: e,
            found: f,
        })
    };
    if expected.domains != found.domains {
        return mismatch("domain count", format!("D={}", expected.domains), format!("D={}", found.domains));
    }
    if expected.tasks != found.tasks {
        return mismatch("task count", format!("T={}", expected.tasks), format!("T={}", found.tasks));
    }
    let names = |s: &FeatureSpace| s.fields.iter().map(|f| f.name.clone()).collect::<Vec<_>>().join(",");
    if names(expected) != names(found) {
        return mismatch("feature fields", names(expected), names(found));
    }
    if expected.vocab_sizes() != found.vocab_sizes() {
        return mismatch(
            "vocabulary sizes",
            format!("{:?}", expected.vocab_sizes()),
            format!("{:?}", found.vocab_sizes()),
        );
    }
    Ok(())
}

/// An untrained predictor of the given kind.
pub fn initial_predictor(kind: VariantKind, space: &FeatureSpace, dims: ModelDims, seed: u64) -> Result<LoadedPredictor> {
    Ok(match kind {
        VariantKind::MlpSingle => LoadedPredictor::Ensemble(MlpEnsemble::build(space, dims, seed)?),
        kind => LoadedPredictor::Single(Box::new(Model::build(kind, space, dims, seed)?)),
    })
}

/// A trained variant with its histories and reports.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub kind: VariantKind,
    /// The best-validation parameters.
    pub predictor: LoadedPredictor,
    /// One history, or one per ensemble member in pair order.
    pub histories: Vec<TrainHistory>,
    pub valid: EvalReport,
    pub test: EvalReport,
}

/// Trains one variant on `splits.train` with early stopping on
/// `splits.valid`, then evaluates the best parameters on both held-out splits.
pub fn run_variant(kind: VariantKind, dims: ModelDims, cfg: &TrainConfig, splits: &Splits) -> Result<RunOutcome> {
    let (predictor, histories) = match initial_predictor(kind, splits.space(), dims, cfg.seed)? {
        LoadedPredictor::Ensemble(_) => {
            let out = fit_mlp_ensemble(dims, cfg, &splits.train, &splits.valid)?;
            (LoadedPredictor::Ensemble(out.ensemble), out.histories)
        }
        LoadedPredictor::Single(model) => {
            let out = fit(*model, cfg, &splits.train, &splits.valid)?;
            (LoadedPredictor::Single(Box::new(out.model)), vec![out.history])
        }
    };
    let valid = evaluate(&predictor, &splits.valid, cfg.batch_size)?;
    let test = evaluate(&predictor, &splits.test, cfg.batch_size)?;
    Ok(RunOutcome {
        kind,
        predictor,
        histories,
        valid,
        test,
    })
}

/// One variant trained under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    /// Validation overall AUC of the freshly initialised model.
    pub initial_valid_auc: Option<f64>,
    pub valid_auc: Option<f64>,
    pub test_auc: Option<f64>,
    /// Set when training or evaluation failed.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: VariantKind,
    /// Aligned with [`AblationTable::seeds`].
    pub cells: Vec<AblationCell>,
    /// Mean test overall AUC over the seeds that succeeded.
    pub mean_test_auc: Option<f64>,
    pub mean_valid_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: VariantKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Plain-text table: one row per variant, one column per seed, then the mean.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.4}", x));
        let mut out = format!("{:<18}", "variant");
        for s in &self.seeds {
            out.push_str(&format!(" {:>10}", format!("seed {s}")));
        }
        out.push_str(&format!(" {:>10}\n", "mean"));
        for row in &self.rows {
            out.push_str(&format!("{:<18}", row.variant.name()));
            for cell in &row.cells {
                let text = if cell.failure.is_some() { "FAILED".to_string() } else { fmt(cell.test_auc) };
                out.push_str(&format!(" {text:>10}"));
            }
            out.push_str(&format!(" {:>10}\n", fmt(row.mean_test_auc)));
        }
        out
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    mean_std(&present).map(|(m, _)| m)
}

/// Trains every variant under every seed on the same splits. A failing cell
/// is recorded and the table is still produced.
pub fn ablate(variants: &[VariantKind], dims: ModelDims, cfg: &TrainConfig, splits: &Splits, seeds: &[u64]) -> AblationTable {
    let rows = variants
        .iter()
        .map(|&variant| {
            let cells: Vec<AblationCell> = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig { seed, ..cfg.clone() };
                    let mut cell = AblationCell {
                        seed,
                        initial_valid_auc: None,
                        valid_auc: None,
                        test_auc: None,
                        failure: None,
                    };
                    let mut run = || -> Result<()> {
                        let init = initial_predictor(variant, splits.space(), dims, seed)?;
                        cell.initial_valid_auc = evaluate(&init, &splits.valid, cfg.batch_size)?.overall_auc;
                        let out = run_variant(variant, dims, &cfg, splits)?;
                        cell.valid_auc = out.valid.overall_auc;
                        cell.test_auc = out.test.overall_auc;
                        Ok(())
                    };
                    if let Err(e) = run() {
                        cell.failure = Some(e.to_string());
                    }
                    cell
                })
                .collect();
            AblationRow {
                variant,
                mean_test_auc: mean_of(cells.iter().map(|c| c.test_auc)),
                mean_valid_auc: mean_of(cells.iter().map(|c| c.valid_auc)),
                cells,
            }
        })
        .collect();
    AblationTable {
        seeds: seeds.to_vec(),
        rows,
    }
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Option<Self> {
        mean_std(values).map(|(mean, std)| Self { mean, std, n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweepResult {
    pub variant: VariantKind,
    pub runs: Vec<SeedRun>,
    pub overall_auc: Option<MetricSummary>,
    pub overall_logloss: Option<MetricSummary>,
    /// Per `(domain, task)` AUC summaries in pair order.
    pub pair_auc: Vec<Option<MetricSummary>>,
}

impl SeedSweepResult {
    /// Builds the summary from per-seed reports (`None` marks a failed seed).
    pub fn from_runs(variant: VariantKind, runs: Vec<SeedRun>) -> Self {
        let reports: Vec<&EvalReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
        let collect = |f: &dyn Fn(&EvalReport) -> Option<f64>| reports.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
        let pair_auc = reports
            .first()
            .map(|first| {
                first
                    .pairs
                    .iter()
                    .map(|p| MetricSummary::of(&collect(&|r| r.pair(p.domain, p.task).and_then(|q| q.auc))))
                    .collect()
            })
            .unwrap_or_default();
        Self {
            variant,
            overall_auc: MetricSummary::of(&collect(&|r| r.overall_auc)),
            overall_logloss: MetricSummary::of(&collect(&|r| r.overall_logloss)),
            pair_auc,
            runs,
        }
    }

    pub fn overall_aucs(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.report.as_ref()?.overall_auc).collect()
    }

    pub fn overall_loglosses(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.report.as_ref()?.overall_logloss).collect()
    }
}

/// Two-sided Welch tests of one sweep against another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepComparison {
    pub variant: VariantKind,
    pub baseline: VariantKind,
    pub overall_auc: Result<WelchOutcome, String>,
    pub overall_logloss: Result<WelchOutcome, String>,
}

pub fn compare_sweeps(a: &SeedSweepResult, b: &SeedSweepResult) -> SweepComparison {
    let test = |x: Vec<f64>, y: Vec<f64>| welch_test(&x, &y).map_err(|e| e.to_string());
    SweepComparison {
        variant: a.variant,
        baseline: b.variant,
        overall_auc: test(a.overall_aucs(), b.overall_aucs()),
        overall_logloss: test(a.overall_loglosses(), b.overall_loglosses()),
    }
}

/// Trains and tests `kind` once per seed on the same splits.
pub fn seed_sweep(kind: VariantKind, dims: ModelDims, cfg: &TrainConfig, splits: &Splits, seeds: &[u64]) -> Result<SeedSweepResult> {
    if seeds.len() < 2 {
        return Err(ExperimentError::Invalid(format!("a seed sweep needs at least 2 seeds, got {}", seeds.len())));
    }
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            match run_variant(kind, dims, &cfg, splits) {
                Ok(out) => SeedRun {
                    seed,
                    report: Some(out.test),
                    failure: None,
                },
                Err(e) => SeedRun {
                    seed,
                    report: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SeedSweepResult::from_runs(kind, runs))
}

/// Pair labels `"d{d}t{t}"` (one-based) in pair order.
pub fn pair_labels(space: &FeatureSpace) -> Vec<String> {
    pairs(space.domains, space.tasks).map(|(d, t)| format!("d{}t{}", d + 1, t + 1)).collect()
}
