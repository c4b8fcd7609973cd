//! Ranking and calibration metrics, per-pair reports and significance tests.

use std::io::Write;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::PROB_CLAMP;
use crate::data::{Batch, Dataset, FeatureSpace, Split};
use crate::model::{Model, ModelError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("AUC is undefined without both positive and negative labels")]
    SingleClass,
    #[error("no samples")]
    Empty,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("relative improvement needs a baseline AUC above 0.5, got {0}")]
    BaselineAtOrBelowHalf(f64),
    #[error("at least two values per group are needed, got {0}")]
    TooFewValues(usize),
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Wins and ties are counted exactly in integers over a
/// sorted scan.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties) = (0u128, 0u128);
    let (mut neg_below, mut pos_total) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        wins += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        pos_total += pos;
        i = j;
    }
    if pos_total == 0 || neg_below == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((2 * wins + ties) as f64 / (2 * pos_total * neg_below) as f64)
}

/// Mean binary cross-entropy with scores clamped away from 0 and 1.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Relative AUC improvement in percent, normalised by the distance from 0.5.
pub fn rela_impr(auc_model: f64, auc_base: f64) -> Result<f64, MetricError> {
    if auc_base.is_nan() || auc_base <= 0.5 {
        return Err(MetricError::BaselineAtOrBelowHalf(auc_base));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// Anything that yields per-task probabilities for a domain-homogeneous batch.
pub trait Predictor: Sync {
    fn space(&self) -> &FeatureSpace;

    /// One probability column per task of the space.
    fn predict_batch(&self, batch: &Batch) -> Result<Vec<Vec<f32>>, ModelError>;
}

impl Predictor for Model {
    fn space(&self) -> &FeatureSpace {
        self.arch.space()
    }

    fn predict_batch(&self, batch: &Batch) -> Result<Vec<Vec<f32>>, ModelError> {
        if self.arch.output_tasks().len() != self.arch.space().tasks {
            return Err(ModelError::Incompatible(
                "a single-pair model does not predict every task; evaluate it through an ensemble".into(),
            ));
        }
        self.predict(batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub domain: usize,
    pub task: usize,
    pub n_samples: usize,
    /// `None` when the pair has a single label class (or no samples).
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub pairs: Vec<PairMetrics>,
    pub overall_auc: Option<f64>,
    pub overall_logloss: Option<f64>,
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub record: String,
    pub split: Split,
    pub domain: Option<usize>,
    pub task: Option<usize>,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rela_impr: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// Builds a report from per-pair metrics; overall values are the
    /// unweighted means of the present pairs.
    pub fn from_pairs(split: Split, pairs: Vec<PairMetrics>) -> Self {
        let overall_auc = mean(pairs.iter().filter_map(|p| p.auc));
        let overall_logloss = mean(pairs.iter().filter_map(|p| p.logloss));
        Self {
            split,
            pairs,
            overall_auc,
            overall_logloss,
        }
    }

    pub fn pair(&self, domain: usize, task: usize) -> Option<&PairMetrics> {
        self.pairs.iter().find(|p| p.domain == domain && p.task == task)
    }

    /// Report lines: one per pair, then the overall line. With a baseline,
    /// each line also carries the relative AUC improvement over it.
    pub fn records(&self, baseline: Option<&EvalReport>) -> Vec<ReportRecord> {
        let impr = |auc: Option<f64>, base: Option<f64>| match (auc, base) {
            (Some(m), Some(b)) => rela_impr(m, b).ok(),
            _ => None,
        };
        let mut out: Vec<ReportRecord> = self
            .pairs
            .iter()
            .map(|p| ReportRecord {
                record: "pair".into(),
                split: self.split,
                domain: Some(p.domain),
                task: Some(p.task),
                auc: p.auc,
                logloss: p.logloss,
                n_samples: p.n_samples,
                rela_impr: baseline.and_then(|b| impr(p.auc, b.pair(p.domain, p.task).and_then(|q| q.auc))),
            })
            .collect();
        out.push(ReportRecord {
            record: "overall".into(),
            split: self.split,
            domain: None,
            task: None,
            auc: self.overall_auc,
            logloss: self.overall_logloss,
            // Every sample appears once per task, so count the task-0 pairs.
            n_samples: self.pairs.iter().filter(|p| p.task == 0).map(|p| p.n_samples).sum(),
            rela_impr: baseline.and_then(|b| impr(self.overall_auc, b.overall_auc)),
        });
        out
    }

    pub fn write_jsonl<W: Write>(&self, baseline: Option<&EvalReport>, mut w: W) -> std::io::Result<()> {
        for r in self.records(baseline) {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

/// Thread pool for evaluation, sized by `MDMT_THREADS` when set.
fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("MDMT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("evaluation thread pool")
    })
}

/// Scores every sample of `ds` and computes per-pair metrics.
pub fn predict_dataset(predictor: &dyn Predictor, ds: &Dataset, batch_size: usize) -> Result<Vec<Vec<f32>>, ModelError> {
    let tasks = ds.tasks();
    let fields = ds.space().fields.len();
    let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (domain, idx) in ds.indices_by_domain().into_iter().enumerate() {
        for chunk in idx.chunks(batch_size.max(1)) {
            jobs.push((domain, chunk.to_vec()));
        }
    }
    let results: Vec<Result<Vec<Vec<f32>>, ModelError>> = eval_pool().install(|| {
        jobs.par_iter()
            .map(|(domain, idx)| {
                let batch = Batch::from_samples(*domain, fields, tasks, idx.iter().map(|&i| &ds.samples()[i]));
                predictor.predict_batch(&batch)
            })
            .collect()
    });
    let mut scores = vec![vec![0f32; ds.len()]; tasks];
    for ((_, idx), res) in jobs.iter().zip(results) {
        let cols = res?;
        for (t, col) in cols.iter().enumerate() {
            for (&i, &p) in idx.iter().zip(col) {
                scores[t][i] = p;
            }
        }
    }
    Ok(scores)
}

pub fn evaluate(predictor: &dyn Predictor, ds: &Dataset, batch_size: usize) -> Result<EvalReport, ModelError> {
    let scores = predict_dataset(predictor, ds, batch_size)?;
    Ok(report_from_scores(ds, &scores))
}

/// Per-pair metrics for given per-task scores over `ds`.
pub fn report_from_scores(ds: &Dataset, scores: &[Vec<f32>]) -> EvalReport {
    let by_domain = ds.indices_by_domain();
    let mut pairs = Vec::new();
    for (domain, idx) in by_domain.iter().enumerate() {
        for (task, col) in scores.iter().enumerate().take(ds.tasks()) {
            let s: Vec<f64> = idx.iter().map(|&i| col[i] as f64).collect();
            let y: Vec<u8> = idx.iter().map(|&i| ds.samples()[i].labels[task]).collect();
            pairs.push(PairMetrics {
                domain,
                task,
                n_samples: idx.len(),
                auc: auc(&s, &y).ok(),
                logloss: logloss(&s, &y).ok(),
            });
        }
    }
    EvalReport::from_pairs(ds.split(), pairs)
}

/// Sample mean and sample standard deviation (n - 1 denominator).
/// Offsets are taken from the first value, so identical inputs give exactly
/// that value and a zero deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let first = *values.first()?;
    let m = first + mean(values.iter().map(|v| v - first))?;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some((m, sd))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum WelchOutcome {
    Defined { t: f64, df: f64, p: f64 },
    /// Both groups have zero variance and equal means.
    Undefined,
}

/// Two-sided Welch (unequal-variance) t-test.
pub fn welch_test(a: &[f64], b: &[f64]) -> Result<WelchOutcome, MetricError> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(MetricError::TooFewValues(g.len()));
        }
    }
    let (ma, sa) = mean_std(a).expect("non-empty");
    let (mb, sb) = mean_std(b).expect("non-empty");
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        if ma == mb {
            return Ok(WelchOutcome::Undefined);
        }
        let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(WelchOutcome::Defined { t, df: f64::INFINITY, p: 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(WelchOutcome::Defined { t, df, p })
}
