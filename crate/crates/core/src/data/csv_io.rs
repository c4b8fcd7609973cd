//! Loading interaction logs from delimited text.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureSpace, FieldSpec, Result, Sample, Split};

/// Id every unseen categorical value maps to.
pub const UNKNOWN_ID: u32 = 0;

/// Which columns hold the domain, the task labels and the features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub domain: String,
    pub labels: Vec<String>,
    pub features: Vec<String>,
    pub delimiter: u8,
}

impl CsvSchema {
    pub fn new(domain: impl Into<String>, labels: Vec<String>, features: Vec<String>) -> Self {
        Self {
            domain: domain.into(),
            labels,
            features,
            delimiter: b',',
        }
    }
}

/// Value-to-id maps learned while loading. Reusing it keeps ids stable
/// across files.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    pub fields: Vec<HashMap<String, u32>>,
    /// Raw domain values; position is the domain id.
    pub domains: Vec<String>,
}

impl Vocabulary {
    pub fn domain_id(&self, raw: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == raw)
    }
}

pub fn load_interactions(path: &Path, schema: &CsvSchema) -> Result<(Dataset, Vocabulary)> {
    load_interactions_with(path, schema, None)
}

/// Loads a headered CSV. With `vocab`, feature values missing from it map to
/// [`UNKNOWN_ID`] and unknown domains are an error; without it a fresh
/// vocabulary is built (ids from 1 in order of first appearance, domains in
/// sorted order, numeric when every value is a number).
pub fn load_interactions_with(path: &Path, schema: &CsvSchema, vocab: Option<&Vocabulary>) -> Result<(Dataset, Vocabulary)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    let column = |name: &String| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))
    };
    let domain_col = column(&schema.domain)?;
    let label_cols = schema.labels.iter().map(column).collect::<Result<Vec<_>>>()?;
    let feature_cols = schema.features.iter().map(column).collect::<Result<Vec<_>>>()?;
    if label_cols.is_empty() {
        return Err(DataError::InvalidSpace("at least one label column is required".into()));
    }

    struct Row {
        line: u64,
        domain: String,
        features: Vec<String>,
        labels: Vec<u8>,
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |c: usize| {
            record.get(c).ok_or_else(|| DataError::Parse {
                line,
                message: format!("row has {} cells, expected at least {}", record.len(), c + 1),
            })
        };
        let mut labels = Vec::with_capacity(label_cols.len());
        for (&c, name) in label_cols.iter().zip(&schema.labels) {
            let raw = cell(c)?;
            labels.push(match raw {
                "0" => 0,
                "1" => 1,
                _ => {
                    return Err(DataError::LabelOutOfRange {
                        line,
                        column: name.clone(),
                        value: raw.to_string(),
                    })
                }
            });
        }
        rows.push(Row {
            line,
            domain: cell(domain_col)?.to_string(),
            features: feature_cols.iter().map(|&c| cell(c).map(str::to_string)).collect::<Result<_>>()?,
            labels,
        });
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let vocab = match vocab {
        Some(v) => {
            if v.fields.len() != feature_cols.len() {
                return Err(DataError::InvalidSpace(format!(
                    "vocabulary has {} fields but the schema names {}",
                    v.fields.len(),
                    feature_cols.len()
                )));
            }
            v.clone()
        }
        None => build_vocabulary(rows.iter().map(|r| (&r.domain, &r.features)), feature_cols.len()),
    };

    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let domain = vocab.domain_id(&row.domain).ok_or_else(|| DataError::Parse {
            line: row.line,
            message: format!("unknown domain '{}'", row.domain),
        })?;
        let features = row
            .features
            .iter()
            .zip(&vocab.fields)
            .map(|(v, map)| map.get(v).copied().unwrap_or(UNKNOWN_ID))
            .collect();
        samples.push(Sample {
            domain: domain as u16,
            features,
            labels: row.labels,
        });
    }
    let fields = schema
        .features
        .iter()
        .zip(&vocab.fields)
        .map(|(name, map)| FieldSpec::new(name.clone(), map.len() as u32 + 1))
        .collect();
    let space = FeatureSpace::new(fields, vocab.domains.len(), schema.labels.len())?;
    Ok((Dataset::new(space, samples, Split::Full)?, vocab))
}

fn build_vocabulary<'a>(rows: impl Iterator<Item = (&'a String, &'a Vec<String>)>, n_fields: usize) -> Vocabulary {
    let mut fields: Vec<HashMap<String, u32>> = vec![HashMap::new(); n_fields];
    let mut domains = BTreeSet::new();
    for (domain, values) in rows {
        domains.insert(domain.clone());
        for (map, v) in fields.iter_mut().zip(values) {
            let next = map.len() as u32 + 1;
            map.entry(v.clone()).or_insert(next);
        }
    }
    let mut domains: Vec<String> = domains.into_iter().collect();
    if domains.iter().all(|d| d.parse::<f64>().is_ok()) {
        domains.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    Vocabulary { fields, domains }
}

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        other => DataError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}
