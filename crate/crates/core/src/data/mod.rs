//! Multi-domain multi-task interaction datasets.
//!
//! Every [`Sample`] belongs to exactly one domain and carries one binary label
//! per task. Categorical features are dense ids into per-field vocabularies
//! described by the [`FeatureSpace`].

mod batches;
mod cache;
mod csv_io;
pub mod movielens;
mod split;
mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use batches::{domain_batches, Batch, DomainBatch};
pub use cache::{read_cache, read_cache_file, write_cache, write_cache_file, CACHE_MAGIC};
pub use csv_io::{load_interactions, load_interactions_with, CsvSchema, Vocabulary, UNKNOWN_ID};
pub use split::{split_dataset, SplitRatios};
pub use synthetic::{generate_synthetic, generate_synthetic_with_model, PlantedModel, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("column '{0}' not found in header")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}, column '{column}': label '{value}' is not 0 or 1")]
    LabelOutOfRange {
        line: u64,
        column: String,
        value: String,
    },
    #[error("invalid feature space: {0}")]
    InvalidSpace(String),
    #[error("sample {index} does not conform to the feature space: {reason}")]
    SampleOutOfSpace { index: usize, reason: String },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("domain {domain} has {count} samples; at least 3 are needed to populate every split")]
    DomainTooSmall { domain: usize, count: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("dataset cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: u32,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, vocab_size: u32) -> Self {
        Self {
            name: name.into(),
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub fields: Vec<FieldSpec>,
    pub domains: usize,
    pub tasks: usize,
}

impl FeatureSpace {
    pub fn new(fields: Vec<FieldSpec>, domains: usize, tasks: usize) -> Result<Self> {
        let space = Self {
            fields,
            domains,
            tasks,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(DataError::InvalidSpace("at least one feature field is required".into()));
        }
        if let Some(f) = self.fields.iter().find(|f| f.vocab_size == 0) {
            return Err(DataError::InvalidSpace(format!("field '{}' has an empty vocabulary", f.name)));
        }
        if self.domains == 0 || self.domains > u16::MAX as usize + 1 {
            return Err(DataError::InvalidSpace(format!("domain count {} out of range", self.domains)));
        }
        if self.tasks == 0 {
            return Err(DataError::InvalidSpace("task count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(|f| f.vocab_size as usize).collect()
    }

    fn check(&self, index: usize, s: &Sample) -> Result<()> {
        let fail = |reason: String| Err(DataError::SampleOutOfSpace { index, reason });
        if s.domain as usize >= self.domains {
            return fail(format!("domain {} >= {}", s.domain, self.domains));
        }
        if s.features.len() != self.fields.len() {
            return fail(format!("{} feature ids for {} fields", s.features.len(), self.fields.len()));
        }
        for (id, field) in s.features.iter().zip(&self.fields) {
            if *id >= field.vocab_size {
                return fail(format!("id {id} outside vocabulary of '{}' ({})", field.name, field.vocab_size));
            }
        }
        if s.labels.len() != self.tasks {
            return fail(format!("{} labels for {} tasks", s.labels.len(), self.tasks));
        }
        if s.labels.iter().any(|&y| y > 1) {
            return fail("labels must be 0 or 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sample {
    pub domain: u16,
    pub features: Vec<u32>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Split::Full),
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train, valid, test or full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    space: FeatureSpace,
    samples: Vec<Sample>,
    split: Split,
}

impl Dataset {
    /// Builds a dataset, checking every sample against the feature space.
    pub fn new(space: FeatureSpace, samples: Vec<Sample>, split: Split) -> Result<Self> {
        space.validate()?;
        for (i, s) in samples.iter().enumerate() {
            space.check(i, s)?;
        }
        Ok(Self {
            space,
            samples,
            split,
        })
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domains(&self) -> usize {
        self.space.domains
    }

    pub fn tasks(&self) -> usize {
        self.space.tasks
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.space.domains];
        for s in &self.samples {
            counts[s.domain as usize] += 1;
        }
        counts
    }

    /// Sample indices grouped by domain, each in dataset order.
    pub fn indices_by_domain(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.space.domains];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.domain as usize].push(i);
        }
        groups
    }

    /// Positive rate of `task` among samples of `domain` (`None` if the domain is empty).
    pub fn label_rate(&self, domain: usize, task: usize) -> Option<f64> {
        let (mut n, mut pos) = (0usize, 0usize);
        for s in self.samples.iter().filter(|s| s.domain as usize == domain) {
            n += 1;
            pos += s.labels[task] as usize;
        }
        (n > 0).then(|| pos as f64 / n as f64)
    }

    /// New dataset over the given sample indices.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            space: self.space.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            split,
        }
    }

    /// Samples of one domain, in order.
    pub fn domain_slice(&self, domain: usize) -> Dataset {
        let idx: Vec<usize> = self.indices_by_domain().swap_remove(domain);
        self.subset(&idx, self.split)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_vocabulary_ids() {
        let space = FeatureSpace::new(vec![FieldSpec::new("user", 3)], 1, 1).unwrap();
        let bad = Sample {
            domain: 0,
            features: vec![3],
            labels: vec![1],
        };
        assert!(matches!(
            Dataset::new(space, vec![bad], Split::Full),
            Err(DataError::SampleOutOfSpace { index: 0, .. })
        ));
    }

    #[test]
    fn rejects_wrong_label_count_and_bad_domain() {
        let space = FeatureSpace::new(vec![FieldSpec::new("user", 3)], 2, 2).unwrap();
        for bad in [
            Sample { domain: 0, features: vec![0], labels: vec![1] },
            Sample { domain: 2, features: vec![0], labels: vec![1, 0] },
            Sample { domain: 0, features: vec![0], labels: vec![1, 2] },
        ] {
            assert!(Dataset::new(space.clone(), vec![bad], Split::Full).is_err());
        }
    }

    #[test]
    fn feature_space_invariants() {
        assert!(FeatureSpace::new(vec![FieldSpec::new("a", 0)], 1, 1).is_err());
        assert!(FeatureSpace::new(vec![FieldSpec::new("a", 1)], 0, 1).is_err());
        assert!(FeatureSpace::new(vec![FieldSpec::new("a", 1)], 1, 0).is_err());
        assert!(FeatureSpace::new(vec![], 1, 1).is_err());
    }
}
