use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Result, Sample};

/// Indices of one domain-homogeneous minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBatch {
    pub domain: usize,
    pub indices: Vec<usize>,
}

/// Splits a dataset into shuffled minibatches that never mix domains.
///
/// Each domain is shuffled and chunked on its own. The chunks of all domains
/// are then interleaved by relative position so that every domain is spread
/// evenly over the epoch. Every sample appears in exactly one batch.
pub fn domain_batches(ds: &Dataset, batch_size: usize, seed: u64) -> Result<std::vec::IntoIter<DomainBatch>> {
    if batch_size == 0 {
        return Err(DataError::InvalidBatchSize);
    }
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize, DomainBatch)> = Vec::new();
    for (domain, mut indices) in ds.indices_by_domain().into_iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = indices.chunks(batch_size).collect();
        let n = chunks.len() as f64;
        for (j, chunk) in chunks.into_iter().enumerate() {
            keyed.push((
                (j as f64 + 0.5) / n,
                domain,
                DomainBatch {
                    domain,
                    indices: chunk.to_vec(),
                },
            ));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, _, b)| b).collect::<Vec<_>>().into_iter())
}

/// A materialised minibatch laid out for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub domain: usize,
    /// Feature ids, one vector per field.
    pub features: Vec<Vec<usize>>,
    /// Labels as floats, one vector per task.
    pub labels: Vec<Vec<f32>>,
}

impl Batch {
    pub fn from_samples<'a>(domain: usize, fields: usize, tasks: usize, samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut features = vec![Vec::new(); fields];
        let mut labels = vec![Vec::new(); tasks];
        for s in samples {
            debug_assert_eq!(s.domain as usize, domain);
            for (f, &id) in s.features.iter().enumerate() {
                features[f].push(id as usize);
            }
            for (t, &y) in s.labels.iter().enumerate() {
                labels[t].push(y as f32);
            }
        }
        Self {
            domain,
            features,
            labels,
        }
    }

    pub fn gather(ds: &Dataset, batch: &DomainBatch) -> Self {
        Self::from_samples(
            batch.domain,
            ds.space().fields.len(),
            ds.tasks(),
            batch.indices.iter().map(|&i| &ds.samples()[i]),
        )
    }

    pub fn len(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_support::toy;

    #[test]
    fn batches_are_domain_pure_and_cover_every_sample_once() {
        let ds = toy(&[13, 7, 1], 2);
        let batches: Vec<_> = domain_batches(&ds, 4, 9).unwrap().collect();
        let mut seen = vec![0; ds.len()];
        for b in &batches {
            assert!(!b.indices.is_empty() && b.indices.len() <= 4);
            for &i in &b.indices {
                assert_eq!(ds.samples()[i].domain as usize, b.domain);
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batches.len(), 4 + 2 + 1);
    }

    #[test]
    fn batch_order_depends_on_seed_only() {
        let ds = toy(&[20, 20], 1);
        let a: Vec<_> = domain_batches(&ds, 3, 1).unwrap().collect();
        let b: Vec<_> = domain_batches(&ds, 3, 1).unwrap().collect();
        let c: Vec<_> = domain_batches(&ds, 3, 2).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        assert!(matches!(domain_batches(&toy(&[3], 1), 0, 0), Err(DataError::InvalidBatchSize)));
    }

    #[test]
    fn gather_lays_out_fields_and_tasks() {
        let ds = toy(&[5], 2);
        let b = Batch::gather(&ds, &DomainBatch { domain: 0, indices: vec![0, 3] });
        assert_eq!(b.len(), 2);
        assert_eq!(b.features[0], vec![0, 3]);
        assert_eq!(b.labels[0], vec![1.0, 1.0]);
        assert_eq!(b.labels[1], vec![0.0, 0.0]);
    }
}
