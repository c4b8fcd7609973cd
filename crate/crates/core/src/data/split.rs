use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Result, Split};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const EIGHT_ONE_ONE: SplitRatios = SplitRatios {
        train: 0.8,
        valid: 0.1,
        test: 0.1,
    };

    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        let r = Self { train, valid, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(DataError::InvalidRatios(format!("{parts:?} must all be positive")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidRatios(format!("{parts:?} must sum to 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::EIGHT_ONE_ONE
    }
}

/// Position of a label pattern in the reflected Gray sequence, so that
/// neighbouring groups differ in a single task label.
fn gray_rank(labels: &[u8]) -> u64 {
    let g = labels.iter().fold(0u64, |acc, &y| (acc << 1) | y as u64);
    let mut n = g;
    let mut shift = g >> 1;
    while shift != 0 {
        n ^= shift;
        shift >>= 1;
    }
    n
}

/// Stratified train/valid/test partition.
///
/// Within each domain the samples are shuffled, grouped by label pattern,
/// and dealt to the splits by largest remaining quota. Every prefix of the
/// dealt sequence then stays within one sample of the target proportions,
/// which keeps both domain sizes and label rates close to the ratios. Each
/// output keeps the input's row order.
pub fn split_dataset(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    ratios.validate()?;
    let r = ratios.as_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (domain, mut indices) in ds.indices_by_domain().into_iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 3 {
            return Err(DataError::DomainTooSmall {
                domain,
                count: indices.len(),
            });
        }
        indices.shuffle(&mut rng);
        indices.sort_by_key(|&i| gray_rank(&ds.samples()[i].labels));
        let mut dealt: [Vec<usize>; 3] = Default::default();
        for (k, &i) in indices.iter().enumerate() {
            let target = (k + 1) as f64;
            let s = (0..3)
                .max_by(|&a, &b| {
                    let da = target * r[a] - dealt[a].len() as f64;
                    let db = target * r[b] - dealt[b].len() as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("three splits");
            dealt[s].push(i);
        }
        for s in 0..3 {
            if dealt[s].is_empty() {
                let donor = (0..3).max_by_key(|&j| dealt[j].len()).expect("three splits");
                let moved = dealt[donor].pop().expect("donor holds at least two samples");
                dealt[s].push(moved);
            }
        }
        for (part, d) in parts.iter_mut().zip(dealt) {
            part.extend(d);
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    let [train, valid, test] = parts;
    Ok((
        ds.subset(&train, Split::Train),
        ds.subset(&valid, Split::Valid),
        ds.subset(&test, Split::Test),
    ))
}
