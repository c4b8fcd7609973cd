//! Planted-model generator for multi-domain multi-task click data.
//!
//! Every categorical value owns a latent vector per domain, a normalised
//! convex mix of a vector shared by all domains and a domain-private one.
//! Every task owns a score head mixed the same way from a shared head and a
//! private head. A sample's logit combines a linear term (head against the
//! sum of its latent vectors) and a pairwise interaction term (head-weighted
//! products of latent vectors of two fields).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureSpace, FieldSpec, Result, Sample, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub fields: Vec<FieldSpec>,
    /// One entry per domain.
    pub samples_per_domain: Vec<usize>,
    pub latent_dim: usize,
    pub rho_domain: f64,
    pub rho_task: f64,
    pub noise: f64,
    /// Standard deviation of the planted logit, roughly.
    pub signal: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tasks: 2,
            fields: vec![
                FieldSpec::new("user", 400),
                FieldSpec::new("item", 300),
                FieldSpec::new("context", 12),
            ],
            samples_per_domain: vec![3000, 3000, 3000],
            latent_dim: 8,
            rho_domain: 0.6,
            rho_task: 0.6,
            noise: 0.05,
            signal: 3.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn domains(&self) -> usize {
        self.samples_per_domain.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSynthetic(m));
        for (name, rho) in [("rho_domain", self.rho_domain), ("rho_task", self.rho_task)] {
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("{name} = {rho} is outside [0, 1]"));
            }
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise rate {} is outside [0, 0.5)", self.noise));
        }
        if self.samples_per_domain.contains(&0) {
            return bad("every domain needs at least one sample".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if !self.signal.is_finite() || self.signal < 0.0 {
            return bad(format!("signal {} must be finite and non-negative", self.signal));
        }
        FeatureSpace::new(self.fields.clone(), self.domains(), self.tasks)?;
        Ok(())
    }
}

/// The ground-truth scoring function behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedModel {
    latent_dim: usize,
    signal: f64,
    /// `factors[f][d]` holds `vocab * latent_dim` values.
    factors: Vec<Vec<Vec<f64>>>,
    /// One head per task.
    heads: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn mix(shared: &[f64], private: &[f64], rho: f64) -> Vec<f64> {
    let norm = (rho * rho + (1.0 - rho) * (1.0 - rho)).sqrt();
    shared
        .iter()
        .zip(private)
        .map(|(s, p)| (rho * s + (1.0 - rho) * p) / norm)
        .collect()
}

impl PlantedModel {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.latent_dim;
        let factors = spec
            .fields
            .iter()
            .map(|f| {
                let n = f.vocab_size as usize * k;
                let shared = normal_vec(rng, n);
                (0..spec.domains())
                    .map(|_| mix(&shared, &normal_vec(rng, n), spec.rho_domain))
                    .collect()
            })
            .collect();
        let shared_head = normal_vec(rng, k);
        let heads = (0..spec.tasks)
            .map(|_| mix(&shared_head, &normal_vec(rng, k), spec.rho_task))
            .collect();
        Self {
            latent_dim: k,
            signal: spec.signal,
            factors,
            heads,
        }
    }

    fn latent(&self, field: usize, domain: usize, id: u32) -> &[f64] {
        let k = self.latent_dim;
        let start = id as usize * k;
        &self.factors[field][domain][start..start + k]
    }

    /// Planted logit of a sample in `domain` for `task`.
    pub fn logit(&self, domain: usize, task: usize, features: &[u32]) -> f64 {
        let k = self.latent_dim as f64;
        let head = &self.heads[task];
        let vecs: Vec<&[f64]> = features
            .iter()
            .enumerate()
            .map(|(f, &id)| self.latent(f, domain, id))
            .collect();
        let linear: f64 = vecs
            .iter()
            .map(|v| v.iter().zip(head).map(|(a, h)| a * h).sum::<f64>())
            .sum::<f64>()
            / (vecs.len() as f64 * k).sqrt();
        let mut pairs = 0usize;
        let mut inter = 0.0;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                pairs += 1;
                inter += (0..self.latent_dim)
                    .map(|c| head[c] * vecs[i][c] * vecs[j][c])
                    .sum::<f64>();
            }
        }
        let score = if pairs == 0 {
            linear
        } else {
            (linear + inter / (pairs as f64 * k).sqrt()) / std::f64::consts::SQRT_2
        };
        self.signal * score
    }

    pub fn probability(&self, domain: usize, task: usize, features: &[u32]) -> f64 {
        1.0 / (1.0 + (-self.logit(domain, task, features)).exp())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_with_model(spec).map(|(ds, _)| ds)
}

/// Generates a dataset and returns the planted model that labelled it.
pub fn generate_synthetic_with_model(spec: &SyntheticSpec) -> Result<(Dataset, PlantedModel)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = PlantedModel::sample(spec, &mut rng);
    let mut samples = Vec::with_capacity(spec.samples_per_domain.iter().sum());
    for (d, &count) in spec.samples_per_domain.iter().enumerate() {
        for _ in 0..count {
            let features: Vec<u32> = spec
                .fields
                .iter()
                .map(|f| rng.gen_range(0..f.vocab_size))
                .collect();
            let labels = (0..spec.tasks)
                .map(|t| {
                    let mut y = rng.gen::<f64>() < model.probability(d, t, &features);
                    if rng.gen::<f64>() < spec.noise {
                        y = !y;
                    }
                    y as u8
                })
                .collect();
            samples.push(Sample {
                domain: d as u16,
                features,
                labels,
            });
        }
    }
    rand::seq::SliceRandom::shuffle(samples.as_mut_slice(), &mut rng);
    let space = FeatureSpace::new(spec.fields.clone(), spec.domains(), spec.tasks)?;
    Ok((Dataset::new(space, samples, Split::Full)?, model))
}
