//! Learnable embedding tables for the categorical input fields.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::data::FeatureSpace;
use crate::params::{BoundParams, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EMBEDDING_DIM: usize = 16;

/// One `[vocab, dim]` table per feature field, shared by all domains and tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub dim: usize,
    pub tables: Vec<ParamId>,
}

impl EmbeddingTables {
    /// Registers the tables, drawing values uniformly from `±1/sqrt(dim)`.
    pub fn register(store: &mut ParamStore<f32>, space: &FeatureSpace, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let tables = space
            .fields
            .iter()
            .map(|f| {
                let rows = f.vocab_size as usize;
                let values = (0..rows * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
                store.add(
                    format!("embedding.{}", f.name),
                    ParamGroup::Model,
                    Tensor::new(vec![rows, dim], values).expect("positive dims"),
                )
            })
            .collect();
        Self { dim, tables }
    }

    pub fn output_width(&self) -> usize {
        self.tables.len() * self.dim
    }

    /// `[batch, F * dim]`: each sample's looked-up rows concatenated in field order.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, params: &BoundParams, features: &[Vec<usize>]) -> Result<Var, AutodiffError> {
        embed_batch(g, &self.tables.iter().map(|&id| params.var(id)).collect::<Vec<_>>(), features)
    }
}

/// Looks up `features[f]` in `tables[f]` and concatenates the results.
pub fn embed_batch<T: Real>(g: &mut Graph<T>, tables: &[Var], features: &[Vec<usize>]) -> Result<Var, AutodiffError> {
    if tables.len() != features.len() {
        return Err(AutodiffError::ShapeMismatch {
            primitive: crate::autodiff::Primitive::Gather,
            shapes: vec![vec![tables.len()], vec![features.len()]],
        });
    }
    let parts = tables
        .iter()
        .zip(features)
        .map(|(&table, ids)| g.gather(table, ids))
        .collect::<Result<Vec<_>, _>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize) -> (ParamStore<f32>, EmbeddingTables) {
        let space = FeatureSpace::new(vec![FieldSpec::new("user", 5), FieldSpec::new("item", 4)], 1, 1).unwrap();
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::register(&mut store, &space, dim, &mut ChaCha8Rng::seed_from_u64(0));
        (store, tables)
    }

    #[test]
    fn one_sample_two_fields_concatenates() {
        let (store, tables) = setup(16);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let out = tables.embed(&mut g, &bound, &[vec![2], vec![3]]).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 32]);
        assert_eq!(&g.value(out).data()[..16], store.get(tables.tables[0]).row(2));
        assert_eq!(&g.value(out).data()[16..], store.get(tables.tables[1]).row(3));
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let (mut store, tables) = setup(4);
        for &id in &tables.tables {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let out = tables.embed(&mut g, &bound, &[vec![0, 4], vec![1, 3]]).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_bound() {
        let (store, tables) = setup(16);
        for &id in &tables.tables {
            assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.25));
        }
    }

    #[test]
    fn only_touched_rows_receive_gradient() {
        let (store, tables) = setup(3);
        let store = store.cast::<f64>();
        let mut g = Graph::<f64>::new();
        let bound = store.bind(&mut g);
        // Row 1 of the user table is used twice, row 4 once, the rest never.
        let features = vec![vec![1, 4, 1], vec![0, 0, 2]];
        let x = tables.embed(&mut g, &bound, &features).unwrap();
        let weights = g.constant(Tensor::new(vec![3, 6], (0..18).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap());
        let prod = g.mul(x, weights).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let user = grads.get(bound.var(tables.tables[0])).unwrap();
        let upstream = |sample: usize, col: usize| sample as f64 * 0.6 + col as f64 * 0.1 - 0.7;
        for c in 0..3 {
            assert!((user.row(4)[c] - upstream(1, c)).abs() < 1e-12);
            assert!((user.row(1)[c] - upstream(0, c) - upstream(2, c)).abs() < 1e-12);
            for untouched in [0, 2, 3] {
                assert_eq!(user.row(untouched)[c], 0.0);
            }
        }
    }

    #[test]
    fn out_of_bounds_id_is_an_error() {
        let (store, tables) = setup(2);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        assert!(matches!(
            tables.embed(&mut g, &bound, &[vec![5], vec![0]]),
            Err(AutodiffError::IndexOutOfBounds { index: 5, bound: 5, .. })
        ));
    }
}
