//! Exact top-k retrieval by cosine similarity. Pools here are at most a
//! few thousand sentences, so exact search keeps the brute-force oracle
//! equivalence property exact; ties break by ascending sentence id.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

use super::embed::EmbeddingVector;

/// Cosine similarity accumulated in f64. Inputs are L2-normalized at
/// ingestion, but the norms are still divided out for exact symmetry.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            query_dim: a.dim,
            pool_id: b.provider_id.clone(),
            pool_dim: b.dim,
        });
    }
    if a.provider_id != b.provider_id {
        return Err(Error::ProviderMismatch {
            a: a.provider_id.clone(),
            b: b.provider_id.clone(),
        });
    }
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += (*x as f64) * (*y as f64);
        norm_a += (*x as f64) * (*x as f64);
        norm_b += (*y as f64) * (*y as f64);
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (norm_a.sqrt() * norm_b.sqrt()))
}

#[derive(Debug, PartialEq)]
struct Candidate {
    score: f64,
    id: String,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Orders by "goodness": higher score first, ties to the smaller id.
    // In a Reverse-wrapped heap the minimum under this order is evicted.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Top-min(k, |pool|) pool entries by cosine similarity, descending,
/// ties by ascending sentence id. Heap-based selection; the test oracle
/// is an independent full sort.
pub fn knn_retrieve(
    query: &EmbeddingVector,
    pool: &[(String, EmbeddingVector)],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for (id, vector) in pool {
        let score = cosine_similarity(query, vector)?;
        let candidate = Candidate {
            score,
            id: id.clone(),
        };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(candidate));
        } else if candidate > heap.peek().unwrap().0 {
            heap.pop();
            heap.push(std::cmp::Reverse(candidate));
        }
    }
    let mut out: Vec<(String, f64)> = heap
        .into_iter()
        .map(|std::cmp::Reverse(c)| (c.id, c.score))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vector(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "test").unwrap()
    }

    fn pool(vs: &[(&str, &[f32])]) -> Vec<(String, EmbeddingVector)> {
        vs.iter().map(|(id, v)| (id.to_string(), vector(v))).collect()
    }

    /// Independent oracle: full sort of all similarities with the same
    /// tie-break, then truncate.
    fn brute_force(
        query: &EmbeddingVector,
        pool: &[(String, EmbeddingVector)],
        k: usize,
    ) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = pool
            .iter()
            .map(|(id, v)| (id.clone(), cosine_similarity(query, v).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn identical_vector_ranks_first_with_unit_score() {
        let query = vector(&[0.6, 0.8]);
        let p = pool(&[("a", &[0.8, 0.6]), ("b", &[0.6, 0.8]), ("c", &[1.0, 0.0])]);
        let got = knn_retrieve(&query, &p, 3).unwrap();
        assert_eq!(got[0].0, "b");
        assert!((got[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_built_vectors_match_exhaustive_argsort() {
        let query = vector(&[1.0, 0.0]);
        let p = pool(&[("a", &[1.0, 1.0]), ("b", &[0.0, 1.0]), ("c", &[1.0, 0.2])]);
        let got = knn_retrieve(&query, &p, 2).unwrap();
        let want = brute_force(&query, &p, 2);
        assert_eq!(got, want);
        assert_eq!(got[0].0, "c");
        assert_eq!(got[1].0, "a");
    }

    #[test]
    fn k_larger_than_pool_returns_all() {
        let query = vector(&[1.0, 0.0]);
        let p = pool(&[
            ("a", &[1.0, 0.0]),
            ("b", &[0.0, 1.0]),
            ("c", &[1.0, 1.0]),
            ("d", &[0.5, 0.5]),
        ]);
        let got = knn_retrieve(&query, &p, 10).unwrap();
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn empty_pool_gives_empty_result() {
        let query = vector(&[1.0]);
        assert!(knn_retrieve(&query, &[], 3).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let query = vector(&[1.0, 0.0]);
        let p = pool(&[("a", &[1.0, 0.0, 0.0])]);
        assert!(matches!(
            knn_retrieve(&query, &p, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn equal_scores_break_ties_by_ascending_id() {
        let query = vector(&[1.0, 0.0]);
        // Identical vectors: identical scores.
        let p = pool(&[("z", &[2.0, 0.0]), ("a", &[1.0, 0.0]), ("m", &[3.0, 0.0])]);
        let got = knn_retrieve(&query, &p, 2).unwrap();
        assert_eq!(got[0].0, "a");
        assert_eq!(got[1].0, "m");
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-8i8..=8, dim).prop_map(|v| {
            let mut out: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
            if out.iter().all(|x| *x == 0.0) {
                out[0] = 1.0;
            }
            out
        })
    }

    proptest! {
        /// Heap selection equals the brute-force full sort, including
        /// tie-breaks (small integer coordinates force many exact ties).
        #[test]
        fn oracle_equivalence(
            (dim, query_values, pool_values, k) in (1usize..=16).prop_flat_map(|dim| (
                Just(dim),
                vec_strategy(dim),
                prop::collection::vec(vec_strategy(dim), 0..50),
                1usize..=12,
            ))
        ) {
            let query = vector(&query_values);
            let p: Vec<(String, EmbeddingVector)> = pool_values
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("s{i:03}"), vector(v)))
                .collect();
            let got = knn_retrieve(&query, &p, k).unwrap();
            let want = brute_force(&query, &p, k);
            prop_assert_eq!(got, want);
        }

        /// sim(a, b) == sim(b, a) to 1e-9.
        #[test]
        fn cosine_symmetry(
            (a, b) in (1usize..=16).prop_flat_map(|dim| (vec_strategy(dim), vec_strategy(dim)))
        ) {
            let va = vector(&a);
            let vb = vector(&b);
            let ab = cosine_similarity(&va, &vb).unwrap();
            let ba = cosine_similarity(&vb, &va).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }
    }
}
