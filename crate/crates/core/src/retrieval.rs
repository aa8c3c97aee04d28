//! Exact cosine k-nearest-neighbor search over embedded labeled tasks.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{EmbeddingRequest, Embedder};
use crate::data::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::prompting::render_reference;

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: Vec<f64>,
    pub rendered_example: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub task_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
    dimension: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// Descending similarity, then ascending id.
fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.task_id.cmp(&b.task_id))
}

impl EmbeddingIndex {
    pub fn from_entries(entries: Vec<IndexEntry>) -> Result<Self> {
        let dimension = entries.first().map(|e| e.vector.len()).unwrap_or(0);
        if dimension == 0 {
            return Err(Error::Validation("index needs at least one non-empty vector".into()));
        }
        let mut seen = BTreeSet::new();
        let mut norms = Vec::with_capacity(entries.len());
        for entry in &entries {
            if entry.vector.len() != dimension {
                return Err(Error::Validation(format!(
                    "vector for {} has dimension {}, expected {dimension}",
                    entry.id,
                    entry.vector.len()
                )));
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::DuplicateId(vec![entry.id.clone()]));
            }
            let n = norm(&entry.vector);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Validation(format!(
                    "vector for {} has zero or non-finite norm",
                    entry.id
                )));
            }
            norms.push(n);
        }
        Ok(EmbeddingIndex {
            entries,
            norms,
            dimension,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn rendered(&self, id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.rendered_example.as_str())
    }

    /// Top `min(k, len)` entries by cosine similarity; ties go to the smaller id.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Precondition("k must be at least 1".into()));
        }
        if query.len() != self.dimension {
            return Err(Error::Validation(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dimension
            )));
        }
        let qn = norm(query);
        if !(qn > 0.0) {
            return Err(Error::Validation("query vector has zero norm".into()));
        }
        let mut scored: Vec<Neighbor> = self
            .entries
            .iter()
            .zip(&self.norms)
            .map(|(e, n)| Neighbor {
                task_id: e.id.clone(),
                similarity: (dot(query, &e.vector) / (qn * n)).clamp(-1.0, 1.0),
            })
            .collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_by(rank);
        Ok(scored)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("index entries serialize"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<IndexEntry>>>()?;
        EmbeddingIndex::from_entries(entries)
    }
}

/// Embed each labeled question and pair it with its rendered reference block.
pub fn build_index(
    labeled: &Dataset,
    embedder: &dyn Embedder,
    model: &str,
) -> Result<EmbeddingIndex> {
    if labeled.is_empty() {
        return Err(Error::Precondition("cannot index an empty labeled set".into()));
    }
    let rendered = labeled
        .iter()
        .map(render_reference)
        .collect::<Result<Vec<_>>>()?;
    let vectors = embedder.embed(&EmbeddingRequest {
        model: model.to_string(),
        texts: labeled.iter().map(|r| r.question.clone()).collect(),
    })?;
    let entries = labeled
        .iter()
        .zip(vectors)
        .zip(rendered)
        .map(|((record, vector), rendered_example)| IndexEntry {
            id: record.id.clone(),
            vector,
            rendered_example,
        })
        .collect();
    EmbeddingIndex::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, v: &[f64]) -> IndexEntry {
        IndexEntry {
            id: id.into(),
            vector: v.to_vec(),
            rendered_example: format!("ex {id}"),
        }
    }

    /// Exhaustive scan: score everything, full sort, cut.
    fn brute_force(entries: &[IndexEntry], q: &[f64], k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = entries
            .iter()
            .map(|e| {
                let d: f64 = e.vector.iter().zip(q).map(|(a, b)| a * b).sum();
                let na: f64 = e.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = q.iter().map(|b| b * b).sum::<f64>().sqrt();
                (e.id.clone(), d / (na * nb))
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<IndexEntry> {
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                entry(&format!("t{i:05}"), &v)
            })
            .collect()
    }

    #[test]
    fn self_query_ranks_first_with_unit_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries = random_index(&mut rng, 50, 8);
        let index = EmbeddingIndex::from_entries(entries.clone()).unwrap();
        let hits = index.knn(&entries[17].vector, 3).unwrap();
        assert_eq!(hits[0].task_id, "t00017");
        assert!((hits[0].similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_on_random_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let entries = random_index(&mut rng, 50, 6);
        let index = EmbeddingIndex::from_entries(entries.clone()).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got: Vec<String> = index.knn(&q, 3).unwrap().into_iter().map(|n| n.task_id).collect();
        let want: Vec<String> = brute_force(&entries, &q, 3).into_iter().map(|p| p.0).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn k_larger_than_index_returns_everything() {
        let index =
            EmbeddingIndex::from_entries(vec![entry("a", &[1.0, 0.0]), entry("b", &[0.0, 1.0])])
                .unwrap();
        assert_eq!(index.knn(&[1.0, 1.0], 5).unwrap().len(), 2);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let index = EmbeddingIndex::from_entries(vec![
            entry("c", &[1.0, 0.0]),
            entry("a", &[2.0, 0.0]),
            entry("b", &[0.5, 0.0]),
        ])
        .unwrap();
        let ids: Vec<_> = index
            .knn(&[1.0, 0.0], 2)
            .unwrap()
            .into_iter()
            .map(|n| n.task_id)
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EmbeddingIndex::from_entries(vec![entry("z", &[0.0, 0.0])]).is_err());
        assert!(
            EmbeddingIndex::from_entries(vec![entry("a", &[1.0]), entry("b", &[1.0, 2.0])])
                .is_err()
        );
        let index = EmbeddingIndex::from_entries(vec![entry("a", &[1.0, 0.0])]).unwrap();
        assert!(index.knn(&[1.0], 1).is_err());
        assert!(index.knn(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn persists_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labeled.index.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let index = EmbeddingIndex::from_entries(random_index(&mut rng, 10, 4)).unwrap();
        index.write_jsonl(&path).unwrap();
        assert_eq!(EmbeddingIndex::load_jsonl(&path).unwrap(), index);
    }

    proptest! {
        #[test]
        fn knn_equals_exhaustive_scan(seed in any::<u64>(), n in 1usize..300, dim in 1usize..12, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries = random_index(&mut rng, n, dim);
            prop_assume!(entries.iter().all(|e| norm(&e.vector) > 0.0));
            let index = EmbeddingIndex::from_entries(entries.clone()).unwrap();
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            prop_assume!(norm(&q) > 0.0);
            let got: Vec<String> = index.knn(&q, k).unwrap().into_iter().map(|n| n.task_id).collect();
            let want: Vec<String> = brute_force(&entries, &q, k).into_iter().map(|p| p.0).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn cosine_is_symmetric_and_self_is_one(a in prop::collection::vec(-10.0f64..10.0, 1..16), b in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            prop_assume!(norm(&a) > 1e-6);
            prop_assert!((cosine(&a, &a) - 1.0).abs() < 1e-9);
            let m = a.len().min(b.len());
            prop_assume!(norm(&b[..m]) > 1e-6 && norm(&a[..m]) > 1e-6);
            prop_assert!((cosine(&a[..m], &b[..m]) - cosine(&b[..m], &a[..m])).abs() < 1e-12);
        }
    }
}
