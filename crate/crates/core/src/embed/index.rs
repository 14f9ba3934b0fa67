use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cosine_from_parts, dot, EmbeddingVector};
use crate::error::{Error, Result};

/// A retrieval result: row position in the indexed dataset and its cosine score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub ref_index: usize,
    pub score: f64,
}

/// Exact cosine search over a fixed set of vectors.
///
/// Rows are stored contiguously with their squared norms; a query is a
/// linear scan. Scores are bit-identical to [`super::cosine_similarity`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    data: Vec<f64>,
    sq_norms: Vec<f64>,
}

impl VectorIndex {
    pub fn build(vectors: &[EmbeddingVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::invalid("cannot index zero vectors"))?;
        let dim = first.dim();
        let mut data = Vec::with_capacity(dim * vectors.len());
        let mut sq_norms = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            let n = dot(v.as_slice(), v.as_slice());
            if n == 0.0 {
                return Err(Error::invalid(format!("vector {i} is all zeros")));
            }
            data.extend_from_slice(v.as_slice());
            sq_norms.push(n);
        }
        Ok(VectorIndex { dim, data, sq_norms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sq_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sq_norms.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Copies the selected rows into a new index, renumbered from 0.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut sq_norms = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::invalid(format!("row {r} out of range")));
            }
            data.extend_from_slice(self.row(r));
            sq_norms.push(self.sq_norms[r]);
        }
        if sq_norms.is_empty() {
            return Err(Error::invalid("cannot index zero vectors"));
        }
        Ok(VectorIndex {
            dim: self.dim,
            data,
            sq_norms,
        })
    }

    fn check_query(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let n = dot(query, query);
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(n)
    }

    /// Cosine similarity of `query` against row `i`.
    pub fn score(&self, query: &[f64], i: usize) -> Result<f64> {
        let qn = self.check_query(query)?;
        Ok(cosine_from_parts(dot(query, self.row(i)), qn, self.sq_norms[i]))
    }

    /// Best match; ties go to the lowest row.
    pub fn top1(&self, query: &[f64]) -> Result<Hit> {
        let qn = self.check_query(query)?;
        let mut best = Hit {
            ref_index: 0,
            score: f64::NEG_INFINITY,
        };
        for (i, row) in self.rows().enumerate() {
            let s = cosine_from_parts(dot(query, row), qn, self.sq_norms[i]);
            if s > best.score {
                best = Hit { ref_index: i, score: s };
            }
        }
        Ok(best)
    }

    /// Best `k` matches by descending score, ties by ascending row.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        let qn = self.check_query(query)?;
        let mut hits: Vec<Hit> = self
            .rows()
            .enumerate()
            .map(|(i, row)| Hit {
                ref_index: i,
                score: cosine_from_parts(dot(query, row), qn, self.sq_norms[i]),
            })
            .collect();
        let order = |a: &Hit, b: &Hit| b.score.total_cmp(&a.score).then_with(|| a.ref_index.cmp(&b.ref_index));
        if k < hits.len() {
            hits.select_nth_unstable_by(k, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// [`Self::top1`] for many queries in parallel; results in query order.
    pub fn top1_batch(&self, queries: &[EmbeddingVector]) -> Result<Vec<Hit>> {
        queries.par_iter().map(|q| self.top1(q.as_slice())).collect()
    }
}

pub fn build_index(vectors: &[EmbeddingVector]) -> Result<VectorIndex> {
    VectorIndex::build(vectors)
}
