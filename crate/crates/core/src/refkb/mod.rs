//! Reference knowledge base: embedded in-domain texts, clustering,
//! 2-D projection for inspection, and nearest-neighbour deduplication.

mod kmeans;
mod pca;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{self, Dataset, Document, JsonlWriter};
use crate::embed::{self, Embedder, EmbeddingVector, VectorIndex};
use crate::error::{Error, Result};
use crate::meta::{self, Metadata};

pub use kmeans::{elbow_report, kmeans, ClusterModel};
pub use pca::{pca_project, PcaProjection};

const EMBEDDING_KEY: &str = "embedding";

/// Reference rows and the index over their embeddings; row i is index row i.
#[derive(Debug, Clone)]
pub struct ReferenceKB {
    rows: Dataset,
    index: VectorIndex,
    embedder: String,
}

impl ReferenceKB {
    pub fn new(rows: Dataset, index: VectorIndex, embedder: impl Into<String>) -> Result<Self> {
        if rows.len() != index.len() {
            return Err(Error::invalid(format!(
                "{} reference rows but {} vectors",
                rows.len(),
                index.len()
            )));
        }
        Ok(ReferenceKB {
            rows,
            index,
            embedder: embedder.into(),
        })
    }

    /// Embeds every row's text (first `max_chars` characters).
    pub fn build(rows: Dataset, embedder: &dyn Embedder, max_chars: usize) -> Result<Self> {
        let texts: Vec<&str> = rows.iter().map(|d| d.text.as_str()).collect();
        let (vectors, truncated) = embed::embed_all(embedder, &texts, max_chars)?;
        if truncated > 0 {
            log::info!("truncated {truncated} reference texts to {max_chars} characters");
        }
        let index = VectorIndex::build(&vectors)?;
        ReferenceKB::new(rows, index, embedder.identity())
    }

    pub fn rows(&self) -> &Dataset {
        &self.rows
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn embedder_identity(&self) -> &str {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps the listed rows, renumbering them from 0 in the given order.
    pub fn retain(&self, rows: &[usize]) -> Result<Self> {
        let docs = rows
            .iter()
            .map(|&r| {
                self.rows
                    .get(r)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("row {r} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        ReferenceKB::new(
            Dataset::new(docs, self.rows.provenance())?,
            self.index.select(rows)?,
            self.embedder.clone(),
        )
    }

    /// Writes rows as corpus JSONL with an extra `embedding` array, plus a
    /// metadata sidecar naming the embedder.
    pub fn save(&self, path: impl AsRef<Path>, mut metadata: Metadata) -> Result<()> {
        let path = path.as_ref();
        let mut writer = JsonlWriter::create(path)?;
        for (doc, vector) in self.rows.iter().zip(self.index.rows()) {
            let mut object = doc.to_json();
            object.insert(EMBEDDING_KEY.into(), serde_json::to_value(vector)?);
            writer.write_value(&object)?;
        }
        writer.flush()?;
        metadata.embedder = Some(self.embedder.clone());
        metadata.config.insert("dimension".into(), self.index.dim().to_string());
        meta::write_sidecar(path, &metadata)
    }

    /// Loads a reference KB. Stored embeddings are reused when they came from
    /// the same embedder; rows without embeddings are embedded now.
    pub fn load(path: impl AsRef<Path>, embedder: &dyn Embedder, max_chars: usize) -> Result<Self> {
        let path = path.as_ref();
        let dataset = corpus::read_jsonl(path)?;
        if dataset.is_empty() {
            return Err(Error::invalid(format!("{}: reference KB is empty", path.display())));
        }
        let provenance = dataset.provenance().to_owned();
        let mut docs = dataset.into_documents();
        let mut vectors = Vec::with_capacity(docs.len());
        for (line, doc) in docs.iter_mut().enumerate() {
            if let Some(value) = doc.extra.remove(EMBEDDING_KEY) {
                vectors.push(parse_embedding(value).map_err(|message| Error::Parse {
                    path: path.to_owned(),
                    line: line + 1,
                    message,
                })?);
            }
        }
        let rows = Dataset::new(docs, provenance)?;
        if vectors.is_empty() {
            return ReferenceKB::build(rows, embedder, max_chars);
        }
        if vectors.len() != rows.len() {
            return Err(Error::invalid(format!(
                "{}: only {} of {} rows carry embeddings",
                path.display(),
                vectors.len(),
                rows.len()
            )));
        }
        let stored = meta::read_sidecar(path)?.and_then(|m| m.embedder);
        let identity = embedder.identity();
        match stored {
            Some(stored) if stored != identity => {
                return Err(Error::invalid(format!(
                    "{}: embedded with {stored}, but the configured embedder is {identity}",
                    path.display()
                )))
            }
            None => log::warn!(
                "{}: no metadata sidecar; assuming embeddings came from {identity}",
                path.display()
            ),
            _ => {}
        }
        let index = VectorIndex::build(&vectors)?;
        if let Some(dim) = embedder.dimension() {
            if dim != index.dim() {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: index.dim(),
                });
            }
        }
        ReferenceKB::new(rows, index, identity)
    }
}

fn parse_embedding(value: Value) -> Result<EmbeddingVector, String> {
    let values: Vec<f64> = serde_json::from_value(value).map_err(|e| format!("bad \"embedding\": {e}"))?;
    EmbeddingVector::new(values).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub id: usize,
    /// Kept row it duplicates.
    pub nearest: usize,
    pub sim: f64,
}

/// Outcome of [`dedup_nn`]. `kept` and the removed ids partition the input rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub kept: Vec<usize>,
    pub removed: Vec<Removal>,
    pub reduction_percent: f64,
}

/// Greedy first-wins deduplication in row order.
///
/// Row i is removed when its cosine similarity to the nearest already-kept
/// row is at least `threshold`. The first row is always kept.
pub fn dedup_nn(kb: &ReferenceKB, threshold: f64) -> Result<DedupReport> {
    dedup_index(kb.index(), threshold)
}

pub fn dedup_index(index: &VectorIndex, threshold: f64) -> Result<DedupReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "dedup threshold must be in (0, 1], got {threshold}"
        )));
    }
    if index.is_empty() {
        return Err(Error::invalid("cannot deduplicate an empty reference KB"));
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut removed = Vec::new();
    for i in 0..index.len() {
        let query = index.row(i);
        let best = kept
            .par_iter()
            .map(|&k| (k, index.score(query, k).expect("rows share the index dimension")))
            .reduce_with(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
        match best {
            Some((nearest, sim)) if sim >= threshold => removed.push(Removal { id: i, nearest, sim }),
            _ => kept.push(i),
        }
    }
    let reduction_percent = 100.0 * removed.len() as f64 / index.len() as f64;
    Ok(DedupReport {
        kept,
        removed,
        reduction_percent,
    })
}

/// Histogram of each row's similarity to its nearest other row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    /// `bins + 1` edges spanning [-1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Nearest-neighbour similarity distribution, for choosing a dedup threshold.
pub fn nn_similarity_histogram(index: &VectorIndex, bins: usize) -> Result<SimilarityHistogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if index.len() < 2 {
        return Err(Error::invalid("histogram needs at least two rows"));
    }
    let best: Vec<f64> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let q = index.row(i);
            (0..index.len())
                .filter(|&j| j != i)
                .map(|j| index.score(q, j).expect("same dimension"))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|b| -1.0 + b as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for s in best {
        let b = (((s + 1.0) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(SimilarityHistogram { edges, counts })
}

/// Writes `x,y,cluster` rows for plotting.
pub fn cluster_viz_export(model: &ClusterModel, points: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if model.assignments.is_empty() {
        return Err(Error::invalid("cluster model has no points"));
    }
    if points.len() != model.assignments.len() {
        return Err(Error::invalid(format!(
            "{} points but {} assignments",
            points.len(),
            model.assignments.len()
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "x,y,cluster")?;
        for (p, c) in points.iter().zip(&model.assignments) {
            let x = p.first().copied().unwrap_or(0.0);
            let y = p.get(1).copied().unwrap_or(0.0);
            writeln!(out, "{x},{y},{c}")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`cluster_viz_export`].
pub fn read_cluster_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64, usize)>> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, "x,y,cluster")) => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: 1,
                message: "expected header x,y,cluster".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |message: String| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", fields.len())));
            }
            Ok((
                fields[0].parse().map_err(|e| bad(format!("x: {e}")))?,
                fields[1].parse().map_err(|e| bad(format!("y: {e}")))?,
                fields[2].parse().map_err(|e| bad(format!("cluster: {e}")))?,
            ))
        })
        .collect()
}

/// Builds a reference KB from plain vectors with synthetic rows. Handy for
/// callers that already hold embeddings.
pub fn kb_from_vectors(vectors: Vec<EmbeddingVector>, embedder: &str) -> Result<ReferenceKB> {
    let docs = (0..vectors.len())
        .map(|i| Document::new(i.to_string(), format!("row {i}"), "vectors", "reference"))
        .collect();
    ReferenceKB::new(Dataset::new(docs, "vectors")?, VectorIndex::build(&vectors)?, embedder)
}
