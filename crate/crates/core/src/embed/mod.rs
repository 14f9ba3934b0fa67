//! Embedding vectors, cosine similarity, embedders and exact vector search.

mod index;
mod remote;

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::text;

pub use index::{build_index, Hit, VectorIndex};
pub use remote::{remote_embed, RemoteEmbedder};

/// Characters of a document fed to the embedder by default.
pub const DEFAULT_MAX_CHARS: usize = 8192;

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding vector is empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding entry {i} is not finite")));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine from precomputed squared norms. `sqrt(a*a) == a` exactly in IEEE
/// arithmetic, so a vector compared with itself scores exactly 1.
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, sq_norm_u: f64, sq_norm_v: f64) -> f64 {
    (dot / (sq_norm_u * sq_norm_v).sqrt()).clamp(-1.0, 1.0)
}

/// `dot(u,v) / (|u| |v|)`, clamped to [-1, 1].
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = dot(u, u);
    let nv = dot(v, v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_from_parts(dot(u, v), nu, nv))
}

/// Maps text to a fixed-dimension vector. Implementations are deterministic.
pub trait Embedder: Send + Sync {
    /// Stamped into reports; embeddings from different identities are not comparable.
    fn identity(&self) -> String;

    /// `None` until a remote service has declared it.
    fn dimension(&self) -> Option<usize>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed_batch(&[text])?
            .pop()
            .ok_or_else(|| Error::Protocol("embedder returned no vector".into()))
    }

    /// Texts per `embed_batch` call the caller should aim for.
    fn preferred_batch(&self) -> usize {
        256
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }
    fn preferred_batch(&self) -> usize {
        (**self).preferred_batch()
    }
}

/// Signed buckets each feature is spread over.
const HASH_PROBES: usize = 4;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Signed feature hashing of case-folded word unigrams and bigrams, L2-normalized.
/// Each feature lands in several buckets, so one collision between short
/// texts moves the similarity by a fraction instead of a whole unit.
///
/// Text without any alphanumeric word hashes its trimmed form as one feature.
pub fn hash_embed(text: &str, dimension: usize) -> Result<EmbeddingVector> {
    if dimension < 8 {
        return Err(Error::invalid(format!(
            "hash embedding dimension must be at least 8, got {dimension}"
        )));
    }
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::invalid("cannot embed empty text"));
    }
    let mut values = vec![0.0f64; dimension];
    let mut add = |feature: &[u8]| {
        let mut h = text::fnv1a(feature);
        for _ in 0..HASH_PROBES {
            h = splitmix64(h);
            let bucket = (h % dimension as u64) as usize;
            values[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
    };
    let words: Vec<String> = text::words(trimmed).collect();
    let mut feature = Vec::with_capacity(64);
    if words.is_empty() {
        feature.extend_from_slice(b"r:");
        feature.extend_from_slice(trimmed.as_bytes());
        add(&feature);
    }
    for (i, word) in words.iter().enumerate() {
        feature.clear();
        feature.extend_from_slice(b"u:");
        feature.extend_from_slice(word.as_bytes());
        add(&feature);
        if let Some(next) = words.get(i + 1) {
            feature.clear();
            feature.extend_from_slice(b"b:");
            feature.extend_from_slice(word.as_bytes());
            feature.push(b' ');
            feature.extend_from_slice(next.as_bytes());
            add(&feature);
        }
    }
    let norm = dot(&values, &values).sqrt();
    if norm == 0.0 {
        // every feature cancelled out; fall back to the raw text feature
        values[(text::fnv1a(trimmed.as_bytes()) % dimension as u64) as usize] = 1.0;
    } else {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    EmbeddingVector::new(values)
}

/// Offline, dependency-free embedder backed by [`hash_embed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dimension: usize) -> Result<Self> {
        if dimension < 8 {
            return Err(Error::invalid(format!(
                "hash embedding dimension must be at least 8, got {dimension}"
            )));
        }
        Ok(HashEmbedder { dimension })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            dimension: Self::DEFAULT_DIMENSION,
        }
    }
}

impl Embedder for HashEmbedder {
    fn identity(&self) -> String {
        format!("hash-unigram-bigram/{}", self.dimension)
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.par_iter().map(|t| hash_embed(t, self.dimension)).collect()
    }

    fn preferred_batch(&self) -> usize {
        4096
    }
}

/// Which embedder to construct; parsed from configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedderSpec {
    Hash { dimension: usize },
    Remote { endpoint: String, model: String },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hash {
            dimension: HashEmbedder::DEFAULT_DIMENSION,
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::Hash { dimension } => write!(f, "hash/{dimension}"),
            EmbedderSpec::Remote { endpoint, model } => write!(f, "remote {model} at {endpoint}"),
        }
    }
}

impl EmbedderSpec {
    pub fn build(&self, retry: crate::http::RetryPolicy) -> Result<Arc<dyn Embedder>> {
        Ok(match self {
            EmbedderSpec::Hash { dimension } => Arc::new(HashEmbedder::new(*dimension)?),
            EmbedderSpec::Remote { endpoint, model } => {
                Arc::new(RemoteEmbedder::new(endpoint.clone(), model.clone(), retry))
            }
        })
    }
}

/// Embeds texts in embedder-sized batches, truncating each to `max_chars`.
/// Returns the vectors and the number of truncated texts.
pub fn embed_all(embedder: &dyn Embedder, texts: &[&str], max_chars: usize) -> Result<(Vec<EmbeddingVector>, usize)> {
    let mut truncated = 0;
    let cut: Vec<&str> = texts
        .iter()
        .map(|t| {
            let (head, was_cut) = text::truncate_chars(t, max_chars);
            truncated += usize::from(was_cut);
            head
        })
        .collect();
    let mut out = Vec::with_capacity(texts.len());
    for chunk in cut.chunks(embedder.preferred_batch().max(1)) {
        let vectors = embedder.embed_batch(chunk)?;
        if vectors.len() != chunk.len() {
            return Err(Error::Protocol(format!(
                "embedder returned {} vectors for {} texts",
                vectors.len(),
                chunk.len()
            )));
        }
        out.extend(vectors);
    }
    Ok((out, truncated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    #[test]
    fn identical_vectors_score_one() {
        assert_eq!(cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_cosine() {
        // dot = 8, |u| = |v| = 3
        let s = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((s - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn non_finite_entries_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn hash_embed_is_deterministic_and_normalized() {
        let a = hash_embed("The SAG mill liner was replaced", 64).unwrap();
        let b = hash_embed("The SAG mill liner was replaced", 64).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!((hash_embed("!!!", 64).unwrap().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hash_embed_rejects_bad_input() {
        assert!(hash_embed("", 64).is_err());
        assert!(hash_embed("   ", 64).is_err());
        assert!(hash_embed("text", 7).is_err());
    }

    #[test]
    fn hash_embed_is_case_insensitive() {
        assert_eq!(hash_embed("Gold Ore", 32).unwrap(), hash_embed("gold ore", 32).unwrap());
    }

    /// Oracle for the disjoint-vocabulary bound: similarities of 1000 random
    /// pairs of 10-word texts drawn from disjoint halves of a synthetic vocabulary.
    fn disjoint_similarities(seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> = (0..4000).map(|i| format!("w{i}x")).collect();
        let (left, right) = vocab.split_at(2000);
        (0..1000)
            .map(|_| {
                let a: Vec<&str> = left.choose_multiple(&mut rng, 10).map(String::as_str).collect();
                let b: Vec<&str> = right.choose_multiple(&mut rng, 10).map(String::as_str).collect();
                cosine_similarity(
                    hash_embed(&a.join(" "), 256).unwrap().as_slice(),
                    hash_embed(&b.join(" "), 256).unwrap().as_slice(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn word_disjoint_texts_are_nearly_orthogonal() {
        for seed in 0..5 {
            let sims = disjoint_similarities(seed);
            let over = sims.iter().filter(|s| s.abs() >= 0.2).count();
            let mean_abs = sims.iter().map(|s| s.abs()).sum::<f64>() / sims.len() as f64;
            assert!(over <= 5, "seed {seed}: {over} of 1000 pairs at |sim| >= 0.2");
            assert!(mean_abs < 0.06, "seed {seed}: mean |sim| {mean_abs}");
        }
        let s = cosine_similarity(
            hash_embed("the primary crusher feeds a conveyor belt to the mill", 256)
                .unwrap()
                .as_slice(),
            hash_embed("quarterly revenue grew across retail stores in europe", 256)
                .unwrap()
                .as_slice(),
        )
        .unwrap();
        assert!(s.abs() < 0.2, "{s}");
    }

    #[test]
    fn hash_embedder_batch_matches_single() {
        let e = HashEmbedder::new(32).unwrap();
        let batch = e.embed_batch(&["a b", "c d"]).unwrap();
        assert_eq!(batch[1], e.embed("c d").unwrap());
        assert_eq!(e.dimension(), Some(32));
    }

    #[test]
    fn embed_all_truncates_and_counts() {
        let e = HashEmbedder::new(32).unwrap();
        let long = "alpha beta ".repeat(100);
        let (v, cut) = embed_all(&e, &[long.as_str(), "short"], 20).unwrap();
        assert_eq!(cut, 1);
        assert_eq!(v[0], hash_embed(&long[..20], 32).unwrap());
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 6),
            v in prop::collection::vec(-10.0f64..10.0, 6),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(dot(&u, &u) > 1e-6 && dot(&v, &v) > 1e-6);
            let s = cosine_similarity(&u, &v).unwrap();
            prop_assert!((s - cosine_similarity(&v, &u).unwrap()).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            prop_assert!((s - cosine_similarity(&su, &sv).unwrap()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
