//! Two-stage corpus filter: keyword stage, similarity scoring against the
//! reference KB, then a similarity cutoff.
//!
//! Scoring adds two columns to each document: `max_similarity`, the cosine
//! score of its nearest reference row, and `ref_index`, that row's position.
//! Scored rows are appended to a partial file with a checkpoint every
//! `checkpoint_every` rows, so a run that dies on a flaky remote embedder
//! resumes where it stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, Document, JsonlReader, JsonlWriter};
use crate::embed::{self, Embedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::glossary::{self, KeywordMatcher};
use crate::http::RetryPolicy;
use crate::meta::{self, Metadata};
use crate::refkb::ReferenceKB;

pub const DEFAULT_CUTOFF: f64 = 0.65;
pub const DEFAULT_BATCH_SIZE: usize = 1_000_000;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 10_000;

const SIMILARITY_KEY: &str = "max_similarity";
const REF_INDEX_KEY: &str = "ref_index";

/// A document with its nearest reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDocument {
    pub document: Document,
    pub max_similarity: f64,
    pub ref_index: usize,
}

impl ScoredDocument {
    /// The document with `max_similarity` and `ref_index` appended as columns.
    pub fn to_document(&self) -> Document {
        let mut doc = self.document.clone();
        doc.extra
            .insert(SIMILARITY_KEY.into(), Value::from(self.max_similarity));
        doc.extra
            .insert(REF_INDEX_KEY.into(), Value::from(self.ref_index as u64));
        doc
    }

    /// Inverse of [`Self::to_document`].
    pub fn from_document(mut doc: Document) -> Result<Self> {
        let max_similarity = doc
            .extra
            .remove(SIMILARITY_KEY)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::invalid(format!("document {:?} lacks a numeric max_similarity", doc.id)))?;
        let ref_index = doc
            .extra
            .remove(REF_INDEX_KEY)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid(format!("document {:?} lacks an integer ref_index", doc.id)))?;
        Ok(ScoredDocument {
            document: doc,
            max_similarity,
            ref_index: ref_index as usize,
        })
    }
}

pub fn read_scored(path: impl AsRef<Path>) -> Result<Vec<ScoredDocument>> {
    JsonlReader::open(path)?
        .map(|d| d.and_then(ScoredDocument::from_document))
        .collect()
}

pub fn write_scored(scored: &[ScoredDocument], path: impl AsRef<Path>) -> Result<()> {
    let mut out = JsonlWriter::create(path)?;
    for s in scored {
        out.write_document(&s.to_document())?;
    }
    out.flush()
}

fn check_embedder(kb: &ReferenceKB, embedder: &dyn Embedder) -> Result<()> {
    if kb.is_empty() {
        return Err(Error::invalid("reference KB is empty"));
    }
    if kb.embedder_identity() != embedder.identity() {
        return Err(Error::invalid(format!(
            "reference KB was embedded with {}, documents would be embedded with {}",
            kb.embedder_identity(),
            embedder.identity()
        )));
    }
    Ok(())
}

/// Scores one slice of documents. Returns the scores and how many texts were truncated.
fn score_chunk(
    docs: &[Document],
    kb: &ReferenceKB,
    embedder: &dyn Embedder,
    max_chars: usize,
) -> Result<(Vec<ScoredDocument>, usize)> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let (vectors, truncated) = embed::embed_all(embedder, &texts, max_chars)?;
    let hits = kb.index().top1_batch(&vectors)?;
    let scored = docs
        .iter()
        .zip(hits)
        .map(|(doc, hit)| ScoredDocument {
            document: doc.clone(),
            max_similarity: hit.score,
            ref_index: hit.ref_index,
        })
        .collect();
    Ok((scored, truncated))
}

/// Scores every document against the reference KB, preserving order.
pub fn run_similarity_stage(
    docs: &[Document],
    kb: &ReferenceKB,
    embedder: &dyn Embedder,
    max_chars: usize,
) -> Result<Vec<ScoredDocument>> {
    check_embedder(kb, embedder)?;
    let mut scored = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(DEFAULT_CHECKPOINT_EVERY) {
        let (part, _) = score_chunk(chunk, kb, embedder, max_chars).map_err(|e| Error::Stage {
            stage: "similarity",
            completed: scored.len(),
            source: Box::new(e),
        })?;
        scored.extend(part);
    }
    Ok(scored)
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if cutoff > 0.0 && cutoff < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("cutoff must be in (0, 1), got {cutoff}")))
    }
}

/// Documents with `max_similarity >= cutoff`, in order, carrying their score columns.
pub fn apply_cutoff(scored: &[ScoredDocument], cutoff: f64) -> Result<Dataset> {
    check_cutoff(cutoff)?;
    let kept = scored
        .iter()
        .filter(|s| s.max_similarity >= cutoff)
        .map(ScoredDocument::to_document)
        .collect();
    Dataset::new(kept, format!("cutoff {cutoff}"))
}

/// Sampled documents in one half-open score band `[lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    /// Documents whose score falls in the band.
    pub population: usize,
    pub sample: Vec<ScoredDocument>,
}

/// Seeded uniform sample of up to `per_band` documents per band, for a human
/// to read when choosing the cutoff. Samples keep input order.
pub fn score_band_sample(
    scored: &[ScoredDocument],
    band_edges: &[f64],
    per_band: usize,
    seed: u64,
) -> Result<Vec<Band>> {
    if band_edges.len() < 2 {
        return Err(Error::invalid("need at least two band edges"));
    }
    if band_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("band edges must be strictly increasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(band_edges
        .windows(2)
        .map(|w| {
            let members: Vec<&ScoredDocument> = scored
                .iter()
                .filter(|s| s.max_similarity >= w[0] && s.max_similarity < w[1])
                .collect();
            let take = per_band.min(members.len());
            let mut picks = rand::seq::index::sample(&mut rng, members.len(), take).into_vec();
            picks.sort_unstable();
            Band {
                lo: w[0],
                hi: w[1],
                population: members.len(),
                sample: picks.into_iter().map(|i| members[i].clone()).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub glossary: PathBuf,
    pub refkb: PathBuf,
    pub embedder: EmbedderSpec,
    pub cutoff: f64,
    /// Rows per keyword-stage batch.
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Characters of each document passed to the embedder.
    pub max_chars: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Where to keep every scored row, before the cutoff.
    pub all_scored: Option<PathBuf>,
    /// Defaults to `<output>.summary.json`.
    pub summary: Option<PathBuf>,
    pub retry: RetryPolicy,
}

impl PipelineConfig {
    pub fn new(glossary: impl Into<PathBuf>, refkb: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            glossary: glossary.into(),
            refkb: refkb.into(),
            embedder: EmbedderSpec::default(),
            cutoff: DEFAULT_CUTOFF,
            batch_size: DEFAULT_BATCH_SIZE,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            max_chars: embed::DEFAULT_MAX_CHARS,
            seed: 0,
            jobs: None,
            all_scored: None,
            summary: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_cutoff(self.cutoff)?;
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("batch_size and checkpoint_every must be at least 1"));
        }
        if self.max_chars == 0 {
            return Err(Error::invalid("max_chars must be at least 1"));
        }
        if self.jobs == Some(0) {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        Ok(())
    }

    /// Key/value echo for output metadata.
    pub fn describe(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("glossary".into(), self.glossary.display().to_string());
        m.insert("refkb".into(), self.refkb.display().to_string());
        m.insert("embedder".into(), self.embedder.to_string());
        m.insert("cutoff".into(), self.cutoff.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("checkpoint_every".into(), self.checkpoint_every.to_string());
        m.insert("max_chars".into(), self.max_chars.to_string());
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub input_rows: u64,
    pub after_keywords: u64,
    pub after_cutoff: u64,
    /// Share of each stage's input it removed.
    pub attrition_percent: BTreeMap<String, f64>,
    pub truncated_docs: u64,
    pub resumed_rows: u64,
    pub cutoff: f64,
    pub embedder: String,
    pub max_chars: usize,
    pub seed: u64,
    pub stage_seconds: BTreeMap<String, f64>,
}

fn percent_removed(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before - after) as f64 / before as f64
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: String,
    completed: usize,
}

fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    output.with_file_name(name)
}

fn file_len(path: &Path) -> Result<u64> {
    std::fs::metadata(path).map(|m| m.len()).map_err(|e| Error::io(path, e))
}

fn fingerprint(config: &PipelineConfig, input: &Path, embedder: &str, keyword_rows: usize) -> Result<String> {
    let mut h = Sha256::new();
    for (path, label) in [
        (input, "input"),
        (&config.glossary, "glossary"),
        (&config.refkb, "refkb"),
    ] {
        h.update(label.as_bytes());
        h.update(path.display().to_string().as_bytes());
        h.update(file_len(path)?.to_le_bytes());
    }
    h.update(embedder.as_bytes());
    h.update(config.max_chars.to_le_bytes());
    h.update(keyword_rows.to_le_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn stage_error(stage: &'static str, completed: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage,
        completed,
        source: Box::new(e),
    }
}

/// Loads any scored rows a previous interrupted run left behind.
fn resume(partial: &Path, checkpoint: &Path, fingerprint: &str, kept: &[Document]) -> Vec<ScoredDocument> {
    let Ok(ckpt) = meta::read_json::<Checkpoint>(checkpoint) else {
        return Vec::new();
    };
    if ckpt.fingerprint != fingerprint || ckpt.completed > kept.len() {
        log::info!("checkpoint does not match this run; starting over");
        return Vec::new();
    }
    let Ok(reader) = JsonlReader::open(partial) else {
        return Vec::new();
    };
    let mut done = Vec::with_capacity(ckpt.completed);
    for (doc, expected) in reader.take(ckpt.completed).zip(kept) {
        match doc.and_then(ScoredDocument::from_document) {
            Ok(s) if s.document.id == expected.id => done.push(s),
            _ => {
                log::warn!("partial output diverges from checkpoint; starting over");
                return Vec::new();
            }
        }
    }
    if done.len() == ckpt.completed {
        done
    } else {
        Vec::new()
    }
}

/// Runs keyword filtering, similarity scoring and the cutoff over a JSONL corpus.
///
/// Writes the surviving scored rows to `output`, a summary JSON and a
/// metadata sidecar. Output bytes depend only on the inputs and configuration,
/// not on `batch_size` or `jobs`.
pub fn run_pipeline(config: &PipelineConfig, input: &Path, output: &Path) -> Result<PipelineSummary> {
    config.validate()?;
    let embedder = config.embedder.build(config.retry)?;
    run_pipeline_with(config, input, output, embedder)
}

pub fn run_pipeline_with(
    config: &PipelineConfig,
    input: &Path,
    output: &Path,
    embedder: Arc<dyn Embedder>,
) -> Result<PipelineSummary> {
    config.validate()?;
    match config.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(|| pipeline_inner(config, input, output, embedder.as_ref())),
        None => pipeline_inner(config, input, output, embedder.as_ref()),
    }
}

fn pipeline_inner(
    config: &PipelineConfig,
    input: &Path,
    output: &Path,
    embedder: &dyn Embedder,
) -> Result<PipelineSummary> {
    let mut stage_seconds = BTreeMap::new();

    let clock = Instant::now();
    let matcher = KeywordMatcher::new(&glossary::load_glossary(&config.glossary).map_err(stage_error("keywords", 0))?);
    let mut reader = JsonlReader::open(input).map_err(stage_error("keywords", 0))?;
    let mut input_rows = 0usize;
    let mut kept: Vec<Document> = Vec::new();
    loop {
        let batch = reader
            .next_batch(config.batch_size)
            .map_err(stage_error("keywords", input_rows))?;
        if batch.is_empty() {
            break;
        }
        input_rows += batch.len();
        kept.extend(glossary::filter_batch(&batch, &matcher).into_iter().cloned());
    }
    stage_seconds.insert("keywords".into(), clock.elapsed().as_secs_f64());
    log::info!("keyword stage kept {} of {input_rows} rows", kept.len());

    let clock = Instant::now();
    let kb = ReferenceKB::load(&config.refkb, embedder, config.max_chars).map_err(stage_error("similarity", 0))?;
    check_embedder(&kb, embedder).map_err(stage_error("similarity", 0))?;
    let partial = sidecar(output, ".partial");
    let checkpoint = sidecar(output, ".ckpt.json");
    let print = fingerprint(config, input, &embedder.identity(), kept.len()).map_err(stage_error("similarity", 0))?;
    let mut scored = resume(&partial, &checkpoint, &print, &kept);
    let resumed_rows = scored.len();
    if resumed_rows > 0 {
        log::info!("resuming similarity stage after {resumed_rows} rows");
    }
    let mut writer = if resumed_rows > 0 {
        // drop any rows written after the last checkpoint
        let mut w = JsonlWriter::create(&partial).map_err(stage_error("similarity", 0))?;
        for s in &scored {
            w.write_document(&s.to_document())
                .map_err(stage_error("similarity", 0))?;
        }
        w
    } else {
        JsonlWriter::create(&partial).map_err(stage_error("similarity", 0))?
    };
    let mut truncated = 0usize;
    for chunk in kept[resumed_rows..].chunks(config.checkpoint_every) {
        let done = scored.len();
        let (part, cut) =
            score_chunk(chunk, &kb, embedder, config.max_chars).map_err(stage_error("similarity", done))?;
        truncated += cut;
        for s in &part {
            writer
                .write_document(&s.to_document())
                .map_err(stage_error("similarity", done))?;
        }
        writer.flush().map_err(stage_error("similarity", done))?;
        scored.extend(part);
        meta::write_json(
            &checkpoint,
            &Checkpoint {
                fingerprint: print.clone(),
                completed: scored.len(),
            },
        )
        .map_err(stage_error("similarity", scored.len()))?;
    }
    writer.flush().map_err(stage_error("similarity", scored.len()))?;
    drop(writer);
    stage_seconds.insert("similarity".into(), clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let survivors = apply_cutoff(&scored, config.cutoff).map_err(stage_error("cutoff", 0))?;
    crate::corpus::write_jsonl(&survivors, output).map_err(stage_error("cutoff", 0))?;
    match &config.all_scored {
        Some(path) => std::fs::rename(&partial, path).map_err(|e| stage_error("cutoff", 0)(Error::io(path, e)))?,
        None => std::fs::remove_file(&partial).map_err(|e| stage_error("cutoff", 0)(Error::io(&partial, e)))?,
    }
    let _ = std::fs::remove_file(&checkpoint);
    stage_seconds.insert("cutoff".into(), clock.elapsed().as_secs_f64());

    let (input_rows, after_keywords, after_cutoff) = (input_rows as u64, kept.len() as u64, survivors.len() as u64);
    let mut attrition_percent = BTreeMap::new();
    attrition_percent.insert("keywords".into(), percent_removed(input_rows, after_keywords));
    attrition_percent.insert("cutoff".into(), percent_removed(after_keywords, after_cutoff));
    let summary = PipelineSummary {
        input_rows,
        after_keywords,
        after_cutoff,
        attrition_percent,
        truncated_docs: truncated as u64,
        resumed_rows: resumed_rows as u64,
        cutoff: config.cutoff,
        embedder: embedder.identity(),
        max_chars: config.max_chars,
        seed: config.seed,
        stage_seconds,
    };
    let summary_path = config
        .summary
        .clone()
        .unwrap_or_else(|| sidecar(output, ".summary.json"));
    meta::write_json(&summary_path, &summary)?;
    let mut metadata = Metadata::new("pipeline");
    metadata.seed = Some(config.seed);
    metadata.embedder = Some(embedder.identity());
    metadata.config = config.describe();
    if truncated > 0 {
        metadata.config.insert("truncated_docs".into(), truncated.to_string());
    }
    meta::write_sidecar(output, &metadata)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{cosine_similarity, hash_embed, HashEmbedder};

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, text, "test", "open_data")
    }

    fn scored(scores: &[f64]) -> Vec<ScoredDocument> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoredDocument {
                document: doc(&i.to_string(), "text"),
                max_similarity: s,
                ref_index: 0,
            })
            .collect()
    }

    fn kb(texts: &[&str], e: &HashEmbedder) -> ReferenceKB {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| doc(&format!("r{i}"), t))
            .collect();
        ReferenceKB::build(Dataset::new(docs, "kb").unwrap(), e, 8192).unwrap()
    }

    #[test]
    fn scored_columns_round_trip() {
        let s = &scored(&[0.5])[0];
        let d = s.to_document();
        assert_eq!(d.extra["max_similarity"], Value::from(0.5));
        assert_eq!(&ScoredDocument::from_document(d).unwrap(), s);
        assert!(ScoredDocument::from_document(doc("x", "y")).is_err());
    }

    #[test]
    fn cutoff_is_inclusive() {
        let out = apply_cutoff(&scored(&[0.64, 0.65, 0.66]), 0.65).unwrap();
        let ids: Vec<_> = out.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["1", "2"]);
    }

    #[test]
    fn cutoff_extremes() {
        let s = scored(&[0.1, 0.9, 0.4]);
        assert_eq!(apply_cutoff(&s, 1e-9).unwrap().len(), 3);
        assert!(apply_cutoff(&s, 0.9 + 1e-9).unwrap().is_empty());
        assert!(apply_cutoff(&s, 0.0).is_err());
        assert!(apply_cutoff(&s, 1.0).is_err());
    }

    #[test]
    fn bands_partition_scores() {
        let bands = score_band_sample(&scored(&[0.55, 0.65, 0.75]), &[0.5, 0.6, 0.7], 5, 1).unwrap();
        assert_eq!(bands.len(), 2);
        assert_eq!(bands[0].sample.len(), 1);
        assert_eq!(bands[1].sample.len(), 1);
        assert_eq!(bands[1].sample[0].max_similarity, 0.65);
    }

    #[test]
    fn band_sampling_is_seeded() {
        let s = scored(&(0..100).map(|i| 0.5 + i as f64 * 0.004).collect::<Vec<_>>());
        let a = score_band_sample(&s, &[0.5, 0.7, 0.9], 7, 42).unwrap();
        assert_eq!(a, score_band_sample(&s, &[0.5, 0.7, 0.9], 7, 42).unwrap());
        assert!(a.iter().all(|b| b.sample.len() == 7));
        let whole = score_band_sample(&s, &[0.5, 0.9], 1000, 0).unwrap();
        assert_eq!(whole[0].sample.len(), 100);
        assert!(score_band_sample(&s, &[0.6, 0.6], 1, 0).is_err());
        let empty = score_band_sample(&s, &[0.0, 0.1], 3, 0).unwrap();
        assert!(empty[0].sample.is_empty());
    }

    #[test]
    fn self_similar_document_scores_one() {
        let e = HashEmbedder::new(64).unwrap();
        let kb = kb(&["pit dewatering pumps", "crusher liner wear"], &e);
        let out = run_similarity_stage(&[doc("d", "crusher liner wear")], &kb, &e, 8192).unwrap();
        assert_eq!(out[0].max_similarity, 1.0);
        assert_eq!(out[0].ref_index, 1);
        assert!(run_similarity_stage(&[], &kb, &e, 8192).unwrap().is_empty());
    }

    #[test]
    fn embedder_identity_must_match_kb() {
        let kb = kb(&["a b"], &HashEmbedder::new(64).unwrap());
        let other = HashEmbedder::new(32).unwrap();
        assert!(run_similarity_stage(&[doc("d", "a")], &kb, &other, 8192).is_err());
    }

    #[test]
    fn similarity_stage_matches_all_pairs_scan() {
        let e = HashEmbedder::new(128).unwrap();
        let words = [
            "ore", "mill", "pump", "truck", "haul", "rock", "blast", "drill", "belt", "sump",
        ];
        let text = |i: usize, n: usize| {
            (0..n)
                .map(|j| words[(i * 31 + j * 7 + j * j) % words.len()])
                .collect::<Vec<_>>()
                .join(" ")
        };
        let kb_texts: Vec<String> = (0..50).map(|i| text(i, 6)).collect();
        let kb_refs: Vec<&str> = kb_texts.iter().map(String::as_str).collect();
        let kb = kb(&kb_refs, &e);
        let docs: Vec<Document> = (0..500).map(|i| doc(&i.to_string(), &text(i + 1000, 9))).collect();
        let out = run_similarity_stage(&docs, &kb, &e, 8192).unwrap();
        for (d, s) in docs.iter().zip(&out) {
            let q = hash_embed(&d.text, 128).unwrap();
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (j, t) in kb_texts.iter().enumerate() {
                let v = cosine_similarity(q.as_slice(), hash_embed(t, 128).unwrap().as_slice()).unwrap();
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            assert_eq!((s.ref_index, s.max_similarity), (arg, best), "doc {}", d.id);
        }
    }
}
