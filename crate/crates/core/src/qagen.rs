//! Question/answer dataset construction with a remote LLM, leakage-free
//! train/eval splitting, ablation subsets and fine-tuning run specs.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Dataset, Document};
use crate::error::{Error, Result};
use crate::service::TextService;
use crate::text::truncate_chars;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub source_id: String,
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<QAPair>> {
    let pairs: Vec<QAPair> = crate::corpus::read_records(path)?;
    if let Some(bad) = pairs
        .iter()
        .find(|p| p.question.trim().is_empty() || p.answer.trim().is_empty())
    {
        return Err(Error::invalid(format!(
            "empty question or answer for source {:?}",
            bad.source_id
        )));
    }
    Ok(pairs)
}

pub fn write_pairs(pairs: &[QAPair], path: impl AsRef<Path>) -> Result<()> {
    crate::corpus::write_records(pairs, path)
}

/// Fails on the first pair whose `source_id` is not a document in `corpus`.
pub fn check_references(pairs: &[QAPair], corpus: &Dataset) -> Result<()> {
    let ids: HashSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
    match pairs.iter().find(|p| !ids.contains(p.source_id.as_str())) {
        Some(p) => Err(Error::invalid(format!(
            "source_id {:?} is not in the corpus",
            p.source_id
        ))),
        None => Ok(()),
    }
}

const DOMAIN: &str = "{domain_instruction}";
const DOCUMENT: &str = "{document_text}";
const FORMAT: &str = "{format_instruction}";

/// A starting point, not a canonical prompt; tune it per domain.
pub const DEFAULT_TEMPLATE: &str = "{domain_instruction}\n\n\
Source document:\n\"\"\"\n{document_text}\n\"\"\"\n\n\
{format_instruction}\n";

pub const DEFAULT_DOMAIN_INSTRUCTION: &str = "You are a mining engineer writing study questions. \
Using only the source document, write questions a practitioner would ask and answer each one \
accurately and self-containedly.";

pub fn format_instruction(per_doc: usize) -> String {
    format!(
        "Write exactly {per_doc} question-answer pairs. Output one JSON object per line, \
         {{\"question\": \"...\", \"answer\": \"...\"}}, and nothing else."
    )
}

fn strict_format_instruction(per_doc: usize) -> String {
    format!(
        "{} Do not use markdown, numbering or commentary. Every line must be a complete JSON object \
         with string fields \"question\" and \"answer\".",
        format_instruction(per_doc)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Domain,
    Document,
    Format,
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Literal(String),
    Slot(Slot),
}

/// Prompt text with `{domain_instruction}`, `{document_text}` and
/// `{format_instruction}`, each exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
    literal_chars: usize,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        for name in [DOMAIN, DOCUMENT, FORMAT] {
            let n = text.matches(name).count();
            if n != 1 {
                return Err(Error::invalid(format!(
                    "prompt template must contain {name} exactly once, found {n}"
                )));
            }
        }
        let mut segments = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next = [
                (DOMAIN, Slot::Domain),
                (DOCUMENT, Slot::Document),
                (FORMAT, Slot::Format),
            ]
            .into_iter()
            .filter_map(|(name, slot)| rest.find(name).map(|at| (at, name, slot)))
            .min_by_key(|(at, _, _)| *at);
            match next {
                Some((at, name, slot)) => {
                    if at > 0 {
                        segments.push(Segment::Literal(rest[..at].to_owned()));
                    }
                    segments.push(Segment::Slot(slot));
                    rest = &rest[at + name.len()..];
                }
                None => {
                    segments.push(Segment::Literal(rest.to_owned()));
                    rest = "";
                }
            }
        }
        let literal_chars = segments
            .iter()
            .map(|s| match s {
                Segment::Literal(t) => t.chars().count(),
                Segment::Slot(_) => 0,
            })
            .sum();
        Ok(PromptTemplate {
            segments,
            literal_chars,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Characters contributed by the template itself.
    pub fn overhead(&self) -> usize {
        self.literal_chars
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBindings {
    pub domain_instruction: String,
    pub format_instruction: String,
    /// Budget for the document text, in characters.
    pub max_chars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub truncated: bool,
}

/// Substitutes the placeholders in one pass, so placeholder-like text inside
/// the document is left alone.
pub fn render_prompt(template: &PromptTemplate, doc: &Document, bindings: &PromptBindings) -> Result<RenderedPrompt> {
    if doc.text.trim().is_empty() {
        return Err(Error::invalid(format!("document {:?} has no text", doc.id)));
    }
    let (body, truncated) = truncate_chars(&doc.text, bindings.max_chars);
    let mut text = String::with_capacity(template.literal_chars + body.len() + 256);
    for segment in &template.segments {
        text.push_str(match segment {
            Segment::Literal(t) => t,
            Segment::Slot(Slot::Domain) => &bindings.domain_instruction,
            Segment::Slot(Slot::Document) => body,
            Segment::Slot(Slot::Format) => &bindings.format_instruction,
        });
    }
    Ok(RenderedPrompt { text, truncated })
}

/// Body of a chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("chat requests always serialize")
    }
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn pair_from_json(v: &Value) -> Option<(String, String)> {
    let q = v.get("question")?.as_str()?.trim();
    let a = v.get("answer")?.as_str()?.trim();
    (!q.is_empty() && !a.is_empty()).then(|| (q.to_owned(), a.to_owned()))
}

fn json_pairs(text: &str) -> Vec<(String, String)> {
    if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(text.trim()) {
        return items.iter().filter_map(pair_from_json).collect();
    }
    text.lines()
        .map(str::trim)
        .filter(|l| l.starts_with('{'))
        .filter_map(|l| serde_json::from_str::<Value>(l.trim_end_matches(',')).ok())
        .filter_map(|v| pair_from_json(&v))
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Question,
    Answer,
}

/// Splits a `Q:`/`Question:`/`A:`/`Answer:` marker off a line, tolerating
/// list numbering and bold markup.
fn marker(line: &str) -> Option<(Field, &str)> {
    let mut s = line.trim_start();
    s = s.trim_start_matches(|c: char| c.is_ascii_digit());
    s = s
        .strip_prefix('.')
        .or_else(|| s.strip_prefix(')'))
        .unwrap_or(s)
        .trim_start();
    s = s.trim_start_matches(['*', '#', '-', ' ']);
    for (prefix, field) in [
        ("question", Field::Question),
        ("answer", Field::Answer),
        ("q", Field::Question),
        ("a", Field::Answer),
    ] {
        if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
            let tail = s[prefix.len()..].trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ');
            let tail = tail.trim_start_matches('*');
            if let Some(body) = tail.strip_prefix(':') {
                return Some((field, body.trim_start_matches('*').trim()));
            }
        }
    }
    None
}

fn marker_pairs(text: &str) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    let mut question: Option<String> = None;
    let mut answer: Option<String> = None;
    let mut current: Option<Field> = None;
    let mut flush = |q: &mut Option<String>, a: &mut Option<String>| {
        if let (Some(qq), Some(aa)) = (q.take(), a.take()) {
            let (qq, aa) = (qq.trim().to_owned(), aa.trim().to_owned());
            if !qq.is_empty() && !aa.is_empty() {
                pairs.push((qq, aa));
            }
        }
        *q = None;
        *a = None;
    };
    for line in text.lines() {
        match marker(line) {
            Some((Field::Question, body)) => {
                flush(&mut question, &mut answer);
                question = Some(body.to_owned());
                current = Some(Field::Question);
            }
            Some((Field::Answer, body)) if question.is_some() && answer.is_none() => {
                answer = Some(body.to_owned());
                current = Some(Field::Answer);
            }
            Some((Field::Answer, _)) => current = None,
            None if line.trim().is_empty() => {
                if current == Some(Field::Answer) {
                    current = None;
                }
            }
            None => {
                let target = match current {
                    Some(Field::Question) => question.as_mut(),
                    Some(Field::Answer) => answer.as_mut(),
                    None => None,
                };
                if let Some(t) = target {
                    t.push(' ');
                    t.push_str(line.trim());
                }
            }
        }
    }
    flush(&mut question, &mut answer);
    pairs
}

/// Well-formed (question, answer) pairs in `text`, or `None` when there are none.
///
/// JSON (one object per line, or an array) is tried first; `Q:`/`A:` blocks
/// are the fallback. Surrounding prose and code fences are ignored.
pub fn parse_qa_response(text: &str) -> Option<Vec<(String, String)>> {
    let text = strip_fences(text);
    let pairs = json_pairs(&text);
    let pairs = if pairs.is_empty() { marker_pairs(&text) } else { pairs };
    (!pairs.is_empty()).then_some(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub per_doc: usize,
    pub max_tokens: u32,
    pub temperature: f64,
    pub domain_instruction: String,
    /// Document characters sent per prompt.
    pub max_chars: usize,
    /// Seeded subsample of the input documents.
    pub max_docs: Option<usize>,
    /// Concurrent requests.
    pub in_flight: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            per_doc: 5,
            max_tokens: 2048,
            temperature: 0.0,
            domain_instruction: DEFAULT_DOMAIN_INSTRUCTION.into(),
            max_chars: 8000,
            max_docs: None,
            in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDocument {
    pub source_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub documents: usize,
    pub pairs: usize,
    pub parse_failures: usize,
    pub request_failures: usize,
    /// Responses that only parsed after the stricter retry.
    pub format_retries: usize,
    pub truncated_prompts: usize,
    pub skipped: Vec<SkippedDocument>,
}

enum Outcome {
    Pairs(Vec<(String, String)>, bool),
    ParseFailure,
    RequestFailure(String),
}

fn generate_one(
    service: &dyn TextService,
    template: &PromptTemplate,
    doc: &Document,
    config: &GenerationConfig,
) -> Result<(Outcome, bool)> {
    let mut truncated = false;
    let mut ask = |format: String| -> Result<std::result::Result<String, String>> {
        let prompt = render_prompt(
            template,
            doc,
            &PromptBindings {
                domain_instruction: config.domain_instruction.clone(),
                format_instruction: format,
                max_chars: config.max_chars,
            },
        )?;
        truncated |= prompt.truncated;
        let request = ChatRequest {
            prompt: prompt.text,
            max_tokens: config.max_tokens,
            temperature: config.temperature,
        };
        Ok(service.call(&request.to_value()).map_err(|e| e.to_string()))
    };
    let outcome = match ask(format_instruction(config.per_doc))? {
        Err(e) => Outcome::RequestFailure(e),
        Ok(text) => match parse_qa_response(&text) {
            Some(p) => Outcome::Pairs(p, false),
            None => match ask(strict_format_instruction(config.per_doc))? {
                Err(e) => Outcome::RequestFailure(e),
                Ok(text) => match parse_qa_response(&text) {
                    Some(p) => Outcome::Pairs(p, true),
                    None => Outcome::ParseFailure,
                },
            },
        },
    };
    Ok((outcome, truncated))
}

/// Asks the service for `per_doc` pairs per document. Documents whose
/// responses stay unparseable after one stricter retry, or whose requests
/// fail, are skipped and reported. Output order follows document order.
pub fn generate_qa(
    service: &dyn TextService,
    docs: &Dataset,
    template: &PromptTemplate,
    config: &GenerationConfig,
    seed: u64,
) -> Result<(Vec<QAPair>, GenerationReport)> {
    if config.per_doc == 0 || config.in_flight == 0 || config.max_chars == 0 {
        return Err(Error::invalid("per_doc, in_flight and max_chars must be at least 1"));
    }
    let chosen: Vec<&Document> = match config.max_docs {
        Some(n) if n < docs.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, docs.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &docs.documents()[i]).collect()
        }
        _ => docs.iter().collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.in_flight)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<(Outcome, bool)> = pool.install(|| {
        chosen
            .par_iter()
            .map(|doc| generate_one(service, template, doc, config))
            .collect::<Result<_>>()
    })?;

    let mut report = GenerationReport {
        documents: chosen.len(),
        ..GenerationReport::default()
    };
    let mut pairs = Vec::new();
    for (doc, (outcome, truncated)) in chosen.iter().zip(outcomes) {
        report.truncated_prompts += usize::from(truncated);
        match outcome {
            Outcome::Pairs(found, retried) => {
                report.format_retries += usize::from(retried);
                pairs.extend(found.into_iter().take(config.per_doc).map(|(question, answer)| QAPair {
                    question,
                    answer,
                    source_id: doc.id.clone(),
                }));
            }
            Outcome::ParseFailure => {
                log::warn!("no parseable pairs for {:?}", doc.id);
                report.parse_failures += 1;
                report.skipped.push(SkippedDocument {
                    source_id: doc.id.clone(),
                    reason: "unparseable response".into(),
                });
            }
            Outcome::RequestFailure(e) => {
                log::warn!("request for {:?} failed: {e}", doc.id);
                report.request_failures += 1;
                report.skipped.push(SkippedDocument {
                    source_id: doc.id.clone(),
                    reason: e,
                });
            }
        }
    }
    report.pairs = pairs.len();
    if pairs.is_empty() {
        return Err(Error::Protocol(format!(
            "no question-answer pairs generated from {} documents",
            chosen.len()
        )));
    }
    Ok((pairs, report))
}

/// Eval share giving at least 100 eval pairs when possible, never below 0.1
/// and never above 0.5.
pub fn default_eval_fraction(pairs: usize) -> f64 {
    if pairs == 0 {
        return 0.1;
    }
    (100.0 / pairs as f64).clamp(0.1, 0.5)
}

/// Splits by source document so no document contributes to both sides.
///
/// Groups are shuffled with `seed` and moved to the eval side while that
/// brings its size closer to `eval_fraction` of all pairs. Both sides keep
/// input order.
pub fn split_train_eval(pairs: &[QAPair], eval_fraction: f64, seed: u64) -> Result<(Vec<QAPair>, Vec<QAPair>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "eval fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to split"));
    }
    let mut sizes: Vec<(&str, usize)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        let i = *slot.entry(p.source_id.as_str()).or_insert_with(|| {
            sizes.push((p.source_id.as_str(), 0));
            sizes.len() - 1
        });
        sizes[i].1 += 1;
    }
    sizes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = (eval_fraction * pairs.len() as f64).round() as usize;
    let mut eval_size = 0usize;
    let mut eval_groups = HashSet::new();
    for (group, size) in sizes {
        if (eval_size + size).abs_diff(target) < eval_size.abs_diff(target) {
            eval_size += size;
            eval_groups.insert(group);
        }
    }
    let (eval, train) = pairs
        .iter()
        .cloned()
        .partition(|p| eval_groups.contains(p.source_id.as_str()));
    Ok((train, eval))
}

/// Seeded sample of `n` rows from one category, in original order.
pub fn ablation_subset(dataset: &Dataset, category: &str, n: usize, seed: u64) -> Result<Dataset> {
    let members: Vec<&Document> = dataset.iter().filter(|d| d.category == category).collect();
    if n > members.len() {
        return Err(Error::invalid(format!(
            "asked for {n} rows of category {category:?} but only {} available",
            members.len()
        )));
    }
    let mut picks = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), members.len(), n).into_vec();
    picks.sort_unstable();
    Ok(Dataset::from_trusted(
        picks.into_iter().map(|i| members[i].clone()).collect(),
        format!("{} / {category} x{n} seed {seed}", dataset.provenance()),
    ))
}

pub const DEFAULT_BASE_MODEL: &str = "mistralai/Mistral-7B-Instruct-v0.2";

/// QLoRA fine-tuning hyperparameters handed to an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub weight_decay: f64,
    pub warmup_steps: u32,
    pub gradient_accumulation_steps: u32,
    pub base_model: String,
    pub epochs: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lora_rank: 128,
            lora_alpha: 16,
            lora_dropout: 0.01,
            learning_rate: 1e-4,
            batch_size: 16,
            weight_decay: 0.01,
            warmup_steps: 5,
            gradient_accumulation_steps: 4,
            base_model: DEFAULT_BASE_MODEL.into(),
            epochs: 2,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.lora_rank,
            self.lora_alpha,
            self.batch_size,
            self.warmup_steps,
            self.gradient_accumulation_steps,
            self.epochs,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("integer hyperparameters must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay > 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::invalid("LoRA dropout must be in [0, 1)"));
        }
        if self.base_model.trim().is_empty() {
            return Err(Error::invalid("base model id is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub epoch: u32,
    pub score: f64,
}

/// Learning rate x epoch sweep, optionally with a score per checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunGrid {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<u32>,
    #[serde(default)]
    pub scores: Vec<GridCell>,
}

impl RunGrid {
    pub fn new(learning_rates: Vec<f64>, epochs: Vec<u32>) -> Result<Self> {
        if learning_rates.is_empty() || epochs.is_empty() {
            return Err(Error::invalid("grid needs at least one learning rate and one epoch"));
        }
        if learning_rates.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) || epochs.contains(&0) {
            return Err(Error::invalid("grid values must be positive"));
        }
        Ok(RunGrid {
            learning_rates,
            epochs,
            scores: Vec::new(),
        })
    }

    /// Records (or replaces) the score of an existing cell.
    pub fn set_score(&mut self, learning_rate: f64, epoch: u32, score: f64) -> Result<()> {
        if !self.learning_rates.contains(&learning_rate) || !self.epochs.contains(&epoch) {
            return Err(Error::invalid(format!(
                "({learning_rate:e}, {epoch}) is not a grid cell"
            )));
        }
        if !score.is_finite() {
            return Err(Error::invalid("score must be finite"));
        }
        match self
            .scores
            .iter_mut()
            .find(|c| c.learning_rate == learning_rate && c.epoch == epoch)
        {
            Some(cell) => cell.score = score,
            None => self.scores.push(GridCell {
                learning_rate,
                epoch,
                score,
            }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut checked = RunGrid::new(self.learning_rates.clone(), self.epochs.clone())?;
        for c in &self.scores {
            checked.set_score(c.learning_rate, c.epoch, c.score)?;
        }
        if checked.scores.len() != self.scores.len() {
            return Err(Error::invalid("grid lists a cell twice"));
        }
        Ok(())
    }

    pub fn cells(&self) -> impl Iterator<Item = (f64, u32)> + '_ {
        self.learning_rates
            .iter()
            .flat_map(|&lr| self.epochs.iter().map(move |&e| (lr, e)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub run_id: String,
    pub config: TrainingConfig,
}

/// Writes one JSON run spec per grid cell into `dir`, returning the paths.
pub fn emit_training_config(config: &TrainingConfig, grid: &RunGrid, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let grid = RunGrid::new(grid.learning_rates.clone(), grid.epochs.clone())?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (lr, epoch) in grid.cells() {
        let run_id = format!("lr{lr:e}-ep{epoch}");
        let spec = RunSpec {
            run_id: run_id.clone(),
            config: TrainingConfig {
                learning_rate: lr,
                epochs: epoch,
                ..config.clone()
            },
        };
        let path = dir.join(format!("run-{run_id}.json"));
        crate::meta::write_json(&path, &spec)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::service::{Fixture, ReplayService};

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, text, "s", "open_data")
    }

    fn bindings(max_chars: usize) -> PromptBindings {
        PromptBindings {
            domain_instruction: String::new(),
            format_instruction: String::new(),
            max_chars,
        }
    }

    #[test]
    fn renders_with_empty_bindings() {
        let t = PromptTemplate::parse("{domain_instruction}Q from: {document_text}{format_instruction}").unwrap();
        let r = render_prompt(&t, &doc("1", "abc"), &bindings(100)).unwrap();
        assert_eq!(r.text, "Q from: abc");
        assert!(!r.truncated);
    }

    #[test]
    fn long_document_is_truncated() {
        let t = PromptTemplate::default();
        let text = "x".repeat(100_000);
        let r = render_prompt(&t, &doc("1", &text), &bindings(8000)).unwrap();
        assert!(r.truncated);
        assert!(r.text.chars().count() <= t.overhead() + 8000);
    }

    #[test]
    fn placeholders_are_checked_at_parse_time() {
        assert!(PromptTemplate::parse("{domain_instruction} {format_instruction}").is_err());
        assert!(
            PromptTemplate::parse("{domain_instruction}{document_text}{document_text}{format_instruction}").is_err()
        );
        assert!(PromptTemplate::parse(DEFAULT_TEMPLATE).is_ok());
    }

    #[test]
    fn document_text_is_not_rescanned() {
        let t = PromptTemplate::default();
        let r = render_prompt(&t, &doc("1", "see {format_instruction}"), &bindings(100)).unwrap();
        assert!(r.text.contains("see {format_instruction}"));
    }

    #[test]
    fn parses_marker_blocks() {
        let p = parse_qa_response("Q: What is a crusher?\nA: A machine that breaks rock.").unwrap();
        assert_eq!(
            p,
            vec![("What is a crusher?".into(), "A machine that breaks rock.".into())]
        );
        let text = "Sure, here you go.\n\n1. **Question:** Why bench?\n**Answer:** Stability\nof walls.\n\nQuestion 2: Why drill?\nAnswer 2: To blast.\n\nHope this helps.";
        let p = parse_qa_response(text).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].1, "Stability of walls.");
        assert_eq!(p[1].0, "Why drill?");
    }

    #[test]
    fn parses_json_forms() {
        let lines = "{\"question\": \"a?\", \"answer\": \"b\"}\n{\"question\": \"c?\", \"answer\": \"d\"}";
        assert_eq!(parse_qa_response(lines).unwrap().len(), 2);
        let fenced = "```json\n[{\"question\": \"a?\", \"answer\": \"b\"}]\n```";
        assert_eq!(parse_qa_response(fenced).unwrap().len(), 1);
        let partial = "{\"question\": \"a?\", \"answer\": \"\"}\n{\"question\": \"c?\", \"answer\": \"d\"}";
        assert_eq!(parse_qa_response(partial).unwrap(), vec![("c?".into(), "d".into())]);
    }

    #[test]
    fn prose_is_a_parse_failure() {
        assert!(parse_qa_response("The quarry is deep and the trucks are large.").is_none());
        assert!(parse_qa_response("").is_none());
        assert!(parse_qa_response("Q: orphan question with no answer").is_none());
    }

    fn pairs(sources: &[&str]) -> Vec<QAPair> {
        sources
            .iter()
            .enumerate()
            .map(|(i, s)| QAPair {
                question: format!("q{i}"),
                answer: format!("a{i}"),
                source_id: s.to_string(),
            })
            .collect()
    }

    #[test]
    fn split_distinct_sources() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let (train, eval) = split_train_eval(&pairs(&refs), 0.2, 7).unwrap();
        assert_eq!((train.len(), eval.len()), (8, 2));
        assert_eq!(split_train_eval(&pairs(&refs), 0.2, 7).unwrap(), (train, eval));
    }

    #[test]
    fn split_keeps_groups_whole() {
        let (train, eval) = split_train_eval(&pairs(&["x"; 10]), 0.2, 1).unwrap();
        assert!(train.len() == 10 || eval.len() == 10);
        assert!(split_train_eval(&pairs(&["x"]), 0.0, 1).is_err());
        assert!(split_train_eval(&[], 0.5, 1).is_err());
    }

    #[test]
    fn default_fraction_targets_100_eval_pairs() {
        assert_eq!(default_eval_fraction(10_000), 0.1);
        assert!((default_eval_fraction(500) * 500.0).round() >= 100.0);
        assert_eq!(default_eval_fraction(50), 0.5);
    }

    #[test]
    fn ablation_subset_is_seeded() {
        let mut docs: Vec<Document> = (0..100).map(|i| doc(&format!("t{i}"), "t")).collect();
        docs.iter_mut().for_each(|d| d.category = "thesis_reports".into());
        docs.extend((0..50).map(|i| doc(&format!("o{i}"), "o")));
        let ds = Dataset::new(docs, "mix").unwrap();
        let a = ablation_subset(&ds, "thesis_reports", 10, 3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, ablation_subset(&ds, "thesis_reports", 10, 3).unwrap());
        assert!(a.iter().all(|d| d.category == "thesis_reports"));
        assert_eq!(ablation_subset(&ds, "thesis_reports", 100, 3).unwrap().len(), 100);
        let err = ablation_subset(&ds, "open_data", 51, 0).unwrap_err().to_string();
        assert!(err.contains("50 available"), "{err}");
    }

    #[test]
    fn training_defaults_are_valid() {
        let c = TrainingConfig::default();
        c.validate().unwrap();
        assert!(TrainingConfig {
            lora_dropout: 1.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig { batch_size: 0, ..c }.validate().is_err());
    }

    #[test]
    fn grid_rejects_foreign_cells() {
        let mut g = RunGrid::new(vec![1e-4, 2e-4], vec![1, 2]).unwrap();
        g.set_score(1e-4, 2, 55.0).unwrap();
        g.set_score(1e-4, 2, 56.0).unwrap();
        assert_eq!(g.scores.len(), 1);
        assert!(g.set_score(5e-4, 1, 1.0).is_err());
        assert!(g.set_score(1e-4, 3, 1.0).is_err());
    }

    #[test]
    fn emitted_specs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = RunGrid::new(vec![2e-4], vec![3]).unwrap();
        let paths = emit_training_config(&TrainingConfig::default(), &grid, dir.path()).unwrap();
        assert_eq!(paths.len(), 1);
        let spec: RunSpec = crate::meta::read_json(&paths[0]).unwrap();
        assert_eq!(spec.config.learning_rate, 2e-4);
        assert_eq!(spec.config.epochs, 3);
        assert_eq!(spec.config.lora_rank, 128);
        assert_eq!(spec.run_id, "lr2e-4-ep3");
    }

    fn request_for(d: &Document, format: String, config: &GenerationConfig) -> Value {
        let prompt = render_prompt(
            &PromptTemplate::default(),
            d,
            &PromptBindings {
                domain_instruction: config.domain_instruction.clone(),
                format_instruction: format,
                max_chars: config.max_chars,
            },
        )
        .unwrap();
        ChatRequest {
            prompt: prompt.text,
            max_tokens: config.max_tokens,
            temperature: config.temperature,
        }
        .to_value()
    }

    #[test]
    fn generation_retries_once_then_skips() {
        let config = GenerationConfig {
            per_doc: 2,
            ..GenerationConfig::default()
        };
        let ds = Dataset::new(
            vec![doc("a", "alpha text"), doc("b", "beta text"), doc("c", "gamma text")],
            "t",
        )
        .unwrap();
        let good = "Q: one?\nA: 1\nQ: two?\nA: 2";
        let d = ds.documents();
        let fixtures = vec![
            Fixture::new(&request_for(&d[0], format_instruction(2), &config), good),
            Fixture::new(&request_for(&d[1], format_instruction(2), &config), "rambling"),
            Fixture::new(
                &request_for(&d[1], strict_format_instruction(2), &config),
                "still rambling",
            ),
            Fixture::new(&request_for(&d[2], format_instruction(2), &config), "nope"),
            Fixture::new(&request_for(&d[2], strict_format_instruction(2), &config), good),
        ];
        let svc = ReplayService::from_fixtures(fixtures);
        let (pairs, report) = generate_qa(&svc, &ds, &PromptTemplate::default(), &config, 0).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[0].source_id, "a");
        assert_eq!(pairs[3].source_id, "c");
        assert_eq!(report.parse_failures, 1);
        assert_eq!(report.format_retries, 1);
        assert_eq!(report.skipped[0].source_id, "b");
        check_references(&pairs, &ds).unwrap();
    }

    #[test]
    fn no_pairs_is_an_error() {
        let ds = Dataset::new(vec![doc("a", "alpha")], "t").unwrap();
        let svc = ReplayService::from_fixtures(Vec::new());
        let err = generate_qa(&svc, &ds, &PromptTemplate::default(), &GenerationConfig::default(), 0);
        assert!(err.is_err());
    }
}
