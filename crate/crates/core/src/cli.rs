//! The `orepipe` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Data goes to files;
//! stdout carries only small reports and logs go to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::ConfigFile;
use crate::corpus::{self, JsonlReader, JsonlWriter};
use crate::embed::{Embedder, EmbedderSpec, HashEmbedder, DEFAULT_MAX_CHARS};
use crate::evalkit::{self, EvalRecord, ModelScore};
use crate::glossary::{self, KeywordMatcher};
use crate::http::RetryPolicy;
use crate::ingest::{self, CrawlJob, PlainTextExtractor};
use crate::meta::{self, Metadata};
use crate::pipeline::{self, PipelineConfig};
use crate::qagen::{self, GenerationConfig, PromptTemplate, RunGrid, TrainingConfig};
use crate::refkb::{self, ReferenceKB};
use crate::service::{HttpTextService, RecordingService, ReplayService, TextService};

/// Embedding model used when a remote endpoint is configured without a model name.
pub const DEFAULT_REMOTE_MODEL: &str = "sentence-transformers/multi-qa-mpnet-base-dot-v1";

#[derive(Debug, Parser)]
#[command(
    name = "orepipe",
    version,
    about = "Domain corpus curation and domain-model evaluation"
)]
struct Cli {
    /// key = value configuration file; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output on stderr; repeat for more
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Keep documents that contain at least one glossary keyword
    FilterKeywords(FilterKeywords),
    /// Embed reference documents into a reference KB
    BuildRefkb(BuildRefkb),
    /// Drop near-duplicate reference rows, or show the similarity histogram
    DedupRefkb(DedupRefkb),
    /// Cluster the reference KB and export a 2-D projection
    ClusterViz(ClusterViz),
    /// Score documents by similarity to their nearest reference row
    ScoreSimilarity(ScoreSimilarity),
    /// Keep scored documents at or above a similarity cutoff
    ApplyCutoff(ApplyCutoff),
    /// Sample scored documents per similarity band for manual review
    BandSample(BandSample),
    /// Crawl listing pages and download linked reports
    Crawl(Crawl),
    /// Generate question-answer pairs with an LLM service
    GenQa(GenQa),
    /// Split QA pairs into train and eval sets by source document
    Split(Split),
    /// Sample a fixed-size subset of one category
    AblateSample(AblateSample),
    /// Write one fine-tuning run spec per grid cell
    EmitTrainConfig(EmitTrainConfig),
    /// Pick the best checkpoint from a scored run grid
    SelectCheckpoint(SelectCheckpoint),
    /// Score a model on an eval set by answer similarity
    EvalDomain(EvalDomain),
    /// Rank models by score
    Leaderboard(Leaderboard),
    /// Percentage change of a fine-tuned score relative to its base
    Deviation(Deviation),
    /// Paired t-test from raw observations or summary statistics
    Ttest(Ttest),
    /// Reports for choosing the cutoff and judge threshold, and corpus composition
    Report(Report),
    /// Keyword filter, similarity scoring and cutoff in one resumable run
    Pipeline(Pipeline),
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// hash (offline, for tests) or remote
    #[arg(long, value_parser = ["hash", "remote"])]
    embedder: Option<String>,
    #[arg(long)]
    hash_dim: Option<usize>,
    #[arg(long, value_name = "URL")]
    embedding_endpoint: Option<String>,
    #[arg(long)]
    embedding_model: Option<String>,
    /// Characters of each text sent to the embedder
    #[arg(long)]
    max_chars: Option<usize>,
}

#[derive(Debug, Args)]
struct ServiceArgs {
    #[arg(long, value_name = "URL")]
    endpoint: Option<String>,
    /// Serve responses from recorded fixtures instead of the network
    #[arg(long, value_name = "FILE", conflicts_with = "endpoint")]
    replay: Option<PathBuf>,
    /// Append every exchange to a fixture file
    #[arg(long, value_name = "FILE")]
    record: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FilterKeywords {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    glossary: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write keyword hit counts over the kept documents as JSON
    #[arg(long, value_name = "FILE")]
    frequencies: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildRefkb {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Debug, Args)]
struct DedupRefkb {
    #[arg(long)]
    refkb: Option<PathBuf>,
    /// Rows this similar to an earlier kept row are removed
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, requires = "threshold")]
    output: Option<PathBuf>,
    /// Write the full removal list as JSON
    #[arg(long, value_name = "FILE", requires = "threshold")]
    report: Option<PathBuf>,
    /// Print the nearest-neighbour similarity histogram with this many bins
    #[arg(long, value_name = "BINS")]
    histogram: Option<usize>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Debug, Args)]
struct ClusterViz {
    #[arg(long)]
    refkb: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 300)]
    max_iters: usize,
    /// CSV of x,y,cluster
    #[arg(long)]
    output: PathBuf,
    /// Also report final inertia for these k values
    #[arg(long, value_delimiter = ',')]
    elbow: Vec<usize>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Debug, Args)]
struct ScoreSimilarity {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    refkb: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Debug, Args)]
struct ApplyCutoff {
    /// Scored JSONL
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    cutoff: Option<f64>,
}

#[derive(Debug, Args)]
struct BandSample {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.55,0.6,0.65,0.7,0.75,0.8")]
    edges: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    per_band: usize,
    /// JSON file with the sampled documents per band
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct Crawl {
    /// Listing page URL or local path; repeatable
    #[arg(long = "seed-url", required = true)]
    seed_urls: Vec<String>,
    /// Regex for document links
    #[arg(long)]
    link_pattern: String,
    /// Regex for further listing pages to visit
    #[arg(long)]
    follow_pattern: Option<String>,
    #[arg(long, default_value_t = 1000)]
    max_docs: usize,
    #[arg(long, default_value_t = 100)]
    max_pages: usize,
    /// Milliseconds between requests to one host
    #[arg(long)]
    delay_ms: Option<u64>,
    #[arg(long)]
    user_agent: Option<String>,
    #[arg(long)]
    output: PathBuf,
    /// JSONL of skipped URLs and reasons
    #[arg(long, value_name = "FILE")]
    skipped: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenQa {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    domain_instruction: Option<String>,
    #[arg(long, default_value_t = 5)]
    per_doc: usize,
    /// Seeded subsample of documents
    #[arg(long)]
    max_docs: Option<usize>,
    #[arg(long, default_value_t = 8000)]
    max_chars: usize,
    #[arg(long, default_value_t = 2048)]
    max_tokens: u32,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long)]
    in_flight: Option<usize>,
    /// Generation report JSON
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    #[command(flatten)]
    service: ServiceArgs,
}

#[derive(Debug, Args)]
struct Split {
    #[arg(long)]
    input: PathBuf,
    /// Default: enough for at least 100 eval pairs, and at least 0.1
    #[arg(long)]
    eval_fraction: Option<f64>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Check every source_id against this corpus
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateSample {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    category: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EmitTrainConfig {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1e-4,2e-4,3e-4")]
    learning_rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    epochs: Vec<u32>,
    #[arg(long)]
    base_model: Option<String>,
    #[arg(long)]
    lora_rank: Option<u32>,
    #[arg(long)]
    lora_alpha: Option<u32>,
    #[arg(long)]
    lora_dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<u32>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u32>,
    #[arg(long)]
    gradient_accumulation_steps: Option<u32>,
}

#[derive(Debug, Args)]
struct SelectCheckpoint {
    /// Run grid JSON with scores
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Debug, Args)]
struct EvalDomain {
    /// QA JSONL
    #[arg(long)]
    evalset: PathBuf,
    #[arg(long)]
    model_name: String,
    /// Per-question records JSONL
    #[arg(long)]
    output: PathBuf,
    /// Summary JSON (default: <output>.summary.json)
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    in_flight: Option<usize>,
    #[command(flatten)]
    service: ServiceArgs,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Debug, Args)]
struct Leaderboard {
    /// NAME=SCORE; repeatable
    #[arg(long = "score", value_name = "NAME=SCORE")]
    scores: Vec<String>,
    /// eval-domain summary JSON; repeatable
    #[arg(long = "result", value_name = "FILE")]
    results: Vec<PathBuf>,
    /// Model the deltas are measured against (default: first listed)
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct Deviation {
    #[arg(long, requires = "base", conflicts_with = "table", allow_negative_numbers = true)]
    finetuned: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    base: Option<f64>,
    /// CSV rows of name,base,finetuned
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Ttest {
    /// m1,v1,m2,v2,n,r
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, num_args = 1, conflicts_with_all = ["x", "y"])]
    summary: Vec<f64>,
    /// Observations for the first model: numbers per line, or eval records JSONL
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Report {
    /// Scored JSONL: retention at each candidate cutoff
    #[arg(long)]
    scored: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.55,0.6,0.65,0.7,0.75,0.8")]
    cutoffs: Vec<f64>,
    /// Eval records JSONL: score at each candidate judge threshold
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.75,0.8,0.85,0.9,0.95")]
    thresholds: Vec<f64>,
    /// Corpus JSONL: rows and whitespace tokens per category
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Write the report here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Pipeline {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    glossary: Option<PathBuf>,
    #[arg(long)]
    refkb: Option<PathBuf>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Keep every scored row here
    #[arg(long)]
    all_scored: Option<PathBuf>,
    /// Summary JSON (default: <output>.summary.json)
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    embed: EmbedArgs,
}

/// A mistake in how the command was invoked, as opposed to a failure while running it.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

struct Ctx {
    cfg: ConfigFile,
    seed: u64,
    jobs: Option<usize>,
    command: &'static str,
}

impl Ctx {
    fn metadata(&self, effective: BTreeMap<String, String>) -> Metadata {
        let mut m = Metadata::new(self.command);
        m.seed = Some(self.seed);
        m.config = self.cfg.entries().clone();
        m.config.extend(effective);
        m
    }

    fn retry(&self) -> anyhow::Result<RetryPolicy> {
        let mut retry = RetryPolicy::default();
        if let Some(n) = self.cfg.parsed::<u32>("retry_attempts")? {
            retry.max_attempts = n.max(1);
        }
        Ok(retry)
    }

    fn required_path(&self, flag: Option<PathBuf>, key: &str) -> anyhow::Result<PathBuf> {
        let path = match flag {
            Some(p) => p,
            None => self.cfg.get(key).map(PathBuf::from).ok_or_else(|| {
                usage(format!(
                    "--{} is required (or set {key} in the config file)",
                    key.replace('_', "-")
                ))
            })?,
        };
        existing(&path)?;
        Ok(path)
    }

    fn embedder_spec(&self, args: &EmbedArgs) -> anyhow::Result<EmbedderSpec> {
        let endpoint = self.cfg.pick(args.embedding_endpoint.clone(), "embedding_endpoint")?;
        let kind: Option<String> = self.cfg.pick(args.embedder.clone(), "embedder")?;
        match (kind.as_deref(), endpoint) {
            (Some("hash"), _) => Ok(EmbedderSpec::Hash {
                dimension: self
                    .cfg
                    .pick(args.hash_dim, "hash_dim")?
                    .unwrap_or(HashEmbedder::DEFAULT_DIMENSION),
            }),
            (Some("remote") | None, Some(endpoint)) => Ok(EmbedderSpec::Remote {
                endpoint,
                model: self
                    .cfg
                    .pick(args.embedding_model.clone(), "embedding_model")?
                    .unwrap_or_else(|| DEFAULT_REMOTE_MODEL.into()),
            }),
            (Some("remote") | None, None) => Err(usage(
                "no embedder configured: pass --embedding-endpoint URL, or --embedder hash for offline use",
            )),
            (Some(other), _) => Err(usage(format!("unknown embedder {other:?}"))),
        }
    }

    fn embedder(&self, args: &EmbedArgs) -> anyhow::Result<(Arc<dyn Embedder>, usize)> {
        let spec = self.embedder_spec(args)?;
        let max_chars = self.cfg.pick(args.max_chars, "max_chars")?.unwrap_or(DEFAULT_MAX_CHARS);
        if max_chars == 0 {
            return Err(usage("--max-chars must be at least 1"));
        }
        Ok((spec.build(self.retry()?)?, max_chars))
    }

    fn service(&self, args: &ServiceArgs, key: &str) -> anyhow::Result<Box<dyn TextService>> {
        let inner: Box<dyn TextService> = if let Some(path) = &args.replay {
            existing(path)?;
            Box::new(ReplayService::load(path)?)
        } else {
            let endpoint = self
                .cfg
                .pick(args.endpoint.clone(), key)?
                .ok_or_else(|| usage(format!("pass --endpoint URL or --replay FILE (or set {key})")))?;
            Box::new(HttpTextService::new(endpoint, self.retry()?))
        };
        Ok(match &args.record {
            Some(path) => Box::new(RecordingService::new(inner, path)?),
            None => inner,
        })
    }

    fn in_flight(&self, flag: Option<usize>) -> anyhow::Result<usize> {
        let n = self.cfg.pick(flag, "in_flight")?.unwrap_or(4);
        if n == 0 {
            return Err(usage("--in-flight must be at least 1"));
        }
        Ok(n)
    }
}

fn existing(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        bail!("{}: no such file or directory", path.display())
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn effective(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let jobs = cfg.pick(cli.jobs, "jobs")?;
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let ctx = Ctx {
        seed: cfg.pick(cli.seed, "seed")?.unwrap_or(0),
        jobs,
        cfg,
        command: command_name(&cli.command),
    };
    match ctx.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| dispatch(&ctx, cli.command)),
        None => dispatch(&ctx, cli.command),
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::FilterKeywords(_) => "filter-keywords",
        Command::BuildRefkb(_) => "build-refkb",
        Command::DedupRefkb(_) => "dedup-refkb",
        Command::ClusterViz(_) => "cluster-viz",
        Command::ScoreSimilarity(_) => "score-similarity",
        Command::ApplyCutoff(_) => "apply-cutoff",
        Command::BandSample(_) => "band-sample",
        Command::Crawl(_) => "crawl",
        Command::GenQa(_) => "gen-qa",
        Command::Split(_) => "split",
        Command::AblateSample(_) => "ablate-sample",
        Command::EmitTrainConfig(_) => "emit-train-config",
        Command::SelectCheckpoint(_) => "select-checkpoint",
        Command::EvalDomain(_) => "eval-domain",
        Command::Leaderboard(_) => "leaderboard",
        Command::Deviation(_) => "deviation",
        Command::Ttest(_) => "ttest",
        Command::Report(_) => "report",
        Command::Pipeline(_) => "pipeline",
    }
}

fn dispatch(ctx: &Ctx, command: Command) -> anyhow::Result<()> {
    match command {
        Command::FilterKeywords(a) => filter_keywords(ctx, a),
        Command::BuildRefkb(a) => build_refkb(ctx, a),
        Command::DedupRefkb(a) => dedup_refkb(ctx, a),
        Command::ClusterViz(a) => cluster_viz(ctx, a),
        Command::ScoreSimilarity(a) => score_similarity(ctx, a),
        Command::ApplyCutoff(a) => apply_cutoff(ctx, a),
        Command::BandSample(a) => band_sample(ctx, a),
        Command::Crawl(a) => crawl(ctx, a),
        Command::GenQa(a) => gen_qa(ctx, a),
        Command::Split(a) => split(ctx, a),
        Command::AblateSample(a) => ablate_sample(ctx, a),
        Command::EmitTrainConfig(a) => emit_train_config(ctx, a),
        Command::SelectCheckpoint(a) => select_checkpoint(a),
        Command::EvalDomain(a) => eval_domain(ctx, a),
        Command::Leaderboard(a) => leaderboard(a),
        Command::Deviation(a) => deviation(a),
        Command::Ttest(a) => ttest(a),
        Command::Report(a) => report(a),
        Command::Pipeline(a) => run_pipeline(ctx, a),
    }
}

fn filter_keywords(ctx: &Ctx, a: FilterKeywords) -> anyhow::Result<()> {
    existing(&a.input)?;
    let glossary_path = ctx.required_path(a.glossary, "glossary")?;
    let batch_size = ctx
        .cfg
        .pick(a.batch_size, "batch_size")?
        .unwrap_or(pipeline::DEFAULT_BATCH_SIZE);
    if batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let matcher = KeywordMatcher::new(&glossary::load_glossary(&glossary_path)?);
    let mut reader = JsonlReader::open(&a.input)?;
    let mut writer = JsonlWriter::create(&a.output)?;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let (mut rows, mut kept) = (0usize, 0usize);
    loop {
        let batch = reader.next_batch(batch_size)?;
        if batch.is_empty() {
            break;
        }
        rows += batch.len();
        let hits = glossary::filter_batch(&batch, &matcher);
        kept += hits.len();
        for doc in &hits {
            writer.write_document(doc)?;
        }
        if a.frequencies.is_some() {
            let part = corpus::Dataset::from_trusted(hits.into_iter().cloned().collect(), "batch");
            for (k, n) in glossary::keyword_frequencies(&part, &matcher) {
                *counts.entry(k).or_default() += n;
            }
        }
    }
    writer.flush()?;
    let metadata = ctx.metadata(effective(&[
        ("glossary", glossary_path.display().to_string()),
        ("input", a.input.display().to_string()),
    ]));
    meta::write_sidecar(&a.output, &metadata)?;
    if let Some(path) = &a.frequencies {
        let mut freq: Vec<(String, u64)> = counts.into_iter().collect();
        freq.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.to_lowercase().cmp(&y.0.to_lowercase())));
        meta::write_json(path, &freq)?;
    }
    print_json(&json!({ "input_rows": rows, "kept": kept }))
}

fn build_refkb(ctx: &Ctx, a: BuildRefkb) -> anyhow::Result<()> {
    existing(&a.input)?;
    let (embedder, max_chars) = ctx.embedder(&a.embed)?;
    let kb = ReferenceKB::build(corpus::read_jsonl(&a.input)?, embedder.as_ref(), max_chars)?;
    let metadata = ctx.metadata(effective(&[
        ("input", a.input.display().to_string()),
        ("max_chars", max_chars.to_string()),
    ]));
    kb.save(&a.output, metadata)?;
    print_json(&json!({ "rows": kb.len(), "dimension": kb.index().dim(), "embedder": kb.embedder_identity() }))
}

fn dedup_refkb(ctx: &Ctx, a: DedupRefkb) -> anyhow::Result<()> {
    if a.threshold.is_none() && a.histogram.is_none() {
        return Err(usage(
            "pass --threshold to deduplicate, or --histogram BINS to inspect similarities",
        ));
    }
    if a.threshold.is_some() && a.output.is_none() {
        return Err(usage("--threshold needs --output"));
    }
    let path = ctx.required_path(a.refkb, "refkb")?;
    let (embedder, max_chars) = ctx.embedder(&a.embed)?;
    let kb = ReferenceKB::load(&path, embedder.as_ref(), max_chars)?;
    let mut out = serde_json::Map::new();
    out.insert("rows".into(), json!(kb.len()));
    if let Some(bins) = a.histogram {
        out.insert(
            "histogram".into(),
            serde_json::to_value(refkb::nn_similarity_histogram(kb.index(), bins)?)?,
        );
    }
    if let (Some(threshold), Some(output)) = (a.threshold, &a.output) {
        let report = refkb::dedup_nn(&kb, threshold)?;
        let metadata = ctx.metadata(effective(&[
            ("refkb", path.display().to_string()),
            ("threshold", threshold.to_string()),
        ]));
        kb.retain(&report.kept)?.save(output, metadata)?;
        if let Some(report_path) = &a.report {
            meta::write_json(report_path, &report)?;
        }
        out.insert("kept".into(), json!(report.kept.len()));
        out.insert("removed".into(), json!(report.removed.len()));
        out.insert("reduction_percent".into(), json!(report.reduction_percent));
    }
    print_json(&out)
}

fn cluster_viz(ctx: &Ctx, a: ClusterViz) -> anyhow::Result<()> {
    let path = ctx.required_path(a.refkb, "refkb")?;
    let (embedder, max_chars) = ctx.embedder(&a.embed)?;
    let kb = ReferenceKB::load(&path, embedder.as_ref(), max_chars)?;
    let points: Vec<Vec<f64>> = kb.index().rows().map(<[f64]>::to_vec).collect();
    let model = refkb::kmeans(&points, a.k, ctx.seed, a.max_iters)?;
    let projection = refkb::pca_project(&points, 2.min(kb.index().dim()))?;
    refkb::cluster_viz_export(&model, &projection.points, &a.output)?;
    let metadata = ctx.metadata(effective(&[
        ("refkb", path.display().to_string()),
        ("k", a.k.to_string()),
        ("max_iters", a.max_iters.to_string()),
    ]));
    meta::write_sidecar(&a.output, &metadata)?;
    let mut out = json!({
        "k": model.k,
        "inertia": model.inertia,
        "iterations": model.iterations,
        "converged": model.converged,
        "explained_variance_ratio": projection.explained_variance_ratio,
    });
    if !a.elbow.is_empty() {
        out["elbow"] = serde_json::to_value(refkb::elbow_report(&points, &a.elbow, ctx.seed, a.max_iters)?)?;
    }
    print_json(&out)
}

fn score_similarity(ctx: &Ctx, a: ScoreSimilarity) -> anyhow::Result<()> {
    existing(&a.input)?;
    let path = ctx.required_path(a.refkb, "refkb")?;
    let (embedder, max_chars) = ctx.embedder(&a.embed)?;
    let kb = ReferenceKB::load(&path, embedder.as_ref(), max_chars)?;
    let docs = corpus::read_jsonl(&a.input)?;
    let scored = pipeline::run_similarity_stage(docs.documents(), &kb, embedder.as_ref(), max_chars)?;
    pipeline::write_scored(&scored, &a.output)?;
    let mut metadata = ctx.metadata(effective(&[
        ("refkb", path.display().to_string()),
        ("max_chars", max_chars.to_string()),
    ]));
    metadata.embedder = Some(embedder.identity());
    meta::write_sidecar(&a.output, &metadata)?;
    print_json(&json!({ "rows": scored.len() }))
}

fn apply_cutoff(ctx: &Ctx, a: ApplyCutoff) -> anyhow::Result<()> {
    existing(&a.input)?;
    let cutoff = ctx.cfg.pick(a.cutoff, "cutoff")?.unwrap_or(pipeline::DEFAULT_CUTOFF);
    let scored = pipeline::read_scored(&a.input)?;
    let kept = pipeline::apply_cutoff(&scored, cutoff)?;
    corpus::write_jsonl(&kept, &a.output)?;
    meta::write_sidecar(&a.output, &ctx.metadata(effective(&[("cutoff", cutoff.to_string())])))?;
    print_json(&json!({ "input_rows": scored.len(), "kept": kept.len(), "cutoff": cutoff }))
}

fn band_sample(ctx: &Ctx, a: BandSample) -> anyhow::Result<()> {
    existing(&a.input)?;
    let scored = pipeline::read_scored(&a.input)?;
    let bands = pipeline::score_band_sample(&scored, &a.edges, a.per_band, ctx.seed)?;
    let out: Vec<Value> = bands
        .iter()
        .map(|b| {
            json!({
                "lo": b.lo,
                "hi": b.hi,
                "population": b.population,
                "documents": b.sample.iter().map(|s| Value::Object(s.to_document().to_json())).collect::<Vec<_>>(),
            })
        })
        .collect();
    meta::write_json(&a.output, &out)?;
    meta::write_sidecar(
        &a.output,
        &ctx.metadata(effective(&[("per_band", a.per_band.to_string())])),
    )?;
    let summary: Vec<Value> = bands
        .iter()
        .map(|b| json!({ "lo": b.lo, "hi": b.hi, "population": b.population, "sampled": b.sample.len() }))
        .collect();
    print_json(&summary)
}

fn crawl(ctx: &Ctx, a: Crawl) -> anyhow::Result<()> {
    let mut job = CrawlJob::new(a.seed_urls, &a.link_pattern, a.max_docs).map_err(|e| usage(e.to_string()))?;
    job.follow_pattern = a
        .follow_pattern
        .as_deref()
        .map(regex::Regex::new)
        .transpose()
        .map_err(|e| usage(format!("follow pattern: {e}")))?;
    job.max_pages = a.max_pages;
    job.politeness_delay = Duration::from_millis(ctx.cfg.pick(a.delay_ms, "politeness_delay_ms")?.unwrap_or(1000));
    if let Some(ua) = ctx.cfg.pick(a.user_agent, "user_agent")? {
        job.user_agent = ua;
    }
    job.retry = ctx.retry()?;
    let out = ingest::crawl(&job)?;
    let (dataset, skipped) = ingest::to_documents(&out.documents, &PlainTextExtractor);
    corpus::write_jsonl(&dataset, &a.output)?;
    meta::write_sidecar(
        &a.output,
        &ctx.metadata(effective(&[
            ("link_pattern", job.link_pattern.as_str().to_owned()),
            ("max_docs", job.max_docs.to_string()),
        ])),
    )?;
    if let Some(path) = &a.skipped {
        corpus::write_records(&skipped, path)?;
    }
    print_json(&json!({
        "pages_visited": out.pages_visited,
        "fetched": out.documents.len(),
        "documents": dataset.len(),
        "skipped": skipped.len(),
        "fetch_failures": out.failures.len(),
    }))
}

fn gen_qa(ctx: &Ctx, a: GenQa) -> anyhow::Result<()> {
    existing(&a.input)?;
    let template = match &a.template {
        Some(path) => PromptTemplate::load(path).map_err(|e| usage(e.to_string()))?,
        None => PromptTemplate::default(),
    };
    let service = ctx.service(&a.service, "llm_endpoint")?;
    let config = GenerationConfig {
        per_doc: a.per_doc,
        max_tokens: a.max_tokens,
        temperature: a.temperature,
        domain_instruction: a
            .domain_instruction
            .unwrap_or_else(|| qagen::DEFAULT_DOMAIN_INSTRUCTION.into()),
        max_chars: a.max_chars,
        max_docs: a.max_docs,
        in_flight: ctx.in_flight(a.in_flight)?,
    };
    let docs = corpus::read_jsonl(&a.input)?;
    let (pairs, report) = qagen::generate_qa(&service, &docs, &template, &config, ctx.seed)?;
    qagen::write_pairs(&pairs, &a.output)?;
    let mut metadata = ctx.metadata(effective(&[
        ("service", service.name()),
        ("per_doc", a.per_doc.to_string()),
        ("max_chars", a.max_chars.to_string()),
    ]));
    if report.truncated_prompts > 0 {
        metadata
            .config
            .insert("truncated_prompts".into(), report.truncated_prompts.to_string());
    }
    meta::write_sidecar(&a.output, &metadata)?;
    if let Some(path) = &a.report {
        meta::write_json(path, &report)?;
    }
    print_json(&json!({
        "documents": report.documents,
        "pairs": report.pairs,
        "parse_failures": report.parse_failures,
        "request_failures": report.request_failures,
    }))
}

fn split(ctx: &Ctx, a: Split) -> anyhow::Result<()> {
    existing(&a.input)?;
    let pairs = qagen::read_pairs(&a.input)?;
    if let Some(corpus_path) = &a.corpus {
        existing(corpus_path)?;
        qagen::check_references(&pairs, &corpus::read_jsonl(corpus_path)?)?;
    }
    let fraction = a
        .eval_fraction
        .unwrap_or_else(|| qagen::default_eval_fraction(pairs.len()));
    let (train, eval) = qagen::split_train_eval(&pairs, fraction, ctx.seed)?;
    qagen::write_pairs(&train, &a.train)?;
    qagen::write_pairs(&eval, &a.eval)?;
    let metadata = ctx.metadata(effective(&[("eval_fraction", fraction.to_string())]));
    meta::write_sidecar(&a.train, &metadata)?;
    meta::write_sidecar(&a.eval, &metadata)?;
    print_json(&json!({ "train": train.len(), "eval": eval.len(), "eval_fraction": fraction }))
}

fn ablate_sample(ctx: &Ctx, a: AblateSample) -> anyhow::Result<()> {
    existing(&a.input)?;
    let subset = qagen::ablation_subset(&corpus::read_jsonl(&a.input)?, &a.category, a.n, ctx.seed)?;
    corpus::write_jsonl(&subset, &a.output)?;
    meta::write_sidecar(
        &a.output,
        &ctx.metadata(effective(&[("category", a.category.clone()), ("n", a.n.to_string())])),
    )?;
    print_json(&json!({ "rows": subset.len(), "category": a.category }))
}

fn emit_train_config(ctx: &Ctx, a: EmitTrainConfig) -> anyhow::Result<()> {
    let d = TrainingConfig::default();
    let config = TrainingConfig {
        lora_rank: a.lora_rank.unwrap_or(d.lora_rank),
        lora_alpha: a.lora_alpha.unwrap_or(d.lora_alpha),
        lora_dropout: a.lora_dropout.unwrap_or(d.lora_dropout),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        warmup_steps: a.warmup_steps.unwrap_or(d.warmup_steps),
        gradient_accumulation_steps: a.gradient_accumulation_steps.unwrap_or(d.gradient_accumulation_steps),
        base_model: a.base_model.unwrap_or(d.base_model),
        ..d
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let grid = RunGrid::new(a.learning_rates, a.epochs).map_err(|e| usage(e.to_string()))?;
    let written = qagen::emit_training_config(&config, &grid, &a.output_dir)?;
    let grid_path = a.output_dir.join("grid.json");
    meta::write_json(&grid_path, &grid)?;
    meta::write_sidecar(&grid_path, &ctx.metadata(BTreeMap::new()))?;
    print_json(&json!({ "run_specs": written.len(), "output_dir": a.output_dir }))
}

fn select_checkpoint(a: SelectCheckpoint) -> anyhow::Result<()> {
    existing(&a.grid)?;
    let grid: RunGrid = meta::read_json(&a.grid)?;
    print_json(&evalkit::select_best_checkpoint(&grid)?)
}

fn eval_domain(ctx: &Ctx, a: EvalDomain) -> anyhow::Result<()> {
    existing(&a.evalset)?;
    let threshold = ctx
        .cfg
        .pick(a.threshold, "judge_threshold")?
        .unwrap_or(evalkit::DEFAULT_JUDGE_THRESHOLD);
    let service = ctx.service(&a.service, "model_endpoint")?;
    let (embedder, _) = ctx.embedder(&a.embed)?;
    let evalset = qagen::read_pairs(&a.evalset)?;
    let result = evalkit::domain_eval(
        &service,
        &a.model_name,
        &evalset,
        embedder.as_ref(),
        threshold,
        ctx.in_flight(a.in_flight)?,
    )?;
    let summary = a.summary.clone().unwrap_or_else(|| {
        let mut name = a.output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".summary.json");
        a.output.with_file_name(name)
    });
    result.save(&a.output, &summary)?;
    let mut metadata = ctx.metadata(effective(&[
        ("model_name", a.model_name.clone()),
        ("threshold", threshold.to_string()),
    ]));
    metadata.embedder = Some(result.embedder.clone());
    meta::write_sidecar(&a.output, &metadata)?;
    print_json(&json!({
        "model_name": result.model_name,
        "questions": result.records.len(),
        "score_percent": result.score_percent,
        "failed": result.failed,
        "embedder": result.embedder,
    }))
}

fn leaderboard(a: Leaderboard) -> anyhow::Result<()> {
    let mut scores = Vec::new();
    for s in &a.scores {
        let (name, score) = s
            .rsplit_once('=')
            .ok_or_else(|| usage(format!("--score expects NAME=SCORE, got {s:?}")))?;
        let score_percent = score
            .trim()
            .parse()
            .map_err(|_| usage(format!("not a number in {s:?}")))?;
        scores.push(ModelScore {
            model_name: name.trim().to_owned(),
            score_percent,
        });
    }
    for path in &a.results {
        existing(path)?;
        scores.push(meta::read_json(path).with_context(|| format!("{}: expected an eval summary", path.display()))?);
    }
    if scores.is_empty() {
        return Err(usage("pass at least one --score or --result"));
    }
    let board = evalkit::leaderboard(&scores, a.base.as_deref())?;
    if a.json {
        print_json(&board)
    } else {
        emit(&board.to_table())
    }
}

fn deviation(a: Deviation) -> anyhow::Result<()> {
    match (a.finetuned, a.base, &a.table) {
        (Some(ft), Some(base), None) => print_json(&json!({
            "finetuned": ft,
            "base": base,
            "deviation_percent": evalkit::deviation_metric(ft, base)?,
        })),
        (None, None, Some(path)) => {
            existing(path)?;
            let file = std::fs::File::open(path).map_err(|e| crate::Error::io(path, e))?;
            let mut rows = Vec::new();
            for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| crate::Error::io(path, e))?;
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                let parsed = match fields.as_slice() {
                    [name, base, ft] => base
                        .parse::<f64>()
                        .ok()
                        .zip(ft.parse::<f64>().ok())
                        .map(|(b, f)| (*name, b, f)),
                    _ => None,
                };
                let Some((name, base, ft)) = parsed else {
                    if n == 0 {
                        continue; // header
                    }
                    bail!("{}: line {}: expected name,base,finetuned", path.display(), n + 1);
                };
                rows.push(json!({
                    "name": name,
                    "base": base,
                    "finetuned": ft,
                    "deviation_percent": evalkit::deviation_metric(ft, base)?,
                }));
            }
            print_json(&rows)
        }
        _ => Err(usage("pass --finetuned and --base, or --table FILE")),
    }
}

/// Numbers one per line, or eval records (`correct` as 0/1).
pub fn read_observations(path: &Path) -> crate::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| crate::Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            message,
        };
        if line.starts_with('{') {
            let record: EvalRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            out.push(f64::from(u8::from(record.correct)));
        } else {
            out.push(line.parse().map_err(|_| err(format!("not a number: {line:?}")))?);
        }
    }
    Ok(out)
}

fn ttest(a: Ttest) -> anyhow::Result<()> {
    let report = match (a.summary.as_slice(), &a.x, &a.y) {
        ([m1, v1, m2, v2, n, r], None, None) => {
            if n.fract() != 0.0 || *n < 0.0 {
                return Err(usage(format!("n must be a whole number, got {n}")));
            }
            evalkit::ttest_from_summary(*m1, *v1, *m2, *v2, *n as usize, *r)?
        }
        ([], Some(x), Some(y)) => {
            existing(x)?;
            existing(y)?;
            evalkit::paired_ttest(&read_observations(x)?, &read_observations(y)?)?
        }
        ([_, ..], _, _) => return Err(usage("--summary takes six values: m1,v1,m2,v2,n,r")),
        _ => return Err(usage("pass --summary m1,v1,m2,v2,n,r or --x FILE --y FILE")),
    };
    print_json(&report)
}

fn report(a: Report) -> anyhow::Result<()> {
    if a.scored.is_none() && a.eval.is_none() && a.corpus.is_none() {
        return Err(usage("pass at least one of --scored, --eval, --corpus"));
    }
    let mut out = serde_json::Map::new();
    if let Some(path) = &a.scored {
        existing(path)?;
        let scored = pipeline::read_scored(path)?;
        let rows: Vec<Value> = a
            .cutoffs
            .iter()
            .map(|&c| {
                let kept = scored.iter().filter(|s| s.max_similarity >= c).count();
                json!({
                    "cutoff": c,
                    "kept": kept,
                    "kept_percent": if scored.is_empty() { 0.0 } else { 100.0 * kept as f64 / scored.len() as f64 },
                })
            })
            .collect();
        out.insert("scored_rows".into(), json!(scored.len()));
        out.insert("cutoffs".into(), Value::Array(rows));
    }
    if let Some(path) = &a.eval {
        existing(path)?;
        let records: Vec<EvalRecord> = corpus::read_records(path)?;
        let rows: Vec<Value> = a
            .thresholds
            .iter()
            .map(|&t| {
                let judged: Vec<EvalRecord> = records
                    .iter()
                    .map(|r| EvalRecord {
                        correct: r.similarity.is_some_and(|s| evalkit::is_correct(s, t)),
                        ..r.clone()
                    })
                    .collect();
                json!({ "threshold": t, "score_percent": evalkit::score_percent(&judged) })
            })
            .collect();
        out.insert("eval_records".into(), json!(records.len()));
        out.insert("thresholds".into(), Value::Array(rows));
    }
    if let Some(path) = &a.corpus {
        existing(path)?;
        out.insert(
            "composition".into(),
            serde_json::to_value(corpus::composition_report(&corpus::read_jsonl(path)?))?,
        );
    }
    match &a.output {
        Some(path) => Ok(meta::write_json(path, &out)?),
        None => print_json(&out),
    }
}

fn run_pipeline(ctx: &Ctx, a: Pipeline) -> anyhow::Result<()> {
    existing(&a.input)?;
    let glossary = ctx.required_path(a.glossary, "glossary")?;
    let refkb = ctx.required_path(a.refkb, "refkb")?;
    let mut config = PipelineConfig::new(glossary, refkb);
    config.embedder = ctx.embedder_spec(&a.embed)?;
    config.cutoff = ctx.cfg.pick(a.cutoff, "cutoff")?.unwrap_or(config.cutoff);
    config.batch_size = ctx.cfg.pick(a.batch_size, "batch_size")?.unwrap_or(config.batch_size);
    config.checkpoint_every = ctx
        .cfg
        .pick(a.checkpoint_every, "checkpoint_every")?
        .unwrap_or(config.checkpoint_every);
    config.max_chars = ctx
        .cfg
        .pick(a.embed.max_chars, "max_chars")?
        .unwrap_or(config.max_chars);
    config.seed = ctx.seed;
    config.jobs = ctx.jobs;
    config.all_scored = a.all_scored;
    config.summary = a.summary;
    config.retry = ctx.retry()?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    let summary = pipeline::run_pipeline(&config, &a.input, &a.output)?;
    let mut out = serde_json::to_value(&summary)?;
    if let Some(map) = out.as_object_mut() {
        map.remove("stage_seconds");
    }
    print_json(&out)
}
