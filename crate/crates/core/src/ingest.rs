//! Crawler for report portals: fetch listing pages, collect document links
//! matching a pattern, download them and turn them into corpus rows.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::corpus::{Dataset, Document};
use crate::error::{Error, Result};
use crate::http::{HttpClient, RetryPolicy};

pub const THESIS_SOURCE: &str = "thesis";
pub const THESIS_CATEGORY: &str = "thesis_reports";

#[derive(Debug, Clone)]
pub struct CrawlJob {
    /// URLs or local paths of listing pages.
    pub seed_urls: Vec<String>,
    /// Links whose absolute URL matches are downloaded as documents.
    pub link_pattern: Regex,
    /// Links matching this are crawled as further listing pages.
    pub follow_pattern: Option<Regex>,
    pub max_docs: usize,
    /// Cap on listing pages visited, seeds included.
    pub max_pages: usize,
    /// Minimum gap between two requests to the same host.
    pub politeness_delay: Duration,
    pub user_agent: String,
    pub retry: RetryPolicy,
}

impl CrawlJob {
    pub fn new(seed_urls: Vec<String>, link_pattern: &str, max_docs: usize) -> Result<Self> {
        let link_pattern = Regex::new(link_pattern).map_err(|e| Error::invalid(format!("link pattern: {e}")))?;
        Ok(CrawlJob {
            seed_urls,
            link_pattern,
            follow_pattern: None,
            max_docs,
            max_pages: 100,
            politeness_delay: Duration::from_millis(1000),
            user_agent: concat!("orepipe/", env!("CARGO_PKG_VERSION")).into(),
            retry: RetryPolicy::default(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.seed_urls.is_empty() {
            return Err(Error::invalid("crawl needs at least one seed"));
        }
        if self.max_docs == 0 || self.max_pages == 0 {
            return Err(Error::invalid("max_docs and max_pages must be at least 1"));
        }
        Ok(())
    }
}

pub trait Fetcher {
    fn fetch(&self, url: &Url) -> Result<Vec<u8>>;
}

/// Fetches `http(s)://` over the network and `file://` from disk.
pub struct DefaultFetcher {
    client: HttpClient,
}

impl DefaultFetcher {
    pub fn new(user_agent: &str, retry: RetryPolicy) -> Self {
        DefaultFetcher {
            client: HttpClient::new(user_agent, Duration::from_secs(60), retry),
        }
    }
}

impl Fetcher for DefaultFetcher {
    fn fetch(&self, url: &Url) -> Result<Vec<u8>> {
        match url.scheme() {
            "file" => {
                let path = url
                    .to_file_path()
                    .map_err(|()| Error::invalid(format!("not a local path: {url}")))?;
                std::fs::read(&path).map_err(|e| Error::io(path, e))
            }
            "http" | "https" => self.client.get_bytes(url.as_str()),
            other => Err(Error::invalid(format!("unsupported scheme {other:?} in {url}"))),
        }
    }
}

/// Parses `seed` as a URL, falling back to a local path.
pub fn resolve_seed(seed: &str) -> Result<Url> {
    if let Ok(url) = Url::parse(seed) {
        // one-letter schemes are Windows drive letters
        if url.scheme().len() > 1 {
            return Ok(url);
        }
    }
    let path = Path::new(seed);
    let absolute = if path.is_absolute() {
        path.to_owned()
    } else {
        std::env::current_dir().map_err(|e| Error::io(".", e))?.join(path)
    };
    Url::from_file_path(&absolute).map_err(|()| Error::invalid(format!("cannot address {seed:?} as a URL")))
}

fn href_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)href\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s"'>]+))"#).expect("valid href regex"))
}

/// Absolute URLs of every `href` in `page`, fragments dropped, in document order.
pub fn extract_links(page: &str, base: &Url) -> Vec<Url> {
    href_regex()
        .captures_iter(page)
        .filter_map(|c| c.get(1).or_else(|| c.get(2)).or_else(|| c.get(3)))
        .filter_map(|m| base.join(m.as_str().trim()).ok())
        .map(|mut u| {
            u.set_fragment(None);
            u
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchFailure {
    pub url: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct CrawlOutput {
    /// Downloaded documents in discovery order.
    pub documents: Vec<(String, Vec<u8>)>,
    pub pages_visited: usize,
    pub failures: Vec<FetchFailure>,
}

struct Polite<'a, F: Fetcher + ?Sized> {
    fetcher: &'a F,
    delay: Duration,
    last: HashMap<String, Instant>,
    requests: usize,
}

impl<F: Fetcher + ?Sized> Polite<'_, F> {
    fn fetch(&mut self, url: &Url) -> Result<Vec<u8>> {
        let host = url.host_str().unwrap_or_default().to_owned();
        if let Some(prev) = self.last.get(&host) {
            let since = prev.elapsed();
            if since < self.delay {
                std::thread::sleep(self.delay - since);
            }
        }
        self.requests += 1;
        let out = self.fetcher.fetch(url);
        self.last.insert(host, Instant::now());
        out
    }
}

pub fn crawl(job: &CrawlJob) -> Result<CrawlOutput> {
    crawl_with(job, &DefaultFetcher::new(&job.user_agent, job.retry))
}

/// Breadth-first crawl from the seeds. Each URL is fetched at most once and
/// at most `max_docs` documents are downloaded. Fetch failures are logged and
/// skipped, unless every seed fails.
pub fn crawl_with<F: Fetcher + ?Sized>(job: &CrawlJob, fetcher: &F) -> Result<CrawlOutput> {
    job.validate()?;
    let mut polite = Polite {
        fetcher,
        delay: job.politeness_delay,
        last: HashMap::new(),
        requests: 0,
    };
    let mut seen: HashSet<Url> = HashSet::new();
    let mut queue: VecDeque<(Url, bool)> = VecDeque::new();
    for seed in &job.seed_urls {
        let url = resolve_seed(seed)?;
        if seen.insert(url.clone()) {
            queue.push_back((url, true));
        }
    }
    let seeds = queue.len();
    let mut out = CrawlOutput::default();
    let mut seed_failures = 0;

    'pages: while let Some((page_url, is_seed)) = queue.pop_front() {
        if out.pages_visited >= job.max_pages {
            break;
        }
        out.pages_visited += 1;
        let page = match polite.fetch(&page_url) {
            Ok(bytes) => bytes,
            Err(e) => {
                log::warn!("listing page {page_url}: {e}");
                out.failures.push(FetchFailure {
                    url: page_url.to_string(),
                    error: e.to_string(),
                });
                seed_failures += usize::from(is_seed);
                continue;
            }
        };
        let page = String::from_utf8_lossy(&page);
        for link in extract_links(&page, &page_url) {
            if seen.contains(&link) {
                continue;
            }
            if job.link_pattern.is_match(link.as_str()) {
                seen.insert(link.clone());
                match polite.fetch(&link) {
                    Ok(bytes) => {
                        log::debug!("fetched {link}");
                        out.documents.push((link.to_string(), bytes));
                        if out.documents.len() >= job.max_docs {
                            break 'pages;
                        }
                    }
                    Err(e) => {
                        log::warn!("document {link}: {e}");
                        out.failures.push(FetchFailure {
                            url: link.to_string(),
                            error: e.to_string(),
                        });
                    }
                }
            } else if job.follow_pattern.as_ref().is_some_and(|p| p.is_match(link.as_str())) {
                seen.insert(link.clone());
                queue.push_back((link, false));
            }
        }
    }
    if seeds > 0 && seed_failures == seeds {
        return Err(Error::Transport(format!("all {seeds} seed pages were unreachable")));
    }
    log::info!(
        "crawl fetched {} documents from {} pages with {} requests",
        out.documents.len(),
        out.pages_visited,
        polite.requests
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extracted {
    Text(String),
    Unsupported(String),
}

pub trait TextExtractor {
    fn extract(&self, url: &str, bytes: &[u8]) -> Extracted;
}

/// Passes UTF-8 text through and rejects anything binary.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainTextExtractor;

impl TextExtractor for PlainTextExtractor {
    fn extract(&self, _url: &str, bytes: &[u8]) -> Extracted {
        if bytes.starts_with(b"%PDF") {
            return Extracted::Unsupported("PDF needs a PDF extractor".into());
        }
        if bytes.contains(&0) {
            return Extracted::Unsupported("binary content".into());
        }
        match std::str::from_utf8(bytes) {
            Ok(text) if text.trim().is_empty() => Extracted::Unsupported("no text".into()),
            Ok(text) => Extracted::Text(text.to_owned()),
            Err(_) => Extracted::Unsupported("not UTF-8".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub url: String,
    pub reason: String,
}

/// One row per extractable file, `id` = URL. Unsupported or repeated URLs are
/// skipped and reported.
pub fn to_documents(raw: &[(String, Vec<u8>)], extractor: &dyn TextExtractor) -> (Dataset, Vec<SkipRecord>) {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    let mut skipped = Vec::new();
    for (url, bytes) in raw {
        if !seen.insert(url.as_str()) {
            skipped.push(SkipRecord {
                url: url.clone(),
                reason: "duplicate URL".into(),
            });
            continue;
        }
        match extractor.extract(url, bytes) {
            Extracted::Text(text) => docs.push(Document::new(url.clone(), text, THESIS_SOURCE, THESIS_CATEGORY)),
            Extracted::Unsupported(reason) => {
                log::info!("skipping {url}: {reason}");
                skipped.push(SkipRecord {
                    url: url.clone(),
                    reason,
                });
            }
        }
    }
    (Dataset::from_trusted(docs, "crawl"), skipped)
}
