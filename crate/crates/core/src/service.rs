//! Remote text-generation services: LLM chat endpoints and model inference.
//!
//! Both speak JSON over HTTP POST and answer `{"text": str}`. A replay
//! service serves canned answers keyed by the SHA-256 of the request body,
//! which keeps LLM-dependent runs offline and deterministic.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{self, JsonlWriter};
use crate::error::{Error, Result};
use crate::http::{HttpClient, RetryPolicy};

pub trait TextService: Send + Sync {
    /// Stamped into reports.
    fn name(&self) -> String;

    fn call(&self, request: &Value) -> Result<String>;
}

impl<S: TextService + ?Sized> TextService for Box<S> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn call(&self, request: &Value) -> Result<String> {
        (**self).call(request)
    }
}

/// Hex SHA-256 of the compact JSON serialization of `request`.
pub fn request_hash(request: &Value) -> String {
    let body = serde_json::to_vec(request).expect("JSON values always serialize");
    let digest = Sha256::digest(&body);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
pub struct HttpTextService {
    client: HttpClient,
    endpoint: String,
}

impl HttpTextService {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy) -> Self {
        HttpTextService {
            client: HttpClient::new(
                concat!("orepipe/", env!("CARGO_PKG_VERSION")),
                Duration::from_secs(300),
                retry,
            ),
            endpoint: endpoint.into(),
        }
    }
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

impl TextService for HttpTextService {
    fn name(&self) -> String {
        self.endpoint.clone()
    }

    fn call(&self, request: &Value) -> Result<String> {
        let body = self.client.post_json(&self.endpoint, request)?;
        let response: TextResponse = serde_json::from_value(body)
            .map_err(|e| Error::Protocol(format!("{}: expected {{\"text\": str}}: {e}", self.endpoint)))?;
        Ok(response.text)
    }
}

/// One canned response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub request_hash: String,
    /// The request itself, kept for human inspection only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
    pub text: String,
}

impl Fixture {
    pub fn new(request: &Value, text: impl Into<String>) -> Self {
        Fixture {
            request_hash: request_hash(request),
            request: Some(request.clone()),
            text: text.into(),
        }
    }
}

#[derive(Debug, Default)]
pub struct ReplayService {
    fixtures: HashMap<String, String>,
    source: PathBuf,
}

impl ReplayService {
    pub fn from_fixtures(fixtures: impl IntoIterator<Item = Fixture>) -> Self {
        ReplayService {
            fixtures: fixtures.into_iter().map(|f| (f.request_hash, f.text)).collect(),
            source: PathBuf::from("<memory>"),
        }
    }

    /// Loads JSONL fixtures. Later lines override earlier ones for the same hash.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut service = ReplayService::from_fixtures(corpus::read_records::<Fixture>(path)?);
        service.source = path.to_owned();
        Ok(service)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl TextService for ReplayService {
    fn name(&self) -> String {
        format!("replay:{}", self.source.display())
    }

    fn call(&self, request: &Value) -> Result<String> {
        let hash = request_hash(request);
        self.fixtures
            .get(&hash)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("no replay fixture for request {hash}")))
    }
}

/// Forwards to `inner` and appends every successful exchange as a fixture.
pub struct RecordingService<S> {
    inner: S,
    out: Mutex<JsonlWriter<std::io::BufWriter<std::fs::File>>>,
}

impl<S: TextService> RecordingService<S> {
    pub fn new(inner: S, fixtures: impl AsRef<Path>) -> Result<Self> {
        Ok(RecordingService {
            inner,
            out: Mutex::new(JsonlWriter::append(fixtures)?),
        })
    }
}

impl<S: TextService> TextService for RecordingService<S> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn call(&self, request: &Value) -> Result<String> {
        let text = self.inner.call(request)?;
        let mut out = self.out.lock().expect("fixture writer poisoned");
        out.write_value(&Fixture::new(request, text.clone()))?;
        out.flush()?;
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_depends_on_key_order_and_content() {
        let a = json!({"prompt": "x", "max_tokens": 10});
        let b = json!({"prompt": "x", "max_tokens": 11});
        assert_ne!(request_hash(&a), request_hash(&b));
        assert_eq!(request_hash(&a), request_hash(&a.clone()));
        assert_eq!(request_hash(&a).len(), 64);
    }

    #[test]
    fn replay_serves_known_requests_only() {
        let req = json!({"prompt": "hello"});
        let svc = ReplayService::from_fixtures([Fixture::new(&req, "world")]);
        assert_eq!(svc.call(&req).unwrap(), "world");
        assert!(svc.call(&json!({"prompt": "other"})).is_err());
    }

    struct Echo;

    impl TextService for Echo {
        fn name(&self) -> String {
            "echo".into()
        }
        fn call(&self, request: &Value) -> Result<String> {
            Ok(request["prompt"].as_str().unwrap_or_default().to_uppercase())
        }
    }

    #[test]
    fn recordings_replay_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixtures.jsonl");
        let rec = RecordingService::new(Echo, &path).unwrap();
        let req = json!({"prompt": "abc"});
        assert_eq!(rec.call(&req).unwrap(), "ABC");
        drop(rec);
        let replay = ReplayService::load(&path).unwrap();
        assert_eq!(replay.len(), 1);
        assert_eq!(replay.call(&req).unwrap(), "ABC");
    }
}
