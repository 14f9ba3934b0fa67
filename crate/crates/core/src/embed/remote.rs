use std::sync::OnceLock;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::http::{HttpClient, RetryPolicy};

/// Client for an HTTP embedding service.
///
/// Request `{"texts": [..]}`, response `{"dimension": d, "vectors": [[..]]}`.
/// The first response fixes the dimension; a later response with a different
/// dimension is a fatal protocol error.
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: HttpClient,
    endpoint: String,
    model: String,
    dimension: OnceLock<usize>,
    batch: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dimension: usize,
    vectors: Vec<Vec<f64>>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, retry: RetryPolicy) -> Self {
        RemoteEmbedder {
            client: HttpClient::new(
                concat!("orepipe/", env!("CARGO_PKG_VERSION")),
                Duration::from_secs(120),
                retry,
            ),
            endpoint: endpoint.into(),
            model: model.into(),
            dimension: OnceLock::new(),
            batch: 64,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch.max(1);
        self
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let body = self.client.post_json(&self.endpoint, &json!({ "texts": texts }))?;
        let response: EmbedResponse = serde_json::from_value(body)
            .map_err(|e| Error::Protocol(format!("{}: bad embedding response: {e}", self.endpoint)))?;
        if response.vectors.len() != texts.len() {
            return Err(Error::Protocol(format!(
                "{}: {} vectors for {} texts",
                self.endpoint,
                response.vectors.len(),
                texts.len()
            )));
        }
        let fixed = *self.dimension.get_or_init(|| response.dimension);
        if response.dimension != fixed {
            return Err(Error::Protocol(format!(
                "{}: dimension drifted from {fixed} to {}",
                self.endpoint, response.dimension
            )));
        }
        response
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != fixed {
                    return Err(Error::Protocol(format!(
                        "{}: vector of length {} but dimension {fixed}",
                        self.endpoint,
                        v.len()
                    )));
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn identity(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn dimension(&self) -> Option<usize> {
        self.dimension.get().copied()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch) {
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }

    fn preferred_batch(&self) -> usize {
        self.batch
    }
}

/// Embeds a non-empty batch through the service, preserving order.
pub fn remote_embed(client: &RemoteEmbedder, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Err(Error::invalid("embedding batch is empty"));
    }
    client.embed_batch(texts)
}
