use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::service::{run_batches, ServiceClient, ServiceConfig};

use super::{EmbeddingVector, Embedder};

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

/// Client for an external embedding service speaking
/// `POST /embed {"texts": [...]}` → `{"dim": D, "vectors": [[...], ...]}`.
///
/// The first response fixes the session dimension; later batches that
/// disagree are rejected.
pub struct RemoteEmbedder {
    client: ServiceClient,
    dim: Mutex<Option<usize>>,
}

impl RemoteEmbedder {
    pub fn new(config: ServiceConfig) -> Self {
        RemoteEmbedder {
            client: ServiceClient::new(config),
            dim: Mutex::new(None),
        }
    }

    pub fn dim(&self) -> Option<usize> {
        *self.dim.lock().expect("dim lock poisoned")
    }

    fn embed_one_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let response: EmbedResponse = self.client.post("/embed", &EmbedRequest { texts })?;
        if response.vectors.len() != texts.len() {
            return Err(ServiceError::CountMismatch {
                what: "vector",
                expected: texts.len(),
                actual: response.vectors.len(),
            }
            .into());
        }
        if let Some(bad) = response.vectors.iter().find(|v| v.len() != response.dim) {
            return Err(ServiceError::Malformed {
                endpoint: self.client.config().endpoint.clone(),
                message: format!("declared dim {} but a vector has {}", response.dim, bad.len()),
            }
            .into());
        }
        {
            let mut dim = self.dim.lock().expect("dim lock poisoned");
            match *dim {
                Some(d) if d != response.dim => {
                    return Err(ServiceError::DimMismatch {
                        expected: d,
                        actual: response.dim,
                    }
                    .into())
                }
                None => *dim = Some(response.dim),
                _ => {}
            }
        }
        Ok(response
            .vectors
            .into_iter()
            .map(|v| {
                let normalized = (super::l2_norm(&v) - 1.0).abs() <= 1e-6;
                EmbeddingVector { values: v, normalized }
            })
            .collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        "service"
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let cfg = self.client.config();
        run_batches(texts, cfg.batch_size, cfg.max_in_flight, |batch| {
            self.embed_one_batch(batch)
        })
    }
}
