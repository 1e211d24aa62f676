//! JSON-over-HTTP client shared by the remote embedder and classifier.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub timeout_ms: u64,
    pub batch_size: usize,
    /// Extra attempts after a timeout or transport failure.
    pub retries: u32,
    pub max_in_flight: usize,
}

impl ServiceConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ServiceConfig {
            endpoint: endpoint.into(),
            timeout_ms: 30_000,
            batch_size: 64,
            retries: 2,
            max_in_flight: 4,
        }
    }
}

pub(crate) struct ServiceClient {
    config: ServiceConfig,
    agent: ureq::Agent,
}

impl ServiceClient {
    pub(crate) fn new(config: ServiceConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        ServiceClient { config, agent }
    }

    pub(crate) fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    pub(crate) fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ServiceError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(ServiceError::Timeout { .. } | ServiceError::Transport { .. })
                    if attempt < self.config.retries =>
                {
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ServiceError> {
        let url = self.url(path);
        let mut response = match self.agent.post(&url).send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(ServiceError::Timeout { endpoint: url }),
            Err(e) => {
                return Err(ServiceError::Transport {
                    endpoint: url,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        if status != 200 {
            return Err(ServiceError::Status {
                endpoint: url,
                status,
            });
        }
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(ServiceError::Timeout { endpoint: url }),
            Err(e) => {
                return Err(ServiceError::Transport {
                    endpoint: url,
                    message: e.to_string(),
                })
            }
        };
        serde_json::from_str(&text).map_err(|e| ServiceError::Malformed {
            endpoint: url,
            message: e.to_string(),
        })
    }
}

/// Splits `items` into batches and runs up to `max_in_flight` of them at a
/// time, concatenating results in input order.
pub(crate) fn run_batches<T, R, F>(
    items: &[T],
    batch_size: usize,
    max_in_flight: usize,
    f: F,
) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> Result<Vec<R>> + Sync,
{
    let batches: Vec<&[T]> = items.chunks(batch_size.max(1)).collect();
    let mut out = Vec::with_capacity(items.len());
    for wave in batches.chunks(max_in_flight.max(1)) {
        let results: Vec<Result<Vec<R>>> = if wave.len() == 1 {
            vec![f(wave[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|b| s.spawn(|| f(b))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("service batch thread panicked"))
                    .collect()
            })
        };
        for r in results {
            out.extend(r?);
        }
    }
    Ok(out)
}
