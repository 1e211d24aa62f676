//! Text embedding backends and vector similarity.

mod projection;
mod remote;
mod tfidf;

pub use projection::{
    projection_gradient, train_projection, triplet_loss, ProjectedEmbedder, ProjectionConfig,
    ProjectionModel, TrainingCurve,
};
pub use remote::RemoteEmbedder;
pub use tfidf::{TfIdfEmbedder, DEFAULT_DIM as TFIDF_DEFAULT_DIM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    /// True when the vector has unit L2 norm. Zero vectors are never normalized.
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector {
            values,
            normalized: false,
        }
    }

    /// Scales to unit length; a zero vector is returned unchanged with the
    /// flag cleared.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
            EmbeddingVector {
                values,
                normalized: true,
            }
        } else {
            EmbeddingVector {
                values,
                normalized: false,
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot = if u.normalized && v.normalized {
        dot(&u.values, &v.values)
    } else {
        dot(&u.values, &v.values) / (nu * nv)
    };
    Ok(dot.clamp(-1.0, 1.0))
}

/// Cosine for ranking purposes: undefined similarities sort last.
pub fn ranking_score(u: &EmbeddingVector, v: &EmbeddingVector) -> f64 {
    cosine(u, v).unwrap_or(f64::NEG_INFINITY)
}

/// A text embedding backend. Implementations must be deterministic.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::Artifact("embedder returned no vector".into()))
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        (**self).embed_batch(texts)
    }
}
