use std::collections::{BTreeMap, HashMap};

use crate::corpus::tokens;
use crate::error::Result;
use crate::rng::fnv1a64;

use super::{EmbeddingVector, Embedder};

pub const DEFAULT_DIM: usize = 1024;

/// Hashed bag-of-words TF-IDF embedder.
///
/// Each token lands in bucket `fnv1a64(token) % dim` with weight
/// `tf * idf`, where `idf = ln((1 + N) / (1 + df)) + 1` over the fitting
/// documents. Inputs are expected to be cleaned text.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfEmbedder {
    dim: usize,
    documents: usize,
    doc_freq: BTreeMap<String, u32>,
}

impl TfIdfEmbedder {
    /// Fits document frequencies. Callers pass train-split texts only.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        let mut doc_freq: BTreeMap<String, u32> = BTreeMap::new();
        let mut documents = 0;
        for text in texts {
            documents += 1;
            let mut seen: Vec<&str> = tokens(text).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *doc_freq.entry(t.to_string()).or_default() += 1;
            }
        }
        TfIdfEmbedder {
            dim,
            documents,
            doc_freq,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(token).copied().unwrap_or(0);
        ((1.0 + self.documents as f64) / (1.0 + f64::from(df))).ln() + 1.0
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }

    /// Non-zero `(bucket, weight)` entries of the normalized vector, sorted by bucket.
    pub fn sparse(&self, text: &str) -> Vec<(usize, f64)> {
        let mut tf: HashMap<&str, u32> = HashMap::new();
        for t in tokens(text) {
            *tf.entry(t).or_default() += 1;
        }
        let mut buckets: BTreeMap<usize, f64> = BTreeMap::new();
        let mut terms: Vec<(&str, u32)> = tf.into_iter().collect();
        // fixed summation order keeps vectors bit-identical across runs
        terms.sort_unstable();
        for (t, count) in terms {
            *buckets.entry(self.bucket(t)).or_default() += f64::from(count) * self.idf(t);
        }
        let norm = buckets.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Vec::new();
        }
        buckets.into_iter().map(|(b, w)| (b, w / norm)).collect()
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let entries = self.sparse(text);
        let mut values = vec![0.0; self.dim];
        let normalized = !entries.is_empty();
        for (b, w) in entries {
            values[b] = w;
        }
        EmbeddingVector { values, normalized }
    }
}

impl Embedder for TfIdfEmbedder {
    fn name(&self) -> &str {
        "tfidf"
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}
