//! Exact cosine top-k search and retrieval metrics.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embed::{ranking_score, EmbeddingVector, Embedder};
use crate::error::{Error, Result};
use crate::ledger::CostLedger;

/// Default and maximum cutoff for ranked lists.
pub const MAX_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorIndex {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    dim: usize,
}

impl VectorIndex {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Result<Self> {
        let mut index = VectorIndex::default();
        let mut seen = HashSet::new();
        for (id, v) in entries {
            if index.ids.is_empty() {
                index.dim = v.dim();
            } else if v.dim() != index.dim {
                return Err(Error::DimMismatch {
                    expected: index.dim,
                    actual: v.dim(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateBugId(id));
            }
            index.ids.push(id);
            index.vectors.push(v);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &EmbeddingVector {
        &self.vectors[i]
    }

    /// Stable byte encoding: per entry, id length, id bytes, then the vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend((self.dim as u64).to_le_bytes());
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.extend((id.len() as u64).to_le_bytes());
            out.extend(id.as_bytes());
            out.extend(v.to_le_bytes());
        }
        out
    }
}

/// Embeds `(bug_id, text)` entries and indexes them, charging one embedding
/// call per entry to `ledger`.
pub fn build_index(
    embedder: &dyn Embedder,
    entries: &[(&str, &str)],
    ledger: &CostLedger,
) -> Result<VectorIndex> {
    let texts: Vec<&str> = entries.iter().map(|(_, t)| *t).collect();
    let vectors = embedder.embed_batch(&texts)?;
    ledger.add_embed_calls(entries.len() as u64);
    VectorIndex::from_entries(entries.iter().map(|(id, _)| id.to_string()).zip(vectors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub bug_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    /// The excluded query id, when the query is itself an indexed bug.
    pub query: Option<String>,
    /// Best first; ties broken by ascending bug id.
    pub ranked: Vec<Scored>,
    /// Set when fewer than `k` candidates were available.
    pub short: bool,
}

impl RankedCandidates {
    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|s| s.bug_id.as_str()).collect()
    }
}

struct HeapEntry<'a> {
    score: f64,
    id: &'a str,
}

// Ordered so that the heap's maximum is the worst retained candidate.
impl Ord for HeapEntry<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry<'_> {}

/// Brute-force scan keeping the `k` highest-cosine entries in a bounded heap.
///
/// Zero vectors score `-inf`. When `ledger` is given, one similarity
/// operation is charged per scored entry.
pub fn top_k(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
    exclude: Option<&str>,
    ledger: Option<&CostLedger>,
) -> Result<RankedCandidates> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Config("cannot search an empty index".into()));
    }
    if query.dim() != index.dim {
        return Err(Error::DimMismatch {
            expected: index.dim,
            actual: query.dim(),
        });
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    let mut scored = 0u64;
    for (id, v) in index.ids.iter().zip(&index.vectors) {
        if exclude == Some(id.as_str()) {
            continue;
        }
        scored += 1;
        let entry = HeapEntry {
            score: ranking_score(query, v),
            id,
        };
        if heap.len() < k {
            heap.push(entry);
        } else if let Some(worst) = heap.peek() {
            if entry < *worst {
                heap.pop();
                heap.push(entry);
            }
        }
    }
    if let Some(ledger) = ledger {
        ledger.add_similarity_ops(scored);
    }
    let ranked: Vec<Scored> = heap
        .into_sorted_vec()
        .into_iter()
        .map(|e| Scored {
            bug_id: e.id.to_string(),
            score: e.score,
        })
        .collect();
    Ok(RankedCandidates {
        query: exclude.map(str::to_string),
        short: (scored as usize) < k,
        ranked,
    })
}

fn hits<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count()
}

/// Fraction of the relevant items found in the first `k` ranked ids.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevant("recall@k"));
    }
    Ok(hits(ranked, relevant, k) as f64 / relevant.len() as f64)
}

/// Relevant items in the first `k` ranked ids, divided by `k`.
pub fn precision_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(hits(ranked, relevant, k) as f64 / k as f64)
}
