//! Retrieve-then-classify scenarios with exact inference accounting.
//!
//! Three methods are compared on the same query/database split:
//!
//! * retrieval only: the top-k neighbours are the predicted duplicates;
//! * classification only: every (query, database) pair is classified;
//! * cascade: the top-k neighbours are filtered by the pair classifier.
//!
//! Every text is embedded at most once per run, so the ledger totals follow
//! closed forms (see [`predict_cost`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_batch, PairClassifier};
use crate::corpus::{BugReport, Corpus};
use crate::embed::{EmbeddingVector, Embedder};
use crate::error::{Error, Result};
use crate::graph::ClusterSet;
use crate::ledger::{CostLedger, LedgerCounts};
use crate::metrics::{aggregate_curves, Candidate, CurveRow, QueryOutcome};
use crate::retrieval::{top_k, VectorIndex, MAX_K};
use crate::rng;
use crate::split::{Split, SplitManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneVsAll,
    AllVsAll,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-vs-all" | "one_vs_all" => Ok(Mode::OneVsAll),
            "all-vs-all" | "all_vs_all" => Ok(Mode::AllVsAll),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RetrievalOnly,
    ClassificationOnly,
    Cascade,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RetrievalOnly, Method::ClassificationOnly, Method::Cascade];

    pub fn short_name(self) -> &'static str {
        match self {
            Method::RetrievalOnly => "retrieval",
            Method::ClassificationOnly => "classification",
            Method::Cascade => "cascade",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" | "retrieval_only" => Ok(Method::RetrievalOnly),
            "classification" | "classification_only" => Ok(Method::ClassificationOnly),
            "cascade" => Ok(Method::Cascade),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

pub const DEFAULT_K_LIST: [usize; 7] = [1, 5, 10, 20, 50, 60, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub method: Method,
    pub k: usize,
    pub query_fraction: f64,
    pub seed: u64,
    /// Test-split independents take part in the query/database partition.
    pub include_independents: bool,
    /// All-vs-all only: classify each unordered pair once.
    pub dedup_pairs: bool,
    /// Cutoffs reported in the metric table; values above `k` are dropped.
    pub k_list: Vec<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            mode: Mode::OneVsAll,
            method: Method::Cascade,
            k: 20,
            query_fraction: 0.2,
            seed: 0,
            include_independents: true,
            dedup_pairs: false,
            k_list: DEFAULT_K_LIST.to_vec(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > MAX_K {
            return Err(Error::Config(format!("k must be in 1..={MAX_K}, got {}", self.k)));
        }
        if self.mode == Mode::OneVsAll && !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::Config(format!(
                "query fraction must be in (0, 1), got {}",
                self.query_fraction
            )));
        }
        Ok(())
    }

    fn report_ks(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .k_list
            .iter()
            .copied()
            .filter(|k| *k >= 1 && *k <= self.k)
            .chain([self.k])
            .collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phases_ms: BTreeMap<String, f64>,
    pub total_ms: f64,
    pub per_query_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: ScenarioConfig,
    pub queries: usize,
    pub database: usize,
    /// Queries whose cluster has no peer in the database.
    pub queries_without_duplicates: usize,
    pub outcomes: Vec<QueryOutcome>,
    pub metrics: Vec<CurveRow>,
    pub ledger: LedgerCounts,
    /// Closed-form prediction of the ledger; absent when only a bound exists.
    pub predicted: Option<LedgerCounts>,
    pub timing: Timing,
}

impl ScenarioResult {
    /// The result without wall-clock timings, which vary run to run.
    pub fn deterministic_json(&self) -> Result<Vec<u8>> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("timing");
        }
        Ok(serde_json::to_vec(&value)?)
    }

    pub fn metric_at(&self, k: usize) -> Option<&CurveRow> {
        self.metrics.iter().find(|r| r.k == k)
    }
}

/// Closed-form ledger totals for one-vs-all with `n` queries and `m`
/// database bugs. The classifier sees at most `min(k, m)` candidates per query.
pub fn predict_cost(method: Method, n: usize, m: usize, k: usize) -> LedgerCounts {
    let (n, m) = (n as u64, m as u64);
    let k_eff = (k as u64).min(m);
    match method {
        Method::ClassificationOnly => LedgerCounts {
            embed_calls: 0,
            pair_classifications: n * m,
            similarity_ops: 0,
        },
        Method::RetrievalOnly => LedgerCounts {
            embed_calls: n + m,
            pair_classifications: 0,
            similarity_ops: n * m,
        },
        Method::Cascade => LedgerCounts {
            embed_calls: n + m,
            pair_classifications: n * k_eff,
            similarity_ops: n * m,
        },
    }
}

/// Ledger totals for all-vs-all over `m` bugs. Returns `None` for the
/// deduplicated cascade, whose count depends on the rankings.
pub fn predict_cost_all_vs_all(method: Method, m: usize, k: usize, dedup: bool) -> Option<LedgerCounts> {
    let m = m as u64;
    let others = m.saturating_sub(1);
    let k_eff = (k as u64).min(others);
    Some(match (method, dedup) {
        (Method::ClassificationOnly, false) => LedgerCounts {
            embed_calls: 0,
            pair_classifications: m * others,
            similarity_ops: 0,
        },
        (Method::ClassificationOnly, true) => LedgerCounts {
            embed_calls: 0,
            pair_classifications: m * others / 2,
            similarity_ops: 0,
        },
        (Method::RetrievalOnly, _) => LedgerCounts {
            embed_calls: m,
            pair_classifications: 0,
            similarity_ops: m * others,
        },
        (Method::Cascade, false) => LedgerCounts {
            embed_calls: m,
            pair_classifications: m * k_eff,
            similarity_ops: m * others,
        },
        (Method::Cascade, true) => return None,
    })
}

/// Backends used by a scenario run.
pub struct Backends<'a> {
    pub embedder: &'a dyn Embedder,
    pub classifier: &'a dyn PairClassifier,
}

fn embed_cached(
    embedder: &dyn Embedder,
    reports: &[&BugReport],
    cache: &mut HashMap<String, EmbeddingVector>,
    ledger: &CostLedger,
) -> Result<()> {
    let missing: Vec<&BugReport> = reports
        .iter()
        .copied()
        .filter(|r| !cache.contains_key(&r.bug_id))
        .collect();
    let texts: Vec<&str> = missing.iter().map(|r| r.clean_text.as_str()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    ledger.add_embed_calls(missing.len() as u64);
    for (r, v) in missing.into_iter().zip(vectors) {
        cache.insert(r.bug_id.clone(), v);
    }
    Ok(())
}

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Runs one method over explicit query and database sets.
///
/// With `self_search` the queries are members of the database and are
/// excluded from their own candidate lists (all-vs-all).
#[allow(clippy::too_many_arguments)]
pub fn run_on(
    config: &ScenarioConfig,
    queries: &[&BugReport],
    database: &[&BugReport],
    self_search: bool,
    set: &ClusterSet,
    backends: &Backends<'_>,
    ledger: &CostLedger,
) -> Result<Vec<QueryOutcome>> {
    config.validate()?;
    if queries.is_empty() || database.is_empty() {
        return Err(Error::Scenario(format!(
            "need non-empty query and database sets, got {} and {}",
            queries.len(),
            database.len()
        )));
    }
    let membership = set.membership();
    let same_cluster = |a: &str, b: &str| match (membership.get(a), membership.get(b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    };
    let relevant_for = |q: &BugReport| -> Vec<String> {
        let mut rel: Vec<String> = database
            .iter()
            .filter(|d| d.bug_id != q.bug_id && same_cluster(&q.bug_id, &d.bug_id))
            .map(|d| d.bug_id.clone())
            .collect();
        rel.sort();
        rel
    };
    let pool_size = |q: &BugReport| -> usize {
        if self_search && database.iter().any(|d| d.bug_id == q.bug_id) {
            database.len() - 1
        } else {
            database.len()
        }
    };

    let by_id: HashMap<&str, &BugReport> = database
        .iter()
        .chain(queries)
        .map(|r| (r.bug_id.as_str(), *r))
        .collect();

    let mut outcomes: Vec<QueryOutcome> = match config.method {
        Method::ClassificationOnly => {
            let pairs: Vec<(&BugReport, &BugReport)> = queries
                .iter()
                .flat_map(|q| {
                    database
                        .iter()
                        .filter(move |d| !(self_search && d.bug_id == q.bug_id))
                        .map(move |d| (*q, *d))
                })
                .collect();
            let scores = classify_pairs(&pairs, self_search && config.dedup_pairs, backends, ledger)?;
            let mut per_query: Vec<QueryOutcome> = queries
                .iter()
                .map(|q| QueryOutcome {
                    query: q.bug_id.clone(),
                    relevant: relevant_for(q),
                    candidates: Vec::new(),
                    pool_size: pool_size(q),
                    rank_cutoff: false,
                })
                .collect();
            let positions: HashMap<&str, usize> =
                queries.iter().enumerate().map(|(i, q)| (q.bug_id.as_str(), i)).collect();
            for ((q, d), (p, dup)) in pairs.iter().zip(scores) {
                if dup {
                    per_query[positions[q.bug_id.as_str()]].candidates.push(Candidate {
                        bug_id: d.bug_id.clone(),
                        score: p,
                        probability: Some(p),
                        retained: true,
                    });
                }
            }
            for o in &mut per_query {
                o.candidates
                    .sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.bug_id.cmp(&b.bug_id)));
            }
            per_query
        }
        Method::RetrievalOnly | Method::Cascade => {
            let mut cache = HashMap::new();
            ledger.time("embed", || -> Result<()> {
                embed_cached(backends.embedder, queries, &mut cache, ledger)?;
                embed_cached(backends.embedder, database, &mut cache, ledger)
            })?;
            let index = VectorIndex::from_entries(
                database.iter().map(|d| (d.bug_id.clone(), cache[&d.bug_id].clone())),
            )?;
            let ranked = ledger.time("search", || {
                queries
                    .par_iter()
                    .map(|q| {
                        let exclude = self_search.then_some(q.bug_id.as_str());
                        top_k(&index, &cache[&q.bug_id], config.k, exclude, Some(ledger))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut per_query: Vec<QueryOutcome> = queries
                .iter()
                .zip(ranked)
                .map(|(q, r)| QueryOutcome {
                    query: q.bug_id.clone(),
                    relevant: relevant_for(q),
                    candidates: r
                        .ranked
                        .into_iter()
                        .map(|s| Candidate {
                            bug_id: s.bug_id,
                            score: s.score,
                            probability: None,
                            retained: true,
                        })
                        .collect(),
                    pool_size: pool_size(q),
                    rank_cutoff: true,
                })
                .collect();
            if config.method == Method::Cascade {
                let by_id = &by_id;
                let pairs: Vec<(&BugReport, &BugReport)> = per_query
                    .iter()
                    .flat_map(|o| {
                        let q = by_id[o.query.as_str()];
                        o.candidates.iter().map(move |c| (q, by_id[c.bug_id.as_str()]))
                    })
                    .collect();
                let scores = classify_pairs(&pairs, self_search && config.dedup_pairs, backends, ledger)?;
                let mut it = scores.into_iter();
                for o in &mut per_query {
                    for c in &mut o.candidates {
                        let (p, dup) = it.next().expect("one score per candidate");
                        c.probability = Some(p);
                        c.retained = dup;
                    }
                }
            }
            per_query
        }
    };
    outcomes.sort_by(|a, b| a.query.cmp(&b.query));
    Ok(outcomes)
}

/// Classifies `pairs` (optionally once per unordered pair) and returns
/// `(probability, is_duplicate)` aligned with the input.
fn classify_pairs(
    pairs: &[(&BugReport, &BugReport)],
    dedup: bool,
    backends: &Backends<'_>,
    ledger: &CostLedger,
) -> Result<Vec<(f64, bool)>> {
    ledger.time("classify", || {
        if !dedup {
            let decisions = classify_batch(backends.classifier, pairs, ledger)?;
            return Ok(decisions
                .into_iter()
                .map(|d| (d.probability, d.label == crate::split::PairLabel::Duplicate))
                .collect());
        }
        let mut slot: HashMap<(String, String), usize> = HashMap::new();
        let mut unique: Vec<(&BugReport, &BugReport)> = Vec::new();
        let keys: Vec<usize> = pairs
            .iter()
            .map(|(a, b)| {
                *slot.entry(unordered(&a.bug_id, &b.bug_id)).or_insert_with(|| {
                    unique.push((*a, *b));
                    unique.len() - 1
                })
            })
            .collect();
        let decisions = classify_batch(backends.classifier, &unique, ledger)?;
        Ok(keys
            .into_iter()
            .map(|i| {
                let d = decisions[i];
                (d.probability, d.label == crate::split::PairLabel::Duplicate)
            })
            .collect())
    })
}

fn test_bugs<'a>(
    config: &ScenarioConfig,
    manifest: &'a SplitManifest,
    set: &'a ClusterSet,
    corpus: &'a Corpus,
) -> Result<Vec<&'a BugReport>> {
    manifest.check_against(set)?;
    let mut ids: Vec<&str> = manifest
        .clusters_in(set, Split::Test)
        .flat_map(|c| c.members.iter().map(String::as_str))
        .collect();
    if config.include_independents {
        ids.extend(manifest.independents_in(Split::Test));
    }
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            corpus
                .get(id)
                .ok_or_else(|| Error::Artifact(format!("bug `{id}` missing from corpus")))
        })
        .collect()
}

fn finish(
    config: &ScenarioConfig,
    outcomes: Vec<QueryOutcome>,
    database: usize,
    predicted: Option<LedgerCounts>,
    ledger: &CostLedger,
    started: Instant,
) -> Result<ScenarioResult> {
    let metrics = aggregate_curves(&outcomes, &config.report_ks())?;
    let total_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(ScenarioResult {
        scenario: config.clone(),
        queries: outcomes.len(),
        database,
        queries_without_duplicates: outcomes.iter().filter(|o| o.relevant.is_empty()).count(),
        metrics,
        ledger: ledger.counts(),
        predicted,
        timing: Timing {
            phases_ms: ledger.phase_ms(),
            total_ms,
            per_query_ms: total_ms / outcomes.len().max(1) as f64,
        },
        outcomes,
    })
}

/// Splits the test bugs into queries and database (by `query_fraction`)
/// and matches each query against the database.
pub fn run_one_vs_all(
    config: &ScenarioConfig,
    manifest: &SplitManifest,
    set: &ClusterSet,
    corpus: &Corpus,
    backends: &Backends<'_>,
) -> Result<ScenarioResult> {
    config.validate()?;
    let mut bugs = test_bugs(config, manifest, set, corpus)?;
    if bugs.len() < 2 {
        return Err(Error::Scenario(format!(
            "test split has {} bugs; need at least 2 for queries and database",
            bugs.len()
        )));
    }
    bugs.shuffle(&mut rng::substream(config.seed, rng::SCENARIO));
    let n = ((config.query_fraction * bugs.len() as f64).round() as usize).clamp(1, bugs.len() - 1);
    let mut queries = bugs[..n].to_vec();
    let mut database = bugs[n..].to_vec();
    queries.sort_by(|a, b| a.bug_id.cmp(&b.bug_id));
    database.sort_by(|a, b| a.bug_id.cmp(&b.bug_id));

    let ledger = CostLedger::new();
    let started = Instant::now();
    let outcomes = run_on(config, &queries, &database, false, set, backends, &ledger)?;
    let predicted = predict_cost(config.method, queries.len(), database.len(), config.k);
    finish(config, outcomes, database.len(), Some(predicted), &ledger, started)
}

/// Queries every test bug against all other test bugs.
pub fn run_all_vs_all(
    config: &ScenarioConfig,
    manifest: &SplitManifest,
    set: &ClusterSet,
    corpus: &Corpus,
    backends: &Backends<'_>,
) -> Result<ScenarioResult> {
    config.validate()?;
    let bugs = test_bugs(config, manifest, set, corpus)?;
    if bugs.len() < 2 {
        return Err(Error::Scenario(format!(
            "test split has {} bugs; need at least 2",
            bugs.len()
        )));
    }
    let ledger = CostLedger::new();
    let started = Instant::now();
    let outcomes = run_on(config, &bugs, &bugs, true, set, backends, &ledger)?;
    let predicted = predict_cost_all_vs_all(config.method, bugs.len(), config.k, config.dedup_pairs);
    finish(config, outcomes, bugs.len(), predicted, &ledger, started)
}

pub fn run_scenario(
    config: &ScenarioConfig,
    manifest: &SplitManifest,
    set: &ClusterSet,
    corpus: &Corpus,
    backends: &Backends<'_>,
) -> Result<ScenarioResult> {
    match config.mode {
        Mode::OneVsAll => run_one_vs_all(config, manifest, set, corpus, backends),
        Mode::AllVsAll => run_all_vs_all(config, manifest, set, corpus, backends),
    }
}
