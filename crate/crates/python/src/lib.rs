//! Python bindings for `dbrd_core`.
//!
//! Structured results (stats, manifests, metric rows) cross the boundary as
//! plain dicts built from their JSON form.

use std::collections::BTreeSet;
use std::path::PathBuf;

use dbrd_core::cascade::{predict_cost as core_predict_cost, predict_cost_all_vs_all, Method, Mode};
use dbrd_core::classifier::ce_loss as core_ce_loss;
use dbrd_core::corpus::{self, CorpusFormat};
use dbrd_core::embed::{triplet_loss as core_triplet_loss, EmbeddingVector, TfIdfEmbedder, TFIDF_DEFAULT_DIM};
use dbrd_core::graph::{self, cluster_stats};
use dbrd_core::metrics::{classification_metrics as core_classification_metrics, ConfusionMatrix};
use dbrd_core::retrieval::{self, VectorIndex};
use dbrd_core::split::{build_manifest, Caps, PairConfig, Split, SplitManifest, SplitRatios};
use dbrd_core::synth::{self, SynthConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py(e: dbrd_core::Error) -> PyErr {
    use dbrd_core::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Config(_) | E::Record { .. } | E::Artifact(_) | E::DimMismatch { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_dict<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: std::str::FromStr<Err = dbrd_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Lowercases, keeps ASCII words plus `.` and `,`, drops stopwords.
#[pyfunction]
fn clean(text: &str) -> String {
    corpus::clean(text)
}

#[pyclass(frozen)]
struct Corpus(corpus::Corpus);

#[pymethods]
impl Corpus {
    /// Reads a JSONL or CSV corpus (CSV uses the default column names).
    #[staticmethod]
    #[pyo3(signature = (path, format = "jsonl"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let format: CorpusFormat = parse(format)?;
        corpus::ingest(&path, format).map(Corpus).map_err(to_py)
    }

    /// Generates a corpus with planted duplicate clusters.
    #[staticmethod]
    #[pyo3(signature = (clusters = 50, mean_size = 3.0, independents = 50, topics = 2, noise = 0.3, seed = 0))]
    fn synth(clusters: usize, mean_size: f64, independents: usize, topics: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let config = SynthConfig { clusters, mean_size, independents, topics, noise, seed };
        synth::generate(&config).map(Corpus).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn ids(&self) -> Vec<String> {
        self.0.reports().iter().map(|r| r.bug_id.clone()).collect()
    }

    /// Cleaned title and description of one bug.
    fn clean_text(&self, bug_id: &str) -> PyResult<String> {
        self.0
            .get(bug_id)
            .map(|r| r.clean_text.clone())
            .ok_or_else(|| PyValueError::new_err(format!("unknown bug `{bug_id}`")))
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_dict(py, &corpus::corpus_stats(&self.0))
    }

    fn write_jsonl(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_jsonl(&path).map_err(to_py)
    }

    fn clusters(&self) -> ClusterSet {
        ClusterSet(graph::build_clusters(&self.0))
    }
}

#[pyclass(frozen)]
struct ClusterSet(graph::ClusterSet);

#[pymethods]
impl ClusterSet {
    #[getter]
    fn clusters(&self) -> Vec<Vec<String>> {
        self.0.clusters.iter().map(|c| c.members.clone()).collect()
    }

    #[getter]
    fn independents(&self) -> Vec<String> {
        self.0.independents.clone()
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_dict(py, &cluster_stats(&self.0))
    }

    /// Assigns whole clusters to train/dev/test and generates pairs,
    /// triplets and retrieval groups.
    #[pyo3(signature = (seed, ratios = (0.8, 0.1, 0.1), dup_ratio = 0.1564, caps = ""))]
    fn split(&self, seed: u64, ratios: (f64, f64, f64), dup_ratio: f64, caps: &str) -> PyResult<Manifest> {
        let ratios = SplitRatios::new(ratios.0, ratios.1, ratios.2).map_err(to_py)?;
        let config = PairConfig { caps: parse::<Caps>(caps)?, target_dup_ratio: dup_ratio };
        build_manifest(&self.0, ratios, &config, seed).map(Manifest).map_err(to_py)
    }
}

#[pyclass(frozen)]
struct Manifest(SplitManifest);

#[pymethods]
impl Manifest {
    /// `(bug_a, bug_b, is_duplicate)` for one split.
    fn pairs(&self, split: &str) -> PyResult<Vec<(String, String, bool)>> {
        let split: Split = parse(split)?;
        Ok(self
            .0
            .pairs
            .get(split)
            .iter()
            .map(|p| (p.bug_a.clone(), p.bug_b.clone(), p.label == dbrd_core::split::PairLabel::Duplicate))
            .collect())
    }

    fn triplets(&self) -> Vec<(String, String, String)> {
        self.0
            .triplets
            .iter()
            .map(|t| (t.anchor.clone(), t.positive.clone(), t.negative.clone()))
            .collect()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_dict(py, &self.0)
    }
}

#[pyclass(frozen)]
struct TfIdf(TfIdfEmbedder);

#[pymethods]
impl TfIdf {
    /// Fits document frequencies on already-cleaned texts.
    #[new]
    #[pyo3(signature = (texts, dim = TFIDF_DEFAULT_DIM))]
    fn new(texts: Vec<String>, dim: usize) -> PyResult<Self> {
        if dim == 0 {
            return Err(PyValueError::new_err("dim must be positive"));
        }
        Ok(TfIdf(TfIdfEmbedder::fit(texts.iter().map(String::as_str), dim)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        self.0.embed_text(text).values
    }
}

/// Brute-force cosine search; returns `(bug_id, score)` best first.
#[pyfunction]
#[pyo3(signature = (ids, vectors, query, k, exclude = None))]
fn top_k(ids: Vec<String>, vectors: Vec<Vec<f64>>, query: Vec<f64>, k: usize, exclude: Option<&str>) -> PyResult<Vec<(String, f64)>> {
    if ids.len() != vectors.len() {
        return Err(PyValueError::new_err(format!("{} ids but {} vectors", ids.len(), vectors.len())));
    }
    let index = VectorIndex::from_entries(ids.into_iter().zip(vectors.into_iter().map(EmbeddingVector::new))).map_err(to_py)?;
    let ranked = retrieval::top_k(&index, &EmbeddingVector::new(query), k, exclude, None).map_err(to_py)?;
    Ok(ranked.ranked.into_iter().map(|s| (s.bug_id, s.score)).collect())
}

#[pyfunction]
fn recall_at_k(ranked: Vec<String>, relevant: BTreeSet<String>, k: usize) -> PyResult<f64> {
    retrieval::recall_at_k(&ranked, &relevant, k).map_err(to_py)
}

#[pyfunction]
fn precision_at_k(ranked: Vec<String>, relevant: BTreeSet<String>, k: usize) -> PyResult<f64> {
    retrieval::precision_at_k(&ranked, &relevant, k).map_err(to_py)
}

/// Precision, recall, F1 and accuracy from confusion counts.
#[pyfunction]
fn classification_metrics(py: Python<'_>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Py<PyAny>> {
    let row = core_classification_metrics(&ConfusionMatrix { tp, fp, fn_, tn }).map_err(to_py)?;
    to_dict(py, &row)
}

/// Closed-form embed/classify/similarity counts for a scenario.
#[pyfunction]
#[pyo3(signature = (method, n, m, k, mode = "one-vs-all", dedup = false))]
fn predict_cost(py: Python<'_>, method: &str, n: usize, m: usize, k: usize, mode: &str, dedup: bool) -> PyResult<Py<PyAny>> {
    let method: Method = parse(method)?;
    match parse::<Mode>(mode)? {
        Mode::OneVsAll => to_dict(py, &core_predict_cost(method, n, m, k)),
        Mode::AllVsAll => to_dict(py, &predict_cost_all_vs_all(method, m, k, dedup)),
    }
}

#[pyfunction]
fn triplet_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, margin: f64) -> f64 {
    core_triplet_loss(&anchor, &positive, &negative, margin)
}

#[pyfunction]
fn ce_loss(y: f64, p: f64) -> f64 {
    core_ce_loss(y, p)
}

/// Runs the `dbrd` command line in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    dbrd_core::cli::dispatch(std::iter::once("dbrd".to_string()).chain(args).map(std::ffi::OsString::from))
}

#[pymodule]
fn dbrd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<ClusterSet>()?;
    m.add_class::<Manifest>()?;
    m.add_class::<TfIdf>()?;
    m.add_function(wrap_pyfunction!(clean, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(predict_cost, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
