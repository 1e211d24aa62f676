//! Command-line entry points. Every stage reads and writes files, and every
//! output carries the config of the run that produced it.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cascade::{run_scenario, Backends, Method, Mode, ScenarioConfig, ScenarioResult};
use crate::classifier::{
    classify_batch, train_classifier, ClassifierConfig, ConstantClassifier, LogisticClassifier,
    LogisticPairModel, OracleClassifier, PairClassifier, RemoteClassifier, SimilarityRule,
};
use crate::config::{write_sidecar, Envelope, RunConfig};
use crate::corpus::{corpus_stats, ingest, ingest_csv, Corpus, CorpusFormat, CsvColumns};
use crate::embed::{
    train_projection, Embedder, ProjectedEmbedder, ProjectionConfig, ProjectionModel, RemoteEmbedder,
    TfIdfEmbedder,
};
use crate::error::{Error, Result};
use crate::graph::{build_clusters, cluster_stats, ClusterSet};
use crate::ledger::CostLedger;
use crate::metrics::{classification_metrics, ConfusionMatrix};
use crate::retrieval::{precision_at_k, recall_at_k, top_k, VectorIndex, MAX_K};
use crate::service::ServiceConfig;
use crate::split::{build_manifest, Caps, PairConfig, PairLabel, Split, SplitManifest, SplitRatios};
use crate::synth::{self, SynthConfig};

pub const EMBED_ENDPOINT_ENV: &str = "DBRD_EMBED_ENDPOINT";
pub const CLASSIFY_ENDPOINT_ENV: &str = "DBRD_CLASSIFY_ENDPOINT";

#[derive(Parser, Debug)]
#[command(name = "dbrd", version, about = "Duplicate bug report detection: retrieval, classification and cascades")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and canonicalize a corpus.
    Ingest(IngestArgs),
    /// Build duplicate clusters from `dup_of` links.
    Cluster(ClusterArgs),
    /// Leakage-free train/dev/test split with pairs, triplets and groups.
    Split(SplitArgs),
    /// Fine-tune a projection over TF-IDF with triplet loss.
    TrainProjection(TrainProjectionArgs),
    /// Train the logistic pair classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Recall/precision at k for a retrieval backend.
    EvalRetrieval(EvalRetrievalArgs),
    /// Pair classification metrics per backend.
    EvalClassification(EvalClassificationArgs),
    /// One-vs-all or all-vs-all scenario with cost accounting.
    RunCascade(RunCascadeArgs),
    /// Merge scenario outputs into one CSV per (method, k).
    Report(ReportArgs),
    /// Generate a planted-cluster corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: CorpusFormat,
    #[arg(long, default_value = "bug_id")]
    id_column: String,
    #[arg(long, default_value = "title")]
    title_column: String,
    #[arg(long, default_value = "description")]
    description_column: String,
    #[arg(long, default_value = "dup_of")]
    dup_column: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to csv for `.csv` files, jsonl otherwise.
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long, default_value = "0.8,0.1,0.1")]
    ratios: SplitRatios,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.1564)]
    dup_ratio: f64,
    /// Caps on duplicate pairs per split, e.g. `train=1000,test=200`.
    #[arg(long)]
    caps: Option<Caps>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct CorpusOverride {
    /// Corpus to use instead of the one recorded in the manifest.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainProjectionArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    dim_out: usize,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = crate::embed::TFIDF_DEFAULT_DIM)]
    tfidf_dim: usize,
    #[command(flatten)]
    corpus: CorpusOverride,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct EmbedderArgs {
    /// tfidf, projection or service.
    #[arg(long, default_value = "tfidf")]
    backend: String,
    /// Projection model file (for `--backend projection`).
    #[arg(long)]
    projection: Option<PathBuf>,
    #[arg(long, default_value_t = crate::embed::TFIDF_DEFAULT_DIM)]
    tfidf_dim: usize,
    #[arg(long, env = EMBED_ENDPOINT_ENV)]
    embed_endpoint: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 64)]
    service_batch: usize,
    #[arg(long, default_value_t = 2)]
    retries: u32,
}

#[derive(Args, Debug)]
struct TrainClassifierArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    embedder: EmbedderArgs,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[command(flatten)]
    corpus: CorpusOverride,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalRetrievalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    embedder: EmbedderArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,60,100")]
    k_list: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    corpus: CorpusOverride,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ClassifierArgs {
    /// Trained logistic model (from `train-classifier`).
    #[arg(long)]
    classifier_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    similarity_threshold: f64,
    #[arg(long, env = CLASSIFY_ENDPOINT_ENV)]
    classify_endpoint: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    service_threshold: f64,
}

#[derive(Args, Debug)]
struct EvalClassificationArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Backends to evaluate: logistic, similarity, oracle, service.
    #[arg(long, value_delimiter = ',', default_value = "logistic,similarity")]
    classifiers: Vec<String>,
    #[command(flatten)]
    classifier: ClassifierArgs,
    #[command(flatten)]
    embedder: EmbedderArgs,
    #[arg(long, default_value = "test")]
    split: Split,
    #[command(flatten)]
    corpus: CorpusOverride,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunCascadeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "one-vs-all")]
    mode: Mode,
    #[arg(long, default_value = "cascade")]
    method: Method,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    query_fraction: f64,
    /// Keep test-split independents out of the query/database partition.
    #[arg(long)]
    exclude_independents: bool,
    /// All-vs-all: classify each unordered pair once.
    #[arg(long)]
    dedup: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,50,60,100")]
    k_list: Vec<usize>,
    /// logistic, similarity, oracle or service.
    #[arg(long, default_value = "logistic")]
    classifier: String,
    #[command(flatten)]
    classifier_args: ClassifierArgs,
    #[command(flatten)]
    embedder: EmbedderArgs,
    #[command(flatten)]
    corpus: CorpusOverride,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Scenario outputs from `run-cascade`.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    #[arg(long, default_value_t = 3.0)]
    mean_size: f64,
    /// Defaults to the number of clusters.
    #[arg(long)]
    independents: Option<usize>,
    #[arg(long, default_value_t = 2)]
    topics: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long)]
    seed: u64,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where the corpus behind an artifact lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub path: String,
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub corpus: CorpusRef,
    #[serde(flatten)]
    pub set: ClusterSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestArtifact {
    pub corpus: CorpusRef,
    pub cluster_set: ClusterSet,
    pub split: SplitManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionArtifact {
    pub tfidf_dim: usize,
    pub model: ProjectionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArtifact {
    /// Backend used for the pair features.
    pub features: String,
    pub tfidf_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<String>,
    pub model: LogisticPairModel,
}

/// A failure reported as JSON on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub flag: Option<String>,
}

impl CliError {
    fn usage(message: impl Into<String>, flag: Option<&str>) -> Self {
        CliError {
            code: 2,
            kind: "usage",
            message: message.into(),
            flag: flag.map(str::to_string),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => (2, "missing_file"),
            Error::Record { .. } | Error::DuplicateBugId(_) | Error::Json(_) | Error::Csv(_) | Error::Artifact(_) => {
                (2, "schema")
            }
            Error::Config(_) => (2, "usage"),
            Error::Service(_) => (1, "service"),
            _ => (1, "runtime"),
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
            flag: None,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let flag = e.get(clap::error::ContextKind::InvalidArg).map(|v| v.to_string());
            let rendered = e.render().to_string();
            let message = rendered
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            report_error(&CliError::usage(message.trim_start_matches("error: "), flag.as_deref()));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            e.code
        }
    }
}

fn report_error(e: &CliError) {
    let body = json!({
        "error": {
            "kind": e.kind,
            "message": e.message,
            "flag": e.flag,
        },
        "exit_code": e.code,
    });
    let _ = writeln!(std::io::stderr(), "{body}");
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Split(a) => cmd_split(a),
        Command::TrainProjection(a) => cmd_train_projection(a),
        Command::TrainClassifier(a) => cmd_train_classifier(a),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(a),
        Command::EvalClassification(a) => cmd_eval_classification(a),
        Command::RunCascade(a) => cmd_run_cascade(a),
        Command::Report(a) => cmd_report(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Checks that an input file exists, naming the flag when it does not.
fn input<'a>(flag: &str, path: &'a Path) -> CliResult<&'a Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError {
            code: 2,
            kind: "missing_file",
            message: format!("{flag}: no such file `{}`", path.display()),
            flag: Some(flag.to_string()),
        })
    }
}

/// Reads an artifact, attributing failures to the flag that named it.
fn read_artifact<T: Serialize + serde::de::DeserializeOwned>(flag: &str, path: &Path) -> CliResult<Envelope<T>> {
    Envelope::read(input(flag, path)?).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{flag}: {}", err.message);
        err.flag = Some(flag.to_string());
        err
    })
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn format_for(path: &Path, explicit: Option<CorpusFormat>) -> CorpusFormat {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => CorpusFormat::Csv,
        _ => CorpusFormat::Jsonl,
    })
}

fn cmd_ingest(a: IngestArgs) -> CliResult<()> {
    input("--corpus", &a.corpus)?;
    let corpus = match a.format {
        CorpusFormat::Jsonl => ingest(&a.corpus, CorpusFormat::Jsonl)?,
        CorpusFormat::Csv => ingest_csv(
            &a.corpus,
            &CsvColumns {
                bug_id: a.id_column.clone(),
                title: a.title_column.clone(),
                description: a.description_column.clone(),
                dup_of: a.dup_column.clone(),
            },
        )?,
    };
    corpus.write_jsonl(&a.out)?;
    let stats = corpus_stats(&corpus);
    let config = RunConfig::new("ingest")
        .path("corpus", &a.corpus)
        .path("out", &a.out)
        .param("format", a.format)
        .param("columns", [&a.id_column, &a.title_column, &a.description_column, &a.dup_column]);
    write_sidecar(&a.out, config)?;
    print_json(json!({ "stats": stats, "warnings": corpus.warnings() }));
    Ok(())
}

fn cmd_cluster(a: ClusterArgs) -> CliResult<()> {
    input("--corpus", &a.corpus)?;
    let format = format_for(&a.corpus, a.format);
    let corpus = ingest(&a.corpus, format)?;
    let set = build_clusters(&corpus);
    let stats = cluster_stats(&set);
    let config = RunConfig::new("cluster")
        .path("corpus", &a.corpus)
        .path("out", &a.out)
        .param("format", format);
    let artifact = ClusterArtifact {
        corpus: CorpusRef {
            path: a.corpus.display().to_string(),
            format,
        },
        set,
    };
    Envelope::new(config, artifact).write(&a.out)?;
    print_json(json!({ "clusters": stats, "warnings": corpus.warnings() }));
    Ok(())
}

fn cmd_split(a: SplitArgs) -> CliResult<()> {
    let clusters: Envelope<ClusterArtifact> = read_artifact("--clusters", &a.clusters)?;
    let pair_config = PairConfig {
        caps: a.caps.unwrap_or_default(),
        target_dup_ratio: a.dup_ratio,
    };
    let manifest = build_manifest(&clusters.data.set, a.ratios, &pair_config, a.seed)?;
    let counts: BTreeMap<&str, (usize, usize)> = Split::ALL
        .iter()
        .map(|s| {
            let pairs = manifest.pairs.get(*s);
            let dup = pairs.iter().filter(|p| p.label == PairLabel::Duplicate).count();
            (s.name(), (dup, pairs.len() - dup))
        })
        .collect();
    let config = RunConfig {
        seed: Some(a.seed),
        ..RunConfig::new("split")
    }
    .path("clusters", &a.clusters)
    .path("out", &a.out)
    .param("ratios", a.ratios)
    .param("dup_ratio", a.dup_ratio)
    .param("caps", pair_config.caps)
    .upstream("clusters", &clusters.config_checksum);
    let artifact = ManifestArtifact {
        corpus: clusters.data.corpus,
        cluster_set: clusters.data.set,
        split: manifest,
    };
    Envelope::new(config, artifact).write(&a.out)?;
    print_json(json!({ "pairs": counts }));
    Ok(())
}

/// Manifest, cluster set and corpus, loaded and cross-checked.
pub struct Loaded {
    pub manifest: Envelope<ManifestArtifact>,
    pub corpus: Corpus,
    pub corpus_path: PathBuf,
}

impl Loaded {
    pub fn set(&self) -> &ClusterSet {
        &self.manifest.data.cluster_set
    }

    pub fn split(&self) -> &SplitManifest {
        &self.manifest.data.split
    }
}

fn load(manifest: &Path, corpus_override: &CorpusOverride) -> CliResult<Loaded> {
    let manifest: Envelope<ManifestArtifact> = read_artifact("--manifest", manifest)?;
    let (corpus_path, flag) = match &corpus_override.corpus {
        Some(p) => (p.clone(), "--corpus"),
        None => (PathBuf::from(&manifest.data.corpus.path), "--manifest"),
    };
    let corpus = ingest(input(flag, &corpus_path)?, format_for(&corpus_path, Some(manifest.data.corpus.format)))?;
    if let Some(id) = manifest.data.cluster_set.all_bugs().find(|id| corpus.get(id).is_none()) {
        return Err(Error::Artifact(format!("bug `{id}` from the manifest is not in the corpus")).into());
    }
    manifest.data.split.check_against(&manifest.data.cluster_set)?;
    Ok(Loaded {
        manifest,
        corpus,
        corpus_path,
    })
}

/// Fits TF-IDF statistics on the training split only.
pub fn fit_tfidf(set: &ClusterSet, manifest: &SplitManifest, corpus: &Corpus, dim: usize) -> TfIdfEmbedder {
    let ids = manifest.bugs_in(set, Split::Train);
    TfIdfEmbedder::fit(
        ids.iter().filter_map(|id| corpus.get(id)).map(|r| r.clean_text.as_str()),
        dim,
    )
}

fn service_config(endpoint: Option<&String>, flag: &str, env: &str, e: &EmbedderArgs) -> CliResult<ServiceConfig> {
    let endpoint = endpoint.ok_or_else(|| {
        CliError::usage(format!("service backend needs {flag} or ${env}"), Some(flag))
    })?;
    Ok(ServiceConfig {
        timeout_ms: e.timeout_ms,
        batch_size: e.service_batch,
        retries: e.retries,
        ..ServiceConfig::new(endpoint.clone())
    })
}

fn build_embedder(args: &EmbedderArgs, loaded: &Loaded) -> CliResult<Box<dyn Embedder>> {
    match args.backend.as_str() {
        "tfidf" => Ok(Box::new(fit_tfidf(loaded.set(), loaded.split(), &loaded.corpus, args.tfidf_dim))),
        "projection" => {
            let path = args
                .projection
                .as_ref()
                .ok_or_else(|| CliError::usage("--backend projection needs --projection", Some("--projection")))?;
            let file: Envelope<ProjectionArtifact> = read_artifact("--projection", path)?;
            file.data.model.verify()?;
            let base = fit_tfidf(loaded.set(), loaded.split(), &loaded.corpus, file.data.tfidf_dim);
            Ok(Box::new(ProjectedEmbedder {
                base,
                model: file.data.model,
            }))
        }
        "service" => Ok(Box::new(RemoteEmbedder::new(service_config(
            args.embed_endpoint.as_ref(),
            "--embed-endpoint",
            EMBED_ENDPOINT_ENV,
            args,
        )?))),
        other => Err(CliError::usage(
            format!("unknown backend `{other}` (expected tfidf, projection or service)"),
            Some("--backend"),
        )),
    }
}

fn embedder_config(config: RunConfig, args: &EmbedderArgs) -> RunConfig {
    let mut config = config.backend("embedder", &args.backend).param("tfidf_dim", args.tfidf_dim);
    if let Some(p) = &args.projection {
        config = config.path("projection", p);
    }
    if args.backend == "service" {
        config = config.param("embed_endpoint", &args.embed_endpoint);
    }
    config
}

fn base_config(command: &str, loaded: &Loaded, manifest: &Path, out: &Path) -> RunConfig {
    RunConfig::new(command)
        .path("manifest", manifest)
        .path("corpus", &loaded.corpus_path)
        .path("out", out)
        .upstream("manifest", &loaded.manifest.config_checksum)
}

fn cmd_train_projection(a: TrainProjectionArgs) -> CliResult<()> {
    let loaded = load(&a.manifest, &a.corpus)?;
    let tfidf = fit_tfidf(loaded.set(), loaded.split(), &loaded.corpus, a.tfidf_dim);
    let texts: HashMap<String, String> = loaded
        .corpus
        .reports()
        .iter()
        .map(|r| (r.bug_id.clone(), r.clean_text.clone()))
        .collect();
    let config = ProjectionConfig {
        dim_out: a.dim_out,
        margin: a.margin,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let model = train_projection(&loaded.split().triplets, &texts, &tfidf, config)?;
    let run = RunConfig {
        seed: Some(a.seed),
        ..base_config("train-projection", &loaded, &a.manifest, &a.out)
    }
    .param("projection", config)
    .param("tfidf_dim", a.tfidf_dim);
    print_json(json!({ "curve": model.curve, "checksum": model.checksum }));
    Envelope::new(run, ProjectionArtifact { tfidf_dim: a.tfidf_dim, model }).write(&a.out)?;
    Ok(())
}

fn lookup<'a>(corpus: &'a Corpus) -> impl Fn(&str) -> Option<&'a crate::corpus::BugReport> + Sync + 'a {
    move |id| corpus.get(id)
}

fn cmd_train_classifier(a: TrainClassifierArgs) -> CliResult<()> {
    let loaded = load(&a.manifest, &a.corpus)?;
    let embedder = build_embedder(&a.embedder, &loaded)?;
    let config = ClassifierConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let split = loaded.split();
    let find = lookup(&loaded.corpus);
    let model = train_classifier(
        split.pairs.get(Split::Train),
        Some(split.pairs.get(Split::Dev)),
        &find,
        embedder.as_ref(),
        config,
    )?;
    let run = embedder_config(
        RunConfig {
            seed: Some(a.seed),
            ..base_config("train-classifier", &loaded, &a.manifest, &a.out)
        },
        &a.embedder,
    )
    .param("classifier", config);
    print_json(json!({
        "threshold": model.threshold,
        "initial_loss": model.curve.first(),
        "final_loss": model.curve.last(),
    }));
    let artifact = ClassifierArtifact {
        features: a.embedder.backend.clone(),
        tfidf_dim: a.embedder.tfidf_dim,
        projection: a.embedder.projection.as_ref().map(|p| p.display().to_string()),
        model,
    };
    Envelope::new(run, artifact).write(&a.out)?;
    Ok(())
}

fn validate_k_list(k_list: &[usize]) -> CliResult<()> {
    if k_list.is_empty() || k_list.iter().any(|k| *k == 0 || *k > MAX_K) {
        return Err(CliError::usage(format!("--k-list values must be in 1..={MAX_K}"), Some("--k-list")));
    }
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(header).map_err(Error::from)?;
    for row in rows {
        w.write_record(row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_eval_retrieval(a: EvalRetrievalArgs) -> CliResult<()> {
    validate_k_list(&a.k_list)?;
    let loaded = load(&a.manifest, &a.corpus)?;
    let embedder = build_embedder(&a.embedder, &loaded)?;
    let ledger = CostLedger::new();
    let ids = loaded.split().bugs_in(loaded.set(), a.split);
    let entries: Vec<(&str, &str)> = ids
        .iter()
        .map(|id| (*id, loaded.corpus.get(id).expect("checked on load").clean_text.as_str()))
        .collect();
    let index: VectorIndex = crate::retrieval::build_index(embedder.as_ref(), &entries, &ledger)?;
    let groups = loaded.split().groups.get(a.split);
    if groups.is_empty() {
        return Err(Error::Split {
            split: a.split.name().into(),
            message: "no retrieval groups (no duplicate clusters)".into(),
        }
        .into());
    }
    let k_max = *a.k_list.iter().max().expect("validated non-empty");
    let position: HashMap<&str, usize> = index.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut recall = vec![0.0; a.k_list.len()];
    let mut precision = vec![0.0; a.k_list.len()];
    for g in groups {
        let query = index.vector(position[g.query.as_str()]);
        let ranked = top_k(&index, query, k_max, Some(&g.query), Some(&ledger))?;
        let ids = ranked.ids();
        let relevant = g.relevant.iter().cloned().collect();
        for (i, k) in a.k_list.iter().enumerate() {
            recall[i] += recall_at_k(&ids, &relevant, *k)?;
            precision[i] += precision_at_k(&ids, &relevant, *k)?;
        }
    }
    let n = groups.len() as f64;
    let rows: Vec<Vec<String>> = a
        .k_list
        .iter()
        .enumerate()
        .map(|(i, k)| {
            vec![
                a.embedder.backend.clone(),
                a.split.to_string(),
                k.to_string(),
                (recall[i] / n).to_string(),
                (precision[i] / n).to_string(),
                groups.len().to_string(),
            ]
        })
        .collect();
    write_csv(&a.out, &["backend", "split", "k", "recall", "precision", "queries"], &rows)?;
    let run = embedder_config(base_config("eval-retrieval", &loaded, &a.manifest, &a.out), &a.embedder)
        .param("k_list", &a.k_list)
        .param("split", a.split);
    write_sidecar(&a.out, run)?;
    print_json(json!({ "ledger": ledger.counts() }));
    Ok(())
}

fn build_classifier(
    name: &str,
    args: &ClassifierArgs,
    embedder_args: &EmbedderArgs,
    loaded: &Loaded,
) -> CliResult<Box<dyn PairClassifier>> {
    match name {
        "logistic" => {
            let path = args.classifier_model.as_ref().ok_or_else(|| {
                CliError::usage("logistic classifier needs --classifier-model", Some("--classifier-model"))
            })?;
            let file: Envelope<ClassifierArtifact> = read_artifact("--classifier-model", path)?;
            let features = EmbedderArgs {
                backend: file.data.features.clone(),
                projection: file.data.projection.as_ref().map(PathBuf::from),
                tfidf_dim: file.data.tfidf_dim,
                ..embedder_args.clone()
            };
            Ok(Box::new(LogisticClassifier {
                model: file.data.model,
                embedder: build_embedder(&features, loaded)?,
            }))
        }
        "similarity" => Ok(Box::new(SimilarityRule {
            embedder: build_embedder(embedder_args, loaded)?,
            threshold: args.similarity_threshold,
        })),
        "oracle" => Ok(Box::new(OracleClassifier::new(loaded.set()))),
        "service" => Ok(Box::new(RemoteClassifier::new(
            service_config(
                args.classify_endpoint.as_ref(),
                "--classify-endpoint",
                CLASSIFY_ENDPOINT_ENV,
                embedder_args,
            )?,
            args.service_threshold,
        ))),
        other => Err(CliError::usage(
            format!("unknown classifier `{other}` (expected logistic, similarity, oracle or service)"),
            Some("--classifier"),
        )),
    }
}

fn classifier_config(config: RunConfig, names: &[&str], args: &ClassifierArgs) -> RunConfig {
    let mut config = config.param("classifiers", names);
    if let Some(p) = &args.classifier_model {
        config = config.path("classifier_model", p);
    }
    if names.contains(&"similarity") {
        config = config.param("similarity_threshold", args.similarity_threshold);
    }
    if names.contains(&"service") {
        config = config
            .param("classify_endpoint", &args.classify_endpoint)
            .param("service_threshold", args.service_threshold);
    }
    config
}

fn cmd_eval_classification(a: EvalClassificationArgs) -> CliResult<()> {
    let loaded = load(&a.manifest, &a.corpus)?;
    let pairs = loaded.split().pairs.get(a.split);
    let resolved: Vec<(&crate::corpus::BugReport, &crate::corpus::BugReport)> = pairs
        .iter()
        .map(|p| {
            (
                loaded.corpus.get(&p.bug_a).expect("checked on load"),
                loaded.corpus.get(&p.bug_b).expect("checked on load"),
            )
        })
        .collect();
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    for name in &a.classifiers {
        let classifier = build_classifier(name, &a.classifier, &a.embedder, &loaded)?;
        let ledger = CostLedger::new();
        let decisions = classify_batch(classifier.as_ref(), &resolved, &ledger)?;
        let mut cm = ConfusionMatrix::default();
        for (d, p) in decisions.iter().zip(pairs) {
            cm.record(d.label == PairLabel::Duplicate, p.label == PairLabel::Duplicate);
        }
        let m = classification_metrics(&cm)?;
        rows.push(vec![
            name.clone(),
            a.split.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            m.accuracy.to_string(),
            cm.tp.to_string(),
            cm.fp.to_string(),
            cm.fn_.to_string(),
            cm.tn.to_string(),
            classifier.threshold().to_string(),
        ]);
        summary.insert(name.clone(), json!({ "f1": m.f1, "pair_classifications": ledger.counts().pair_classifications }));
    }
    write_csv(
        &a.out,
        &["backend", "split", "precision", "recall", "f1", "accuracy", "tp", "fp", "fn", "tn", "threshold"],
        &rows,
    )?;
    let names: Vec<&str> = a.classifiers.iter().map(String::as_str).collect();
    let run = classifier_config(
        embedder_config(base_config("eval-classification", &loaded, &a.manifest, &a.out), &a.embedder),
        &names,
        &a.classifier,
    )
    .param("split", a.split);
    write_sidecar(&a.out, run)?;
    print_json(json!(summary));
    Ok(())
}

fn cmd_run_cascade(a: RunCascadeArgs) -> CliResult<()> {
    validate_k_list(&a.k_list)?;
    let scenario = ScenarioConfig {
        mode: a.mode,
        method: a.method,
        k: a.k,
        query_fraction: a.query_fraction,
        seed: a.seed,
        include_independents: !a.exclude_independents,
        dedup_pairs: a.dedup,
        k_list: a.k_list.clone(),
    };
    scenario.validate()?;
    let loaded = load(&a.manifest, &a.corpus)?;
    let embedder: Box<dyn Embedder> = if a.method == Method::ClassificationOnly {
        Box::new(TfIdfEmbedder::fit(std::iter::empty(), 1))
    } else {
        build_embedder(&a.embedder, &loaded)?
    };
    let classifier: Box<dyn PairClassifier> = if a.method == Method::RetrievalOnly {
        Box::new(ConstantClassifier {
            probability: 1.0,
            threshold: 0.5,
        })
    } else {
        build_classifier(&a.classifier, &a.classifier_args, &a.embedder, &loaded)?
    };
    let backends = Backends {
        embedder: embedder.as_ref(),
        classifier: classifier.as_ref(),
    };
    let result = run_scenario(&scenario, loaded.split(), loaded.set(), &loaded.corpus, &backends)?;
    let mut run = RunConfig {
        seed: Some(a.seed),
        ..base_config("run-cascade", &loaded, &a.manifest, &a.out)
    }
    .param("scenario", &scenario);
    if a.method != Method::ClassificationOnly {
        run = embedder_config(run, &a.embedder);
    }
    if a.method != Method::RetrievalOnly {
        run = classifier_config(run.backend("classifier", &a.classifier), &[a.classifier.as_str()], &a.classifier_args);
    }
    print_json(json!({
        "ledger": result.ledger,
        "predicted": result.predicted,
        "queries": result.queries,
        "database": result.database,
    }));
    Envelope::new(run, result).write(&a.out)?;
    Ok(())
}

pub const REPORT_HEADER: [&str; 9] = [
    "method",
    "k",
    "precision",
    "recall",
    "f1",
    "accuracy",
    "wall_clock_ms",
    "embed_calls",
    "pair_classifications",
];

/// Rows of the merged report, one per (method, k). Each row comes from the
/// run with the smallest configured k that covers it; its cost columns are
/// that run's measured ledger and wall-clock.
pub fn report_rows(results: &[ScenarioResult]) -> Result<Vec<Vec<String>>> {
    let Some(first) = results.first() else {
        return Err(Error::Config("report needs at least one scenario".into()));
    };
    let key = |s: &ScenarioConfig| (s.mode, s.query_fraction.to_bits(), s.seed, s.include_independents, s.dedup_pairs);
    for r in results {
        if key(&r.scenario) != key(&first.scenario) {
            return Err(Error::Config(
                "scenario configs conflict: mode, query fraction, seed, independents and dedup must match".into(),
            ));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in results {
        if !seen.insert((r.scenario.method, r.scenario.k)) {
            return Err(Error::Config(format!(
                "scenario configs conflict: two runs of {} at k={}",
                r.scenario.method, r.scenario.k
            )));
        }
    }
    let mut rows = Vec::new();
    for method in Method::ALL {
        let mut runs: Vec<&ScenarioResult> = results.iter().filter(|r| r.scenario.method == method).collect();
        runs.sort_by_key(|r| r.scenario.k);
        let mut ks: Vec<usize> = runs.iter().flat_map(|r| r.metrics.iter().map(|m| m.k)).collect();
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            let (run, row) = runs
                .iter()
                .find_map(|r| r.metric_at(k).map(|m| (r, m)))
                .expect("k taken from these runs");
            rows.push(vec![
                method.to_string(),
                k.to_string(),
                row.precision_micro.to_string(),
                row.recall_macro.to_string(),
                row.f1.to_string(),
                row.accuracy.to_string(),
                run.timing.total_ms.to_string(),
                run.ledger.embed_calls.to_string(),
                run.ledger.pair_classifications.to_string(),
            ]);
        }
    }
    Ok(rows)
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let mut results = Vec::new();
    let mut run = RunConfig::new("report").path("out", &a.out);
    for (i, path) in a.inputs.iter().enumerate() {
        let env: Envelope<ScenarioResult> = read_artifact("--inputs", path)?;
        run = run.path(&format!("input{i}"), path).upstream(&format!("input{i}"), &env.config_checksum);
        results.push(env);
    }
    let upstream: Vec<Option<&String>> = results.iter().map(|e| e.config.upstream.get("manifest")).collect();
    if upstream.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Config("scenario configs conflict: inputs come from different manifests".into()).into());
    }
    let results: Vec<ScenarioResult> = results.into_iter().map(|e| e.data).collect();
    let rows = report_rows(&results)?;
    write_csv(&a.out, &REPORT_HEADER, &rows)?;
    write_sidecar(&a.out, run)?;
    print_json(json!({ "rows": rows.len() }));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let config = SynthConfig {
        clusters: a.clusters,
        mean_size: a.mean_size,
        independents: a.independents.unwrap_or(a.clusters),
        topics: a.topics,
        noise: a.noise,
        seed: a.seed,
    };
    let corpus = synth::generate(&config)?;
    match &a.out {
        Some(out) => {
            corpus.write_jsonl(out)?;
            let run = RunConfig {
                seed: Some(a.seed),
                ..RunConfig::new("synth")
            }
            .path("out", out)
            .param("synth", &config);
            write_sidecar(out, run)?;
            print_json(json!({ "stats": corpus_stats(&corpus) }));
        }
        None => corpus.write_jsonl_to(std::io::stdout().lock())?,
    }
    Ok(())
}
