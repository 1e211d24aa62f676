//! Bug report ingestion, text cleaning and corpus summaries.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

static STOPWORD_FILE: &str = include_str!("stopwords.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORD_FILE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// Cleans raw report text.
///
/// Characters other than letters, digits, whitespace, `.` and `,` are
/// removed. A token that still contains a non-ASCII letter or digit is
/// treated as a non-English word and dropped. The rest are lowercased and
/// filtered against the shipped stopword list (periods and commas at the
/// token edges are ignored for the lookup). Tokens are joined by one space.
pub fn clean(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for raw in text.split_whitespace() {
        let mut token = String::with_capacity(raw.len());
        let mut foreign = false;
        for ch in raw.chars() {
            if ch.is_ascii_alphanumeric() || ch == '.' || ch == ',' {
                token.push(ch.to_ascii_lowercase());
            } else if ch.is_alphanumeric() {
                foreign = true;
                break;
            }
        }
        if foreign || token.is_empty() {
            continue;
        }
        let core = token.trim_matches(|c| c == '.' || c == ',');
        if core.is_empty() || is_stopword(core) {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&token);
    }
    out
}

/// Word tokens of already-cleaned text, with edge punctuation stripped.
pub fn tokens(clean_text: &str) -> impl Iterator<Item = &str> {
    clean_text
        .split_whitespace()
        .map(|t| t.trim_matches(|c| c == '.' || c == ','))
        .filter(|t| !t.is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugReport {
    pub bug_id: String,
    pub title: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dup_of: Option<String>,
    #[serde(skip)]
    pub clean_text: String,
    #[serde(skip)]
    pub clean_title: String,
    #[serde(skip)]
    pub clean_description: String,
}

impl BugReport {
    pub fn new(
        bug_id: impl Into<String>,
        title: impl Into<String>,
        description: impl Into<String>,
        dup_of: Option<String>,
    ) -> Self {
        let mut report = BugReport {
            bug_id: bug_id.into(),
            title: title.into(),
            description: description.into(),
            dup_of,
            clean_text: String::new(),
            clean_title: String::new(),
            clean_description: String::new(),
        };
        report.refresh_clean();
        report
    }

    fn refresh_clean(&mut self) {
        self.clean_title = clean(&self.title);
        self.clean_description = clean(&self.description);
        self.clean_text = match (self.clean_title.is_empty(), self.clean_description.is_empty()) {
            (true, _) => self.clean_description.clone(),
            (_, true) => self.clean_title.clone(),
            _ => format!("{} {}", self.clean_title, self.clean_description),
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Column names used when reading CSV corpora.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvColumns {
    pub bug_id: String,
    pub title: String,
    pub description: String,
    pub dup_of: String,
}

impl Default for CsvColumns {
    fn default() -> Self {
        CsvColumns {
            bug_id: "bug_id".into(),
            title: "title".into(),
            description: "description".into(),
            dup_of: "dup_of".into(),
        }
    }
}

/// Non-fatal problems seen during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarnings {
    /// `dup_of` links whose target is not in the corpus; the report is kept.
    pub unknown_dup_targets: usize,
    /// `dup_of` links pointing at the report itself; the link is cleared.
    pub self_links: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    reports: Vec<BugReport>,
    relations: BTreeSet<(String, String)>,
    index: HashMap<String, usize>,
    warnings: IngestWarnings,
}

impl Corpus {
    /// Builds a corpus, deriving duplicate relations from `dup_of` links.
    pub fn from_reports(mut reports: Vec<BugReport>) -> Result<Self> {
        let mut index = HashMap::with_capacity(reports.len());
        for (i, r) in reports.iter().enumerate() {
            if r.bug_id.is_empty() {
                return Err(Error::Record {
                    line: i as u64 + 1,
                    message: "empty bug_id".into(),
                });
            }
            if index.insert(r.bug_id.clone(), i).is_some() {
                return Err(Error::DuplicateBugId(r.bug_id.clone()));
            }
        }
        let mut warnings = IngestWarnings::default();
        let mut relations = BTreeSet::new();
        for r in &mut reports {
            let Some(target) = r.dup_of.as_deref() else { continue };
            if target == r.bug_id {
                warnings.self_links += 1;
                r.dup_of = None;
            } else if index.contains_key(target) {
                relations.insert(ordered_pair(&r.bug_id, target));
            } else {
                warnings.unknown_dup_targets += 1;
            }
        }
        Ok(Corpus {
            reports,
            relations,
            index,
            warnings,
        })
    }

    pub fn reports(&self) -> &[BugReport] {
        &self.reports
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn get(&self, bug_id: &str) -> Option<&BugReport> {
        self.index.get(bug_id).map(|&i| &self.reports[i])
    }

    /// Unordered duplicate relations, each stored as `(smaller, larger)`.
    pub fn relations(&self) -> &BTreeSet<(String, String)> {
        &self.relations
    }

    pub fn warnings(&self) -> &IngestWarnings {
        &self.warnings
    }

    /// Writes the canonical JSONL form (one report per line, input order).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl_to(BufWriter::new(file))
            .map_err(|e| match e {
                Error::Io { source, .. } => Error::io(path, source),
                other => other,
            })
    }

    pub fn write_jsonl_to<W: Write>(&self, mut w: W) -> Result<()> {
        let sink = Path::new("<output>");
        for r in &self.reports {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(sink, e))?;
        }
        w.flush().map_err(|e| Error::io(sink, e))
    }
}

fn ordered_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

pub fn ingest(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    match format {
        CorpusFormat::Jsonl => ingest_jsonl(path),
        CorpusFormat::Csv => ingest_csv(path, &CsvColumns::default()),
    }
}

fn finish(raw: Vec<(String, String, String, Option<String>)>) -> Result<Corpus> {
    let reports = raw
        .into_par_iter()
        .map(|(id, title, desc, dup)| BugReport::new(id, title, desc, dup))
        .collect();
    Corpus::from_reports(reports)
}

fn id_field(value: Option<&Value>) -> Option<String> {
    match value? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str, line: u64) -> Result<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) => Ok(String::new()),
        Some(_) => Err(Error::Record {
            line,
            message: format!("field `{key}` must be a string"),
        }),
        None => Err(Error::Record {
            line,
            message: format!("missing field `{key}`"),
        }),
    }
}

pub fn ingest_jsonl(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: line_no,
            message: format!("invalid JSON: {e}"),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Record {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        let bug_id = id_field(obj.get("bug_id"))
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Record {
                line: line_no,
                message: "missing field `bug_id`".into(),
            })?;
        let title = text_field(&obj, "title", line_no)?;
        let description = text_field(&obj, "description", line_no)?;
        let dup_of = id_field(obj.get("dup_of")).filter(|s| !s.is_empty());
        raw.push((bug_id, title, description, dup_of));
    }
    finish(raw)
}

pub fn ingest_csv(path: &Path, columns: &CsvColumns) -> Result<Corpus> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Artifact(format!("{other:?}")),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(&columns.bug_id).ok_or_else(|| Error::Record {
        line: 1,
        message: format!("missing column `{}`", columns.bug_id),
    })?;
    let title_col = col(&columns.title).ok_or_else(|| Error::Record {
        line: 1,
        message: format!("missing column `{}`", columns.title),
    })?;
    let desc_col = col(&columns.description).ok_or_else(|| Error::Record {
        line: 1,
        message: format!("missing column `{}`", columns.description),
    })?;
    let dup_col = col(&columns.dup_of);

    let mut raw = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bug_id = record.get(id_col).unwrap_or("").trim().to_string();
        if bug_id.is_empty() {
            return Err(Error::Record {
                line,
                message: "missing field `bug_id`".into(),
            });
        }
        let dup_of = dup_col
            .and_then(|c| record.get(c))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty());
        raw.push((
            bug_id,
            record.get(title_col).unwrap_or("").to_string(),
            record.get(desc_col).unwrap_or("").to_string(),
            dup_of,
        ));
    }
    finish(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub bugs: usize,
    pub dup_pairs: usize,
    pub separate_bugs: usize,
    pub dup_bug_ratio: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let involved: HashSet<&str> = corpus
        .relations
        .iter()
        .flat_map(|(a, b)| [a.as_str(), b.as_str()])
        .collect();
    let bugs = corpus.len();
    let separate_bugs = bugs - involved.len();
    CorpusStats {
        bugs,
        dup_pairs: corpus.relations.len(),
        separate_bugs,
        dup_bug_ratio: if bugs == 0 {
            0.0
        } else {
            (bugs - separate_bugs) as f64 / bugs as f64
        },
    }
}
