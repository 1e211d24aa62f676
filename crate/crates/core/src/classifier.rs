//! Pair classification: features, a logistic model trained with binary
//! cross-entropy, and alternative backends behind [`PairClassifier`].

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokens, BugReport};
use crate::embed::{cosine, euclidean, Embedder};
use crate::error::{Error, Result, ServiceError};
use crate::ledger::CostLedger;
use crate::rng;
use crate::service::{run_batches, ServiceClient, ServiceConfig};
use crate::split::{LabeledPair, PairLabel};

pub const FEATURE_COUNT: usize = 5;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFeatures {
    pub cosine_all: f64,
    pub cosine_title: f64,
    pub cosine_description: f64,
    /// Distance between the full-text embeddings.
    pub euclidean: f64,
    pub token_jaccard: f64,
}

impl PairFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.cosine_all,
            self.cosine_title,
            self.cosine_description,
            self.euclidean,
            self.token_jaccard,
        ]
    }
}

fn jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<&str> = tokens(a).collect();
    let sb: BTreeSet<&str> = tokens(b).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Symmetric similarity features of a report pair. Cosines involving an
/// empty field are 0.
pub fn pair_features(embedder: &dyn Embedder, a: &BugReport, b: &BugReport) -> Result<PairFeatures> {
    if a.clean_text.is_empty() && b.clean_text.is_empty() {
        return Err(Error::Config(format!(
            "reports `{}` and `{}` both have empty text",
            a.bug_id, b.bug_id
        )));
    }
    let v = embedder.embed_batch(&[
        &a.clean_text,
        &b.clean_text,
        &a.clean_title,
        &b.clean_title,
        &a.clean_description,
        &b.clean_description,
    ])?;
    let cos = |i: usize, j: usize| cosine(&v[i], &v[j]).unwrap_or(0.0);
    Ok(PairFeatures {
        cosine_all: cos(0, 1),
        cosine_title: cos(2, 3),
        cosine_description: cos(4, 5),
        euclidean: euclidean(&v[0].values, &v[1].values),
        token_jaccard: jaccard(&a.clean_text, &b.clean_text),
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy `-(y ln p + (1 - y) ln(1 - p))` with `p` clamped
/// to `[1e-12, 1 - 1e-12]`.
pub fn ce_loss(y: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticPairModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub config: ClassifierConfig,
    /// Mean training loss before training (index 0) and after each epoch.
    pub curve: Vec<f64>,
}

impl LogisticPairModel {
    pub fn initial(features: usize, config: ClassifierConfig) -> Self {
        LogisticPairModel {
            weights: vec![0.0; features],
            bias: 0.0,
            threshold: 0.5,
            config,
            curve: Vec::new(),
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn mean_loss(&self, x: &[Vec<f64>], y: &[f64]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        x.iter().zip(y).map(|(xi, yi)| ce_loss(*yi, self.probability(xi))).sum::<f64>() / x.len() as f64
    }

    /// Gradient of the mean loss: `(dL/dw, dL/db)`, using `dL/dlogit = p - y`.
    pub fn gradient(&self, x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = 0.0;
        for (xi, yi) in x.iter().zip(y) {
            let r = self.probability(xi) - yi;
            gb += r;
            for (g, v) in gw.iter_mut().zip(xi) {
                *g += r * v;
            }
        }
        let n = x.len().max(1) as f64;
        gw.iter_mut().for_each(|g| *g /= n);
        (gw, gb / n)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: LogisticPairModel = serde_json::from_slice(&bytes)?;
        if model.weights.iter().chain([&model.bias]).any(|w| !w.is_finite()) {
            return Err(Error::Artifact("classifier has non-finite weights".into()));
        }
        Ok(model)
    }
}

/// Mini-batch gradient descent on mean cross-entropy.
pub fn fit_logistic(x: &[Vec<f64>], y: &[f64], config: ClassifierConfig) -> Result<LogisticPairModel> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Config(format!(
            "logistic training needs matching non-empty inputs, got {} rows and {} labels",
            x.len(),
            y.len()
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::Config("batch size and learning rate must be positive".into()));
    }
    let mut model = LogisticPairModel::initial(x[0].len(), config);
    model.curve.push(model.mean_loss(x, y));
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = rng::substream(config.seed, rng::CLASSIFIER);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| x[i].clone()).collect();
            let by: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (gw, gb) = model.gradient(&bx, &by);
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= config.learning_rate * g;
            }
            model.bias -= config.learning_rate * gb;
            if model.weights.iter().chain([&model.bias]).any(|w| !w.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    loss: f64::NAN,
                });
            }
        }
        let loss = model.mean_loss(x, y);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0, loss });
        }
        model.curve.push(loss);
    }
    Ok(model)
}

fn f1_at(probs: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, l) in probs.iter().zip(labels) {
        match (*p >= threshold, *l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    }
}

/// Grid point in `{0.01, 0.02, ..., 0.99}` with the best F1; the lowest wins ties.
pub fn tune_threshold(probs: &[f64], labels: &[bool]) -> f64 {
    let mut best = (0.5, f64::NEG_INFINITY);
    for i in 1..=99 {
        let t = f64::from(i) / 100.0;
        let f1 = f1_at(probs, labels, t);
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    best.0
}

type Lookup<'a> = dyn Fn(&str) -> Option<&'a BugReport> + Sync + 'a;

fn labeled_features<'a>(
    pairs: &[LabeledPair],
    lookup: &Lookup<'a>,
    embedder: &dyn Embedder,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let rows: Vec<(Vec<f64>, f64)> = pairs
        .par_iter()
        .map(|p| {
            let a = lookup(&p.bug_a).ok_or_else(|| Error::Artifact(format!("unknown bug `{}`", p.bug_a)))?;
            let b = lookup(&p.bug_b).ok_or_else(|| Error::Artifact(format!("unknown bug `{}`", p.bug_b)))?;
            Ok((pair_features(embedder, a, b)?.to_vec(), p.label.as_target()))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().unzip())
}

/// Trains the logistic pair model on `train` pairs; when `dev` pairs are
/// given the decision threshold is tuned on them for F1.
pub fn train_classifier<'a>(
    train: &[LabeledPair],
    dev: Option<&[LabeledPair]>,
    lookup: &Lookup<'a>,
    embedder: &dyn Embedder,
    config: ClassifierConfig,
) -> Result<LogisticPairModel> {
    let (x, y) = labeled_features(train, lookup, embedder)?;
    let mut model = fit_logistic(&x, &y, config)?;
    if let Some(dev) = dev.filter(|d| !d.is_empty()) {
        let (dx, dy) = labeled_features(dev, lookup, embedder)?;
        let probs: Vec<f64> = dx.iter().map(|r| model.probability(r)).collect();
        let labels: Vec<bool> = dy.iter().map(|v| *v == 1.0).collect();
        model.threshold = tune_threshold(&probs, &labels);
    }
    Ok(model)
}

/// A backend that scores report pairs as duplicate probabilities.
pub trait PairClassifier: Send + Sync {
    fn name(&self) -> &str;

    fn threshold(&self) -> f64;

    fn probabilities(&self, pairs: &[(&BugReport, &BugReport)]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub probability: f64,
    pub label: PairLabel,
}

fn decide(probability: f64, threshold: f64) -> Decision {
    Decision {
        probability,
        label: if probability >= threshold {
            PairLabel::Duplicate
        } else {
            PairLabel::NonDuplicate
        },
    }
}

/// Classifies one pair, charging one pair classification to the ledger.
pub fn classify(
    classifier: &dyn PairClassifier,
    a: &BugReport,
    b: &BugReport,
    ledger: &CostLedger,
) -> Result<Decision> {
    Ok(classify_batch(classifier, &[(a, b)], ledger)?[0])
}

pub fn classify_batch(
    classifier: &dyn PairClassifier,
    pairs: &[(&BugReport, &BugReport)],
    ledger: &CostLedger,
) -> Result<Vec<Decision>> {
    let probs = classifier.probabilities(pairs)?;
    if probs.len() != pairs.len() {
        return Err(ServiceError::CountMismatch {
            what: "probability",
            expected: pairs.len(),
            actual: probs.len(),
        }
        .into());
    }
    ledger.add_pair_classifications(pairs.len() as u64);
    let t = classifier.threshold();
    Ok(probs.into_iter().map(|p| decide(p, t)).collect())
}

/// Logistic model over [`PairFeatures`] computed fresh for every pair.
pub struct LogisticClassifier<E> {
    pub model: LogisticPairModel,
    pub embedder: E,
}

impl<E: Embedder> PairClassifier for LogisticClassifier<E> {
    fn name(&self) -> &str {
        "logistic"
    }

    fn threshold(&self) -> f64 {
        self.model.threshold
    }

    fn probabilities(&self, pairs: &[(&BugReport, &BugReport)]) -> Result<Vec<f64>> {
        pairs
            .par_iter()
            .map(|(a, b)| Ok(self.model.probability(&pair_features(&self.embedder, a, b)?.to_vec())))
            .collect()
    }
}

/// Duplicate when the full-text cosine reaches a fixed threshold.
pub struct SimilarityRule<E> {
    pub embedder: E,
    pub threshold: f64,
}

impl<E: Embedder> PairClassifier for SimilarityRule<E> {
    fn name(&self) -> &str {
        "similarity"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn probabilities(&self, pairs: &[(&BugReport, &BugReport)]) -> Result<Vec<f64>> {
        pairs
            .par_iter()
            .map(|(a, b)| {
                let v = self.embedder.embed_batch(&[&a.clean_text, &b.clean_text])?;
                Ok(cosine(&v[0], &v[1]).unwrap_or(0.0).max(0.0))
            })
            .collect()
    }
}

/// Ground-truth cluster lookup. For pipeline verification only.
pub struct OracleClassifier {
    membership: HashMap<String, usize>,
}

impl OracleClassifier {
    pub fn new(set: &crate::graph::ClusterSet) -> Self {
        OracleClassifier {
            membership: set
                .membership()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl PairClassifier for OracleClassifier {
    fn name(&self) -> &str {
        "oracle"
    }

    fn threshold(&self) -> f64 {
        0.5
    }

    fn probabilities(&self, pairs: &[(&BugReport, &BugReport)]) -> Result<Vec<f64>> {
        Ok(pairs
            .iter()
            .map(|(a, b)| {
                match (self.membership.get(&a.bug_id), self.membership.get(&b.bug_id)) {
                    (Some(x), Some(y)) if x == y => 1.0,
                    _ => 0.0,
                }
            })
            .collect())
    }
}

/// Returns the same probability for every pair.
pub struct ConstantClassifier {
    pub probability: f64,
    pub threshold: f64,
}

impl PairClassifier for ConstantClassifier {
    fn name(&self) -> &str {
        "constant"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn probabilities(&self, pairs: &[(&BugReport, &BugReport)]) -> Result<Vec<f64>> {
        Ok(vec![self.probability; pairs.len()])
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    pairs: Vec<[&'a str; 2]>,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    probabilities: Vec<f64>,
}

/// Client for `POST /classify {"pairs": [[a, b], ...]}` →
/// `{"probabilities": [...]}`. Texts sent are the cleaned report texts.
pub struct RemoteClassifier {
    client: ServiceClient,
    threshold: f64,
}

impl RemoteClassifier {
    pub fn new(config: ServiceConfig, threshold: f64) -> Self {
        RemoteClassifier {
            client: ServiceClient::new(config),
            threshold,
        }
    }

    /// Scores raw text pairs.
    pub fn classify_texts(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        let cfg = self.client.config();
        run_batches(pairs, cfg.batch_size, cfg.max_in_flight, |batch| {
            let request = ClassifyRequest {
                pairs: batch.iter().map(|(a, b)| [*a, *b]).collect(),
            };
            let response: ClassifyResponse = self.client.post("/classify", &request)?;
            if response.probabilities.len() != batch.len() {
                return Err(ServiceError::CountMismatch {
                    what: "probability",
                    expected: batch.len(),
                    actual: response.probabilities.len(),
                }
                .into());
            }
            if let Some((index, &value)) = response
                .probabilities
                .iter()
                .enumerate()
                .find(|(_, p)| !(0.0..=1.0).contains(*p))
            {
                return Err(ServiceError::OutOfRange { index, value }.into());
            }
            Ok(response.probabilities)
        })
    }
}

impl PairClassifier for RemoteClassifier {
    fn name(&self) -> &str {
        "service"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn probabilities(&self, pairs: &[(&BugReport, &BugReport)]) -> Result<Vec<f64>> {
        let texts: Vec<(&str, &str)> = pairs
            .iter()
            .map(|(a, b)| (a.clean_text.as_str(), b.clean_text.as_str()))
            .collect();
        self.classify_texts(&texts)
    }
}
