//! Confusion-matrix metrics and per-k aggregation of ranked results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: Option<usize>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub support: ConfusionMatrix,
    /// `tp + fp == 0`; precision reported as 0.
    pub precision_undefined: bool,
    /// `tp + fn == 0`; recall reported as 0.
    pub recall_undefined: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * (precision * recall) / (precision + recall)
    }
}

/// Precision, recall, F1 and accuracy `(tp + tn) / (tp + tn + fp + fn)`.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricRow> {
    if cm.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    Ok(MetricRow {
        k: None,
        precision,
        recall,
        f1: f1_score(precision, recall),
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
        support: *cm,
        precision_undefined,
        recall_undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bug_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    /// Predicted duplicate (kept by the classifier, or always for plain retrieval).
    pub retained: bool,
}

/// Everything needed to score one query at any cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: String,
    /// True duplicates present in the searched pool.
    pub relevant: Vec<String>,
    /// Rank order. For k-independent methods only the positives are listed.
    pub candidates: Vec<Candidate>,
    /// Number of items the query was compared against.
    pub pool_size: usize,
    /// When false, predictions do not depend on k.
    pub rank_cutoff: bool,
}

impl QueryOutcome {
    /// Predicted duplicates at cutoff `k`.
    pub fn predicted(&self, k: usize) -> impl Iterator<Item = &Candidate> {
        let limit = if self.rank_cutoff { k } else { usize::MAX };
        self.candidates.iter().take(limit).filter(|c| c.retained)
    }

    pub fn confusion(&self, k: usize) -> ConfusionMatrix {
        let mut predicted = 0u64;
        let mut tp = 0u64;
        for c in self.predicted(k) {
            predicted += 1;
            if self.relevant.contains(&c.bug_id) {
                tp += 1;
            }
        }
        let fp = predicted - tp;
        let fn_ = self.relevant.len() as u64 - tp;
        ConfusionMatrix {
            tp,
            fp,
            fn_,
            tn: self.pool_size as u64 - tp - fp - fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub k: usize,
    /// Mean per-query recall over queries with at least one true duplicate.
    pub recall_macro: f64,
    pub recall_micro: f64,
    /// Mean per-query precision over queries with at least one prediction.
    pub precision_macro: f64,
    pub precision_micro: f64,
    /// Mean of `hits / k` over all queries.
    pub precision_at_k: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub queries: usize,
    pub queries_with_duplicates: usize,
}

pub fn aggregate_curves(outcomes: &[QueryOutcome], k_list: &[usize]) -> Result<Vec<CurveRow>> {
    if outcomes.is_empty() {
        return Err(Error::Scenario("no query outcomes to aggregate".into()));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut total = ConfusionMatrix::default();
        let (mut recall_sum, mut recall_n) = (0.0, 0usize);
        let (mut prec_sum, mut prec_n) = (0.0, 0usize);
        let mut pak_sum = 0.0;
        for q in outcomes {
            let cm = q.confusion(k);
            total.merge(&cm);
            if !q.relevant.is_empty() {
                recall_sum += cm.tp as f64 / q.relevant.len() as f64;
                recall_n += 1;
            }
            if cm.tp + cm.fp > 0 {
                prec_sum += cm.tp as f64 / (cm.tp + cm.fp) as f64;
                prec_n += 1;
            }
            pak_sum += cm.tp as f64 / k as f64;
        }
        let (precision_micro, _) = ratio(total.tp, total.tp + total.fp);
        let (recall_micro, _) = ratio(total.tp, total.tp + total.fn_);
        rows.push(CurveRow {
            k,
            recall_macro: if recall_n == 0 { 0.0 } else { recall_sum / recall_n as f64 },
            recall_micro,
            precision_macro: if prec_n == 0 { 0.0 } else { prec_sum / prec_n as f64 },
            precision_micro,
            precision_at_k: pak_sum / outcomes.len() as f64,
            f1: f1_score(precision_micro, recall_micro),
            accuracy: ratio(total.tp + total.tn, total.total()).0,
            confusion: total,
            queries: outcomes.len(),
            queries_with_duplicates: recall_n,
        });
    }
    Ok(rows)
}
