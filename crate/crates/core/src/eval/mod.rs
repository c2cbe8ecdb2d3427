//! Binary classification evaluation: label condensation, confusion matrix,
//! accuracy/precision/recall/F1, ROC AUC and stratified splitting.

mod io;
mod split;

use serde::{Deserialize, Serialize};

pub use io::{join_scores_labels, read_labels_csv, read_scores_csv, write_scores_csv, ScoreRow};
pub use split::{holdout_split, stratified_kfold, FoldAssignment};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {scores} scores, {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("ROC AUC needs both positive and negative labels")]
    SingleClass,
    #[error("unknown class name {0:?}")]
    UnknownLabel(String),
    #[error("fold count must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("class has {members} members, fewer than {k} folds")]
    ClassTooSmall { members: usize, k: usize },
    #[error("holdout fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("no score for {0:?}")]
    MissingScore(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryLabel {
    SkinCancer,
    Other,
}

impl BinaryLabel {
    /// SkinCancer is the positive class.
    pub fn is_positive(self) -> bool {
        self == BinaryLabel::SkinCancer
    }
}

/// The 14 source classes and their condensed label.
pub const CLASS_MAP: [(&str, BinaryLabel); 14] = [
    ("Basal cell carcinoma", BinaryLabel::SkinCancer),
    ("Melanoma", BinaryLabel::SkinCancer),
    ("Squamous cell carcinoma", BinaryLabel::SkinCancer),
    ("Actinic keratoses", BinaryLabel::Other),
    ("Benign keratosis-like lesions", BinaryLabel::Other),
    ("Chickenpox", BinaryLabel::Other),
    ("Cowpox", BinaryLabel::Other),
    ("Dermatofibroma", BinaryLabel::Other),
    ("Healthy", BinaryLabel::Other),
    ("HFMD", BinaryLabel::Other),
    ("Measles", BinaryLabel::Other),
    ("Melanocytic nevi", BinaryLabel::Other),
    ("Monkeypox", BinaryLabel::Other),
    ("Vascular lesions", BinaryLabel::Other),
];

pub fn map_label(name: &str) -> Result<BinaryLabel, EvalError> {
    let trimmed = name.trim();
    CLASS_MAP
        .iter()
        .find(|(class, _)| class.eq_ignore_ascii_case(trimmed))
        .map(|&(_, label)| label)
        .ok_or_else(|| EvalError::UnknownLabel(name.to_string()))
}

/// Accepts a class name, a condensed label name, or `0`/`1`.
pub fn parse_label(text: &str) -> Result<bool, EvalError> {
    match text.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        t if t.eq_ignore_ascii_case("SkinCancer") => Ok(true),
        t if t.eq_ignore_ascii_case("Other") => Ok(false),
        t => map_label(t).map(BinaryLabel::is_positive),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    match scores.iter().position(|s| s.is_nan() || s.is_infinite()) {
        Some(i) => Err(EvalError::NonFinite(i)),
        None => Ok(()),
    }
}

/// `score >= threshold` predicts positive.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionMatrix, EvalError> {
    check_inputs(scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Undefined ratios (zero denominator) are `None` and omitted from JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "accuracy,precision,recall,f1,roc_auc";

impl MetricsReport {
    /// One CSV row matching [`METRICS_CSV_HEADER`]; absent values are empty.
    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [Some(self.accuracy), self.precision, self.recall, self.f1, self.roc_auc]
            .map(cell)
            .join(",")
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean; `None` when either input is missing or both are zero.
pub fn f1_score(precision: Option<f64>, recall: Option<f64>) -> Option<f64> {
    let (p, r) = (precision?, recall?);
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

pub fn metrics(cm: &ConfusionMatrix, auc: Option<f64>) -> Result<MetricsReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    Ok(MetricsReport {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        recall,
        f1: f1_score(precision, recall),
        roc_auc: auc,
    })
}

/// Trapezoidal area under the ROC curve over all distinct thresholds.
/// Computed in integers (twice the area in TP x FP units) and divided once,
/// so it is exactly the Mann-Whitney statistic with ties counted as half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp, mut area2) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - prev_fp) * (tp + prev_tp);
    }
    Ok(area2 as f64 / (2 * pos * neg) as f64)
}

/// Labels and scores from the run/eval CSV pair, evaluated at `threshold`.
pub fn evaluate(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport, EvalError> {
    let cm = confusion(scores, labels, threshold)?;
    let auc = match roc_auc(scores, labels) {
        Ok(a) => Some(a),
        Err(EvalError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    metrics(&cm, auc)
}
