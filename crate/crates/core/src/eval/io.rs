use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_label, EvalError};

/// One row of a scores file: `filename,logit,score` with `score = sigmoid(logit)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub filename: String,
    pub logit: f64,
    pub score: f64,
}

fn io(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>, EvalError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| io(path, e))
}

/// `filename,label` rows in file order.
pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, String)>, EvalError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io(path, e))?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| io(path, e))?;
        match (record.get(0), record.get(1)) {
            (Some(f), Some(l)) => rows.push((f.to_string(), l.to_string())),
            _ => return Err(io(path, "rows need filename,label")),
        }
    }
    Ok(rows)
}

fn stem(name: &str) -> &str {
    name.strip_suffix(".mct").unwrap_or(name)
}

/// Pairs each labelled file with its score (matching with or without the
/// `.mct` extension). Returns `(scores, labels)` in label-file order.
pub fn join_scores_labels(
    scores: &[ScoreRow],
    labels: &[(String, String)],
) -> Result<(Vec<f64>, Vec<bool>), EvalError> {
    let by_name: HashMap<&str, f64> = scores.iter().map(|r| (stem(&r.filename), r.score)).collect();
    let mut out = (Vec::with_capacity(labels.len()), Vec::with_capacity(labels.len()));
    for (file, label) in labels {
        let score = by_name
            .get(stem(file))
            .ok_or_else(|| EvalError::MissingScore(file.clone()))?;
        out.0.push(*score);
        out.1.push(parse_label(label)?);
    }
    Ok(out)
}
