use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;

pub const REPORT_CSV_HEADER: &str =
    "precision,size_bytes,mean_latency_ms,throughput_ips,power_mean_w,power_delta_w,power_ratio";

/// One benchmarked model variant. Power columns are empty when no power
/// source was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub precision: String,
    pub size_bytes: u64,
    pub mean_latency_ms: f64,
    pub throughput_ips: f64,
    pub power_mean_w: Option<f64>,
    pub power_delta_w: Option<f64>,
    pub power_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub timer_resolution_ns: Option<u64>,
    /// Timed run duration per precision.
    #[serde(default)]
    pub run_seconds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    #[serde(default)]
    pub meta: ReportMeta,
}

const REFERENCE: &str = "original";

/// Checks row uniqueness and fills `power_ratio` against the `original`
/// row when it has a power reading.
pub fn make_report(mut rows: Vec<BenchRow>, meta: ReportMeta) -> Result<BenchReport, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let mut seen = HashSet::new();
    for row in &rows {
        if !seen.insert(row.precision.as_str()) {
            return Err(BenchError::DuplicatePrecision(row.precision.clone()));
        }
    }
    let reference = rows
        .iter()
        .find(|r| r.precision == REFERENCE)
        .and_then(|r| r.power_mean_w);
    if let Some(reference) = reference.filter(|&w| w > 0.0) {
        for row in &mut rows {
            row.power_ratio = row.power_mean_w.map(|w| w / reference);
        }
    }
    Ok(BenchReport { rows, meta })
}

fn io(path: &Path, e: impl ToString) -> BenchError {
    BenchError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

impl BenchReport {
    /// Adds or rejects a row, recomputing ratios.
    pub fn with_row(self, row: BenchRow) -> Result<BenchReport, BenchError> {
        let mut rows = self.rows;
        rows.push(row);
        make_report(rows, self.meta)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("rows serialize to CSV");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("CSV is UTF-8")
    }

    /// Parses a CSV report. Metadata is not part of the CSV form.
    pub fn from_csv(text: &str) -> Result<BenchReport, BenchError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<Result<Vec<BenchRow>, _>>()
            .map_err(|e| io(Path::new("<csv>"), e))?;
        make_report(rows, ReportMeta::default())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<BenchReport, BenchError> {
        let report: BenchReport = serde_json::from_str(text).map_err(|e| io(Path::new("<json>"), e))?;
        make_report(report.rows, report.meta)
    }

    fn is_json(path: &Path) -> bool {
        path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
    }

    /// Writes JSON for a `.json` path, CSV otherwise.
    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let text = if Self::is_json(path) {
            self.to_json()
        } else {
            self.to_csv()
        };
        std::fs::write(path, text).map_err(|e| io(path, e))
    }

    pub fn load(path: &Path) -> Result<BenchReport, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let parsed = if Self::is_json(path) {
            Self::from_json(&text)
        } else {
            Self::from_csv(&text)
        };
        parsed.map_err(|e| match e {
            BenchError::Io { msg, .. } => io(path, msg),
            other => other,
        })
    }
}
