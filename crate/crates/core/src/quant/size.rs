use std::path::Path;

use serde::Serialize;

use super::QuantError;
use crate::ir::{deserialize, weight_payload_bytes};

/// Byte counts of two serialized models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub weight_bytes_before: usize,
    pub weight_bytes_after: usize,
    /// `bytes_after / bytes_before`
    pub ratio: f64,
    pub weight_ratio: f64,
}

pub fn size_report(before: &[u8], after: &[u8]) -> Result<SizeReport, QuantError> {
    let weight_bytes_before = weight_payload_bytes(&deserialize(before)?);
    let weight_bytes_after = weight_payload_bytes(&deserialize(after)?);
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    Ok(SizeReport {
        bytes_before: before.len(),
        bytes_after: after.len(),
        weight_bytes_before,
        weight_bytes_after,
        ratio: ratio(after.len(), before.len()),
        weight_ratio: ratio(weight_bytes_after, weight_bytes_before),
    })
}

pub fn size_report_files(before: &Path, after: &Path) -> Result<SizeReport, QuantError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| QuantError::Io {
            path: p.display().to_string(),
            msg: e.to_string(),
        })
    };
    size_report(&read(before)?, &read(after)?)
}
