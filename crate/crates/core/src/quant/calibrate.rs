//! Streaming range calibration.
//!
//! Each observed tensor keeps a running min/max and, for percentile
//! calibration, a fixed 2048-bin histogram of absolute values whose range
//! doubles (merging neighbouring bins) whenever a larger value shows up.
//! Memory per tensor is therefore constant regardless of calibration set size.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QuantError;
use crate::exec::{Dataset, ExecError, ExecOptions, Executor, TensorValue};
use crate::ir::{DType, Graph, NodeId, OpKind, QuantParams};

pub const HISTOGRAM_BINS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationMethod {
    MinMax,
    /// Clip activations at this percentile (0-100] of `|x|`.
    Percentile(f64),
}

impl CalibrationMethod {
    pub fn tag(&self) -> String {
        match self {
            CalibrationMethod::MinMax => "minmax".into(),
            CalibrationMethod::Percentile(p) => format!("percentile({p})"),
        }
    }
}

impl std::str::FromStr for CalibrationMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "minmax" {
            return Ok(CalibrationMethod::MinMax);
        }
        let inner = s.strip_prefix("percentile(").and_then(|r| r.strip_suffix(')'));
        match inner.map(str::parse::<f64>) {
            Some(Ok(p)) if p > 0.0 && p <= 100.0 => Ok(CalibrationMethod::Percentile(p)),
            _ => Err(format!("unknown calibration method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Activation,
    Weight,
}

/// Histogram of `|x|` over `[0, limit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsHistogram {
    bins: Vec<u64>,
    limit: f64,
    total: u64,
}

impl Default for AbsHistogram {
    fn default() -> Self {
        AbsHistogram {
            bins: vec![0; HISTOGRAM_BINS],
            limit: 0.0,
            total: 0,
        }
    }
}

impl AbsHistogram {
    fn grow_to(&mut self, needed: f64) {
        if self.limit == 0.0 {
            self.limit = needed;
            return;
        }
        while self.limit <= needed {
            for i in 0..HISTOGRAM_BINS / 2 {
                self.bins[i] = self.bins[2 * i] + self.bins[2 * i + 1];
            }
            self.bins[HISTOGRAM_BINS / 2..].fill(0);
            self.limit *= 2.0;
        }
    }

    fn add(&mut self, values: &[f32]) {
        let amax = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        if amax > 0.0 && amax >= self.limit {
            // headroom so the max itself lands inside the last bin
            self.grow_to(if self.limit == 0.0 { amax * (1.0 + 1e-9) } else { amax });
        }
        let width = self.limit / HISTOGRAM_BINS as f64;
        for &v in values {
            let a = (v as f64).abs();
            let bin = if width > 0.0 {
                ((a / width) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            };
            self.bins[bin] += 1;
        }
        self.total += values.len() as u64;
    }

    /// Bin-wise merge; the coarser range wins.
    pub fn merge(&mut self, other: &AbsHistogram) {
        let mut other = other.clone();
        if other.limit > self.limit {
            std::mem::swap(self, &mut other);
        }
        if other.total == 0 {
            return;
        }
        if other.limit > 0.0 && self.limit > 0.0 {
            // align other onto self's (larger or equal, power-of-two multiple) range
            while other.limit < self.limit * (1.0 - 1e-12) {
                other.grow_to(other.limit);
            }
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Upper edge of the bin where the cumulative count reaches `p` percent.
    pub fn percentile(&self, p: f64) -> f64 {
        if self.total == 0 || self.limit == 0.0 {
            return 0.0;
        }
        let target = (p / 100.0 * self.total as f64).ceil() as u64;
        let width = self.limit / HISTOGRAM_BINS as f64;
        let mut seen = 0;
        for (i, &count) in self.bins.iter().enumerate() {
            seen += count;
            if seen >= target.max(1) {
                return (i + 1) as f64 * width;
            }
        }
        self.limit
    }
}

/// Streaming range observer for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeObserver {
    pub min: f64,
    pub max: f64,
    histogram: Option<AbsHistogram>,
}

impl RangeObserver {
    pub fn new(with_histogram: bool) -> Self {
        RangeObserver {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            histogram: with_histogram.then(AbsHistogram::default),
        }
    }

    /// Returns false if any value is non-finite.
    pub fn observe(&mut self, values: &[f32]) -> bool {
        for &v in values {
            if !v.is_finite() {
                return false;
            }
            self.min = self.min.min(v as f64);
            self.max = self.max.max(v as f64);
        }
        if let Some(h) = &mut self.histogram {
            h.add(values);
        }
        true
    }

    pub fn merge(&mut self, other: &RangeObserver) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        match (&mut self.histogram, &other.histogram) {
            (Some(a), Some(b)) => a.merge(b),
            (None, Some(b)) => self.histogram = Some(b.clone()),
            _ => {}
        }
    }

    /// Range used for deriving params under `method`.
    pub fn clipped_range(&self, method: CalibrationMethod) -> (f64, f64) {
        match (method, &self.histogram) {
            (CalibrationMethod::Percentile(p), Some(h)) => {
                let t = h.percentile(p);
                (self.min.max(-t), self.max.min(t))
            }
            _ => (self.min, self.max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEntry {
    pub min: f64,
    pub max: f64,
    pub params: QuantParams,
    pub kind: TensorKind,
}

/// JSON row: `{tensor_id, min, max, scale, zero_point, kind}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryRow {
    tensor_id: NodeId,
    min: f64,
    max: f64,
    scale: f64,
    zero_point: i32,
    kind: TensorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub method: String,
    pub entries: BTreeMap<NodeId, CalibrationEntry>,
}

impl CalibrationTable {
    pub fn get(&self, id: NodeId) -> Option<&CalibrationEntry> {
        self.entries.get(&id)
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<EntryRow> = self
            .entries
            .iter()
            .map(|(&tensor_id, e)| EntryRow {
                tensor_id,
                min: e.min,
                max: e.max,
                scale: e.params.scale,
                zero_point: e.params.zero_point,
                kind: e.kind,
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, QuantError> {
        let rows: Vec<EntryRow> = serde_json::from_str(text).map_err(|e| QuantError::Json(e.to_string()))?;
        let entries = rows
            .into_iter()
            .map(|r| {
                let params = QuantParams {
                    scale: r.scale,
                    zero_point: r.zero_point,
                };
                (
                    r.tensor_id,
                    CalibrationEntry {
                        min: r.min,
                        max: r.max,
                        params,
                        kind: r.kind,
                    },
                )
            })
            .collect();
        Ok(CalibrationTable {
            method: "loaded".into(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, QuantError> {
        let text = std::fs::read_to_string(path).map_err(|e| QuantError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_json(&text)
    }
}

/// Observes every activation over the calibration batches and every weight
/// exactly. Activations get affine params, weights symmetric ones.
pub fn calibrate_batches(
    graph: &Graph,
    batches: &[TensorValue],
    method: CalibrationMethod,
) -> Result<CalibrationTable, QuantError> {
    if batches.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    if let Some(n) = graph.nodes().find(|n| n.spec.dtype != DType::F32) {
        return Err(QuantError::NotFp32(n.id));
    }

    let with_hist = matches!(method, CalibrationMethod::Percentile(_));
    let mut observers: BTreeMap<NodeId, RangeObserver> = BTreeMap::new();
    let mut non_finite: Option<NodeId> = None;
    let mut executor = Executor::new(graph)?;
    for batch in batches {
        let mut observe = |id: NodeId, value: &TensorValue| {
            let values = value.as_f32().expect("FP32 graph produces FP32 values");
            let obs = observers.entry(id).or_insert_with(|| RangeObserver::new(with_hist));
            if obs.observe(values) {
                Ok(())
            } else {
                non_finite = Some(id);
                Err(ExecError::Unsupported("non-finite activation".into()))
            }
        };
        match executor.run_observed(&single_input(graph, batch), ExecOptions::default(), &mut observe) {
            Ok(_) => {}
            Err(_) if non_finite.is_some() => return Err(QuantError::NonFinite(non_finite.unwrap())),
            Err(e) => return Err(e.into()),
        }
    }

    let mut entries = BTreeMap::new();
    for (id, obs) in &observers {
        let (lo, hi) = obs.clipped_range(method);
        let params = QuantParams::affine(lo, hi);
        entries.insert(
            *id,
            CalibrationEntry {
                min: obs.min,
                max: obs.max,
                params,
                kind: TensorKind::Activation,
            },
        );
    }
    for node in graph.nodes().filter(|n| n.kind == OpKind::Const) {
        let values = TensorValue::from_le_bytes(node.spec.clone(), node.payload.as_deref().unwrap_or_default())?;
        let mut obs = RangeObserver::new(false);
        if !obs.observe(values.as_f32().unwrap()) {
            return Err(QuantError::NonFinite(node.id));
        }
        let params = QuantParams::symmetric(obs.min, obs.max);
        entries.insert(
            node.id,
            CalibrationEntry {
                min: obs.min,
                max: obs.max,
                params,
                kind: TensorKind::Weight,
            },
        );
    }
    Ok(CalibrationTable {
        method: method.tag(),
        entries,
    })
}

fn single_input(graph: &Graph, batch: &TensorValue) -> BTreeMap<String, TensorValue> {
    graph
        .inputs()
        .iter()
        .take(1)
        .map(|gi| (gi.name.clone(), batch.clone()))
        .collect()
}

/// Calibrates from a dataset, streaming it in batches of `batch_size`.
pub fn calibrate(
    graph: &Graph,
    data: &Dataset,
    method: CalibrationMethod,
    batch_size: usize,
) -> Result<CalibrationTable, QuantError> {
    let mut batches = Vec::new();
    for indices in data.epoch_batches(batch_size) {
        batches.push(data.batch(&indices)?.tensor);
    }
    calibrate_batches(graph, &batches, method)
}
