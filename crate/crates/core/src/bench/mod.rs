//! Benchmark harness: per-image latency, throughput, power and the
//! per-precision comparison report.
//!
//! Timed regions cover executor calls only (including graph-level casts);
//! model loading, file reads and batch stacking happen outside the timer.

mod power;
mod report;

use std::time::{Duration, Instant};

use serde::Serialize;

pub use power::{
    measure_power, power_delta_ratio, sample_power, FileSampler, PowerReading, PowerSampler, PowerStats, PowerTrace,
    TraceReplayer, Window,
};
pub use report::{make_report, BenchReport, BenchRow, ReportMeta, REPORT_CSV_HEADER};

use crate::exec::{Dataset, ExecError, ExecOptions, Executor, TensorValue};
use crate::ir::IrError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("no power readings in window [{start}, {end})")]
    NoReadings { start: f64, end: f64 },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("duplicate report row for precision {0:?}")]
    DuplicatePrecision(String),
    #[error("report has no rows")]
    EmptyReport,
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// Something that executes one stacked batch.
pub trait BatchRunner {
    fn run_batch(&mut self, batch: &TensorValue) -> Result<(), BenchError>;
}

impl BatchRunner for Executor<'_> {
    fn run_batch(&mut self, batch: &TensorValue) -> Result<(), BenchError> {
        self.run_one(batch, ExecOptions::default())?;
        Ok(())
    }
}

fn timed<R: BatchRunner + ?Sized>(runner: &mut R, batch: &TensorValue) -> Result<f64, BenchError> {
    let start = Instant::now();
    runner.run_batch(batch)?;
    Ok(start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub batch_size: usize,
    pub warmup: usize,
    /// Post-warmup batch wall times in seconds.
    pub batch_seconds: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Per-image statistics from raw batch timings; the first `warmup`
    /// samples are dropped.
    pub fn from_samples(batch_seconds: &[f64], batch_size: usize, warmup: usize) -> Result<Self, BenchError> {
        if batch_size == 0 {
            return Err(BenchError::NonPositive("batch size"));
        }
        let kept = batch_seconds.get(warmup..).unwrap_or_default();
        if kept.is_empty() {
            return Err(BenchError::InvalidArg(format!(
                "no timed batches after {warmup} warmup"
            )));
        }
        if kept.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(BenchError::NonPositive("batch time"));
        }
        let per_image_ms = |s: f64| s / batch_size as f64 * 1e3;
        let mut sorted: Vec<f64> = kept.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let p95 = sorted[(n * 95).div_ceil(100) - 1];
        let mean = kept.iter().sum::<f64>() / n as f64;
        Ok(LatencyStats {
            batch_size,
            warmup,
            batch_seconds: kept.to_vec(),
            mean_ms: per_image_ms(mean),
            median_ms: per_image_ms(median),
            p95_ms: per_image_ms(p95),
            min_ms: per_image_ms(sorted[0]),
            max_ms: per_image_ms(sorted[n - 1]),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputStats {
    pub images: usize,
    pub invocations: usize,
    pub seconds: f64,
    pub images_per_second: f64,
}

impl ThroughputStats {
    pub fn new(images: usize, invocations: usize, seconds: f64) -> Result<Self, BenchError> {
        if seconds.is_nan() || seconds <= 0.0 {
            return Err(BenchError::NonPositive("timed seconds"));
        }
        Ok(ThroughputStats {
            images,
            invocations,
            seconds,
            images_per_second: images as f64 / seconds,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyRun {
    pub stats: LatencyStats,
    /// Sample indices of every batch, warmup included, in execution order.
    pub schedule: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputRun {
    pub stats: ThroughputStats,
    pub batch_sizes: Vec<usize>,
}

fn check_args(dataset: &Dataset, batch_size: usize) -> Result<(), BenchError> {
    if dataset.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(BenchError::NonPositive("batch size"));
    }
    Ok(())
}

/// Runs `warmup + timed` full batches, cycling through the dataset in order.
pub fn bench_latency<R: BatchRunner + ?Sized>(
    runner: &mut R,
    dataset: &Dataset,
    batch_size: usize,
    warmup: usize,
    timed_batches: usize,
) -> Result<LatencyRun, BenchError> {
    check_args(dataset, batch_size)?;
    if timed_batches == 0 {
        return Err(BenchError::NonPositive("timed batch count"));
    }
    let schedule = dataset.cycled_batches(batch_size, warmup + timed_batches, 0);
    let mut seconds = Vec::with_capacity(schedule.len());
    for indices in &schedule {
        let batch = dataset.batch(indices)?;
        seconds.push(timed(runner, &batch.tensor)?);
    }
    Ok(LatencyRun {
        stats: LatencyStats::from_samples(&seconds, batch_size, warmup)?,
        schedule,
    })
}

/// One pass over the dataset; the final batch keeps its true size.
pub fn bench_throughput<R: BatchRunner + ?Sized>(
    runner: &mut R,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<ThroughputRun, BenchError> {
    check_args(dataset, batch_size)?;
    let mut total = 0.0;
    let mut batch_sizes = Vec::new();
    for indices in dataset.epoch_batches(batch_size) {
        let batch = dataset.batch(&indices)?;
        total += timed(runner, &batch.tensor)?;
        batch_sizes.push(indices.len());
    }
    let images = batch_sizes.iter().sum();
    Ok(ThroughputRun {
        stats: ThroughputStats::new(images, batch_sizes.len(), total)?,
        batch_sizes,
    })
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let start = Instant::now();
        let mut now = Instant::now();
        while now == start {
            now = Instant::now();
        }
        best = best.min(now - start);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sample;

    struct Counting {
        sizes: Vec<usize>,
    }

    impl BatchRunner for Counting {
        fn run_batch(&mut self, batch: &TensorValue) -> Result<(), BenchError> {
            self.sizes.push(batch.shape()[0]);
            std::thread::sleep(Duration::from_micros(20));
            Ok(())
        }
    }

    fn dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                name: format!("{i:05}.mct"),
                image: TensorValue::f32([2, 2, 3], vec![i as f32; 12]).unwrap(),
                label: None,
            })
            .collect();
        Dataset::from_samples(samples).unwrap()
    }

    #[test]
    fn latency_arithmetic() {
        let s = LatencyStats::from_samples(&[0.5; 10], 32, 0).unwrap();
        assert_eq!((s.mean_ms, s.median_ms, s.p95_ms), (15.625, 15.625, 15.625));

        let samples = [9.0, 9.0, 9.0, 0.1, 0.2, 0.3, 0.4];
        let s = LatencyStats::from_samples(&samples, 1, 3).unwrap();
        assert_eq!(s.batch_seconds, vec![0.1, 0.2, 0.3, 0.4]);
        assert!(s.min_ms <= s.mean_ms && s.mean_ms <= s.max_ms && s.p95_ms >= s.median_ms);
        assert_eq!(s.max_ms, 400.0);

        assert!(LatencyStats::from_samples(&[0.1, 0.0], 1, 0).is_err());
        assert!(LatencyStats::from_samples(&[0.1], 1, 1).is_err());
    }

    #[test]
    fn throughput_arithmetic() {
        let t = ThroughputStats::new(3666, 115, 10.0).unwrap();
        assert!((t.images_per_second - 366.6).abs() < 1e-12);
        assert!(ThroughputStats::new(1, 1, 0.0).is_err());
    }

    #[test]
    fn throughput_visits_every_image_once() {
        let ds = dataset(70);
        let mut runner = Counting { sizes: Vec::new() };
        let run = bench_throughput(&mut runner, &ds, 32).unwrap();
        assert_eq!(runner.sizes, vec![32, 32, 6]);
        assert_eq!(run.stats.images, 70);
        assert_eq!(run.stats.invocations, 3);
        assert!(Dataset::from_samples(Vec::new()).is_err());
        assert!(matches!(
            bench_throughput(&mut runner, &ds, 0),
            Err(BenchError::NonPositive(_))
        ));
    }

    #[test]
    fn latency_cycles_small_datasets() {
        let ds = dataset(5);
        let mut runner = Counting { sizes: Vec::new() };
        let run = bench_latency(&mut runner, &ds, 4, 3, 2).unwrap();
        assert_eq!(runner.sizes, vec![4; 5]);
        assert_eq!(run.stats.batch_seconds.len(), 2);
        assert_eq!(run.schedule[1], vec![4, 0, 1, 2]);
    }

    #[test]
    fn clock_resolution_is_positive() {
        assert!(timer_resolution() > Duration::ZERO);
    }
}
