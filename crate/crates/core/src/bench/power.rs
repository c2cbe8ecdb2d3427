use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::BenchError;

/// One power sample. `t` is seconds relative to the start of the measured
/// run: negative timestamps are the idle baseline, the rest the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerReading {
    #[serde(rename = "timestamp_s")]
    pub t: f64,
    pub watts: f64,
}

/// Half-open time window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub const IDLE: Window = Window {
        start: f64::NEG_INFINITY,
        end: 0.0,
    };
    pub const RUN: Window = Window {
        start: 0.0,
        end: f64::INFINITY,
    };

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PowerTrace {
    pub readings: Vec<PowerReading>,
}

fn io(path: &Path, e: impl ToString) -> BenchError {
    BenchError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

impl PowerTrace {
    /// Reads a `timestamp_s,watts` CSV.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| io(path, e))?;
        let readings: Vec<PowerReading> = r.deserialize().collect::<Result<_, _>>().map_err(|e| io(path, e))?;
        if let Some(bad) = readings.iter().find(|r| !r.t.is_finite() || !r.watts.is_finite()) {
            return Err(io(path, format!("non-finite reading at t={}", bad.t)));
        }
        Ok(PowerTrace { readings })
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
        for r in &self.readings {
            w.serialize(r).map_err(|e| io(path, e))?;
        }
        w.flush().map_err(|e| io(path, e))
    }

    /// Span between the first and last reading in the run window.
    pub fn run_seconds(&self) -> f64 {
        let run = self.readings.iter().filter(|r| Window::RUN.contains(r.t)).map(|r| r.t);
        let (lo, hi) = run.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }
}

// Watts are summed as integer microwatts so that means and differences of
// decimal readings come out exact.
fn microwatts(w: f64) -> i64 {
    (w * 1e6).round() as i64
}

fn from_microwatts(uw: i128, n: i128) -> f64 {
    uw as f64 / n as f64 / 1e6
}

/// Mean of the readings inside `window`.
pub fn sample_power(trace: &PowerTrace, window: Window) -> Result<f64, BenchError> {
    let (sum, n) = trace
        .readings
        .iter()
        .filter(|r| window.contains(r.t))
        .fold((0i128, 0i128), |(s, n), r| (s + microwatts(r.watts) as i128, n + 1));
    if n == 0 {
        return Err(BenchError::NoReadings {
            start: window.start,
            end: window.end,
        });
    }
    Ok(from_microwatts(sum, n))
}

/// `(run - idle, run / reference)`.
pub fn power_delta_ratio(run_w: f64, idle_w: f64, reference_w: Option<f64>) -> Result<(f64, Option<f64>), BenchError> {
    for (name, v) in [
        ("run power", Some(run_w)),
        ("idle power", Some(idle_w)),
        ("reference power", reference_w),
    ] {
        if v.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return Err(BenchError::NonPositive(name));
        }
    }
    let delta = from_microwatts((microwatts(run_w) - microwatts(idle_w)) as i128, 1);
    Ok((delta, reference_w.map(|r| run_w / r)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerStats {
    pub mean_w: f64,
    pub idle_w: f64,
    pub delta_w: f64,
    pub ratio: Option<f64>,
    pub run_seconds: f64,
}

impl PowerStats {
    pub fn from_trace(trace: &PowerTrace, reference_w: Option<f64>) -> Result<Self, BenchError> {
        let mean_w = sample_power(trace, Window::RUN)?;
        let idle_w = sample_power(trace, Window::IDLE)?;
        let (delta_w, ratio) = power_delta_ratio(mean_w, idle_w, reference_w)?;
        Ok(PowerStats {
            mean_w,
            idle_w,
            delta_w,
            ratio,
            run_seconds: trace.run_seconds(),
        })
    }
}

/// A live source of instantaneous power readings.
pub trait PowerSampler: Send {
    fn read_watts(&mut self) -> Result<f64, BenchError>;
}

/// Reads a single number from a file such as a hwmon `power1_input` or an
/// INA3221 rail node, multiplied by `scale` to get watts.
#[derive(Debug, Clone)]
pub struct FileSampler {
    pub path: PathBuf,
    pub scale: f64,
}

impl FileSampler {
    /// hwmon reports microwatts.
    pub fn hwmon(path: impl Into<PathBuf>) -> Self {
        FileSampler {
            path: path.into(),
            scale: 1e-6,
        }
    }
}

impl PowerSampler for FileSampler {
    fn read_watts(&mut self) -> Result<f64, BenchError> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| io(&self.path, e))?;
        let raw: f64 = text.trim().parse().map_err(|e| io(&self.path, e))?;
        Ok(raw * self.scale)
    }
}

/// Replays fixed wattages in a loop.
#[derive(Debug, Clone)]
pub struct TraceReplayer {
    watts: Vec<f64>,
    pos: usize,
}

impl TraceReplayer {
    pub fn new(watts: Vec<f64>) -> Self {
        TraceReplayer { watts, pos: 0 }
    }
}

impl PowerSampler for TraceReplayer {
    fn read_watts(&mut self) -> Result<f64, BenchError> {
        let w = *self
            .watts
            .get(self.pos % self.watts.len().max(1))
            .ok_or(BenchError::NoReadings {
                start: f64::NEG_INFINITY,
                end: f64::INFINITY,
            })?;
        self.pos += 1;
        Ok(w)
    }
}

/// Samples `sampler` on its own thread every `interval`: first for `idle`
/// with nothing running, then while `work` runs on the calling thread.
pub fn measure_power<T>(
    sampler: &mut dyn PowerSampler,
    idle: Duration,
    interval: Duration,
    work: impl FnOnce() -> T,
) -> Result<(T, PowerTrace), BenchError> {
    let stop = AtomicBool::new(false);
    let origin = Instant::now() + idle;
    let since = |now: Instant| -> f64 {
        if now >= origin {
            (now - origin).as_secs_f64()
        } else {
            -(origin - now).as_secs_f64()
        }
    };
    std::thread::scope(|scope| {
        let handle = scope.spawn(|| -> Result<Vec<PowerReading>, BenchError> {
            let mut readings = Vec::new();
            loop {
                let done = stop.load(Ordering::Acquire);
                let now = Instant::now();
                readings.push(PowerReading {
                    t: since(now),
                    watts: sampler.read_watts()?,
                });
                if done {
                    return Ok(readings);
                }
                std::thread::sleep(interval);
            }
        });
        std::thread::sleep(origin.saturating_duration_since(Instant::now()));
        let out = work();
        stop.store(true, Ordering::Release);
        let readings = handle.join().expect("power sampler thread panicked")?;
        Ok((out, PowerTrace { readings }))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(points: &[(f64, f64)]) -> PowerTrace {
        PowerTrace {
            readings: points.iter().map(|&(t, watts)| PowerReading { t, watts }).collect(),
        }
    }

    #[test]
    fn flat_trace_mean() {
        assert_eq!(
            sample_power(&trace(&[(0.0, 5.8), (1.0, 5.8), (2.0, 5.8)]), Window::RUN).unwrap(),
            5.8
        );
        assert!(matches!(
            sample_power(&trace(&[(0.0, 5.8)]), Window::IDLE),
            Err(BenchError::NoReadings { .. })
        ));
    }

    #[test]
    fn square_wave_mean() {
        let points: Vec<(f64, f64)> = (0..1000)
            .map(|i| (i as f64 * 0.01, if (i / 7) % 2 == 0 { 7.25 } else { 5.5 }))
            .collect();
        let high = points.iter().filter(|p| p.1 == 7.25).count() as f64;
        let expected = (high * 7.25 + (1000.0 - high) * 5.5) / 1000.0;
        assert_eq!(sample_power(&trace(&points), Window::RUN).unwrap(), expected);
    }

    #[test]
    fn table_deltas() {
        for (run, delta) in [(6.8, 1.0), (6.6, 0.8), (6.4, 0.6), (6.3, 0.5)] {
            assert_eq!(power_delta_ratio(run, 5.8, None).unwrap().0, delta);
        }
        let (_, ratio) = power_delta_ratio(6.6, 5.8, Some(6.8)).unwrap();
        assert_eq!((ratio.unwrap() * 100.0).round() / 100.0, 0.97);
        assert!(matches!(
            power_delta_ratio(0.0, 5.8, None),
            Err(BenchError::NonPositive(_))
        ));
        assert!(matches!(
            power_delta_ratio(6.0, 5.8, Some(-1.0)),
            Err(BenchError::NonPositive(_))
        ));
    }

    #[test]
    fn trace_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let t = trace(&[(-1.0, 5.8), (-0.5, 5.8), (0.0, 6.8), (0.5, 6.8), (1.5, 6.8)]);
        t.save(&path).unwrap();
        assert!(std::fs::read_to_string(&path)
            .unwrap()
            .starts_with("timestamp_s,watts\n"));
        let loaded = PowerTrace::load(&path).unwrap();
        assert_eq!(loaded, t);
        let stats = PowerStats::from_trace(&loaded, Some(6.8)).unwrap();
        assert_eq!(
            (stats.mean_w, stats.idle_w, stats.delta_w, stats.ratio),
            (6.8, 5.8, 1.0, Some(1.0))
        );
        assert_eq!(stats.run_seconds, 1.5);
    }

    #[test]
    fn file_sampler_scales() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("power1_input");
        std::fs::write(&path, "6300000\n").unwrap();
        assert_eq!(FileSampler::hwmon(&path).read_watts().unwrap(), 6.3);
    }

    #[test]
    fn live_measurement_splits_idle_and_run() {
        let mut sampler = TraceReplayer::new(vec![6.0]);
        let (value, trace) = measure_power(
            &mut sampler,
            Duration::from_millis(20),
            Duration::from_millis(2),
            || {
                std::thread::sleep(Duration::from_millis(20));
                7
            },
        )
        .unwrap();
        assert_eq!(value, 7);
        assert!(trace.readings.iter().any(|r| r.t < 0.0));
        assert!(trace.readings.iter().any(|r| r.t >= 0.0));
        assert!(trace.readings.windows(2).all(|w| w[0].t <= w[1].t));
    }
}
