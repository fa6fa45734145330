//! Wall-clock measurement: warm-up calls, then the median and interquartile
//! range of repeated samples, taken single-threaded under a global lock.

use std::sync::Mutex;
use std::time::Instant;

use crate::config::TimingSettings;

/// Serializes measurements so concurrent sweep work cannot skew them.
static MEASUREMENT_LOCK: Mutex<()> = Mutex::new(());

/// Inner-loop count is capped so a slow calibration cannot explode.
const MAX_INNER_LOOPS: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub median_ns: f64,
    pub iqr_ns: f64,
    /// Per-call times, one per sample.
    pub samples_ns: Vec<f64>,
    /// Calls per sample; above 1 when a single call is below resolution.
    pub inner_loops: u64,
}

impl Timing {
    pub fn note(&self) -> String {
        if self.inner_loops > 1 {
            format!("sub-resolution: {} calls per sample", self.inner_loops)
        } else {
            String::new()
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Time `f` per the configured protocol. `f` runs in a one-thread pool.
pub fn measure<F>(settings: &TimingSettings, mut f: F) -> Timing
where
    F: FnMut() + Send,
{
    let _guard = MEASUREMENT_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    lograd::exec::single_threaded(move || {
        for _ in 0..settings.warmup {
            f();
        }
        let t0 = Instant::now();
        f();
        let single = t0.elapsed().as_nanos().max(1) as u64;
        let inner_loops = if single >= settings.min_sample_ns {
            1
        } else {
            settings.min_sample_ns.div_ceil(single).min(MAX_INNER_LOOPS)
        };
        let mut samples_ns: Vec<f64> = (0..settings.repetitions)
            .map(|_| {
                let t = Instant::now();
                for _ in 0..inner_loops {
                    f();
                }
                t.elapsed().as_nanos() as f64 / inner_loops as f64
            })
            .collect();
        let mut sorted = samples_ns.clone();
        sorted.sort_by(f64::total_cmp);
        let median_ns = quantile(&sorted, 0.5);
        let iqr_ns = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        samples_ns.shrink_to_fit();
        Timing {
            median_ns,
            iqr_ns,
            samples_ns,
            inner_loops,
        }
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(quantile(&d, 0.5), 4.0);
        assert_eq!(quantile(&d, 0.25), 2.5);
        assert_eq!(quantile(&d, 0.75), 5.5);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [512.0, 1024.0, 2048.0, 4096.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(1.2)))
            .collect();
        assert!((log_log_slope(&pts) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn tiny_work_gets_batched() {
        let s = TimingSettings {
            repetitions: 7,
            warmup: 2,
            min_sample_ns: 200_000,
        };
        let mut calls = 0u64;
        let t = measure(&s, || calls += 1);
        assert!(t.inner_loops > 1);
        assert_eq!(t.samples_ns.len(), 7);
        assert!(!t.note().is_empty());
        assert_eq!(calls, 3 + 7 * t.inner_loops);
    }
}
