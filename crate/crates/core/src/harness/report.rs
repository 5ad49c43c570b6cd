//! Reports computed purely from experiment logs: per-step speed and the
//! margin of selected samples.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::active::ExperimentLog;
use crate::rng::{stream, Stream};

/// Selection steps excluded from timing at the start of every log.
pub const WARMUP_STEPS: usize = 5;
pub const HISTOGRAM_BINS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub strategy: String,
    pub steps: usize,
    /// Mean wall-clock of one selection, in microseconds.
    pub mean_step_us: f64,
    /// Mapper rebuild time spread over the measured steps.
    pub amortized_rebuild_us: f64,
    pub mean_decoder_evals: f64,
    /// US step time over this strategy's step time.
    pub speedup_vs_us: Option<f64>,
}

fn strategies(logs: &[&ExperimentLog]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for log in logs {
        for r in &log.records {
            if !out.contains(&r.strategy) {
                out.push(r.strategy.clone());
            }
        }
    }
    out
}

/// Mean selection time per strategy, normalized to US.
pub fn speed_report(logs: &[&ExperimentLog], warmup: usize) -> Vec<SpeedRow> {
    let mut rows: Vec<SpeedRow> = strategies(logs)
        .into_iter()
        .map(|strategy| {
            let (mut n, mut time, mut rebuild, mut evals) = (0usize, 0u64, 0u64, 0u64);
            for log in logs {
                for r in log.records.iter().filter(|r| r.strategy == strategy).skip(warmup) {
                    let Some(t) = r.timings else { continue };
                    n += 1;
                    time += t.select.total;
                    rebuild += t.rebuild;
                    evals += r.decoder_evals;
                }
            }
            let d = n.max(1) as f64;
            SpeedRow {
                strategy,
                steps: n,
                mean_step_us: time as f64 / d,
                amortized_rebuild_us: rebuild as f64 / d,
                mean_decoder_evals: evals as f64 / d,
                speedup_vs_us: None,
            }
        })
        .collect();
    match rows.iter().find(|r| r.strategy == "us" && r.steps > 0) {
        Some(us) => {
            let base = us.mean_step_us;
            // sub-microsecond strategies have no meaningful ratio
            for r in rows.iter_mut().filter(|r| r.mean_step_us > 0.0) {
                r.speedup_vs_us = Some(base / r.mean_step_us);
            }
        }
        None => warn!("no US log; speedups omitted"),
    }
    rows
}

pub fn speed_to_csv(rows: &[SpeedRow]) -> String {
    let mut out = String::from(
        "strategy,steps,mean_step_us,amortized_rebuild_us,mean_decoder_evals,speedup_vs_us\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{}\n",
            r.strategy,
            r.steps,
            r.mean_step_us,
            r.amortized_rebuild_us,
            r.mean_decoder_evals,
            r.speedup_vs_us.map(|s| format!("{s:.3}")).unwrap_or_default()
        ));
    }
    out
}

/// Step time of one strategy at one pool size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub strategy: String,
    pub pool_size: usize,
    pub mean_step_us: f64,
    pub mean_decoder_evals: f64,
}

pub fn scaling_to_csv(points: &[ScalingPoint]) -> String {
    let mut out = String::from("strategy,pool_size,mean_step_us,mean_decoder_evals\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.3},{:.3}\n",
            p.strategy, p.pool_size, p.mean_step_us, p.mean_decoder_evals
        ));
    }
    out
}

/// Half-open range of step indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindow {
    pub start: usize,
    pub end: usize,
}

impl StepWindow {
    /// The final `fraction` of `steps` (at least one step).
    pub fn last_fraction(steps: usize, fraction: f64) -> Self {
        let len = ((steps as f64 * fraction).round() as usize).clamp(1, steps.max(1));
        StepWindow {
            start: steps.saturating_sub(len),
            end: steps,
        }
    }

    /// Every step after the first `fraction` of `steps`.
    pub fn after_fraction(steps: usize, fraction: f64) -> Self {
        StepWindow {
            start: (steps as f64 * fraction).floor() as usize,
            end: steps,
        }
    }

    /// Clamps the window to a run of `steps` steps.
    pub fn clamp(self, steps: usize) -> Self {
        if self.end > steps || self.start > steps {
            warn!(
                "margin window {}..{} exceeds the {steps}-step run; clamped",
                self.start, self.end
            );
        }
        StepWindow {
            start: self.start.min(steps),
            end: self.end.min(steps),
        }
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.start..self.end).contains(&step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub strategy: String,
    pub window: StepWindow,
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: f64,
}

/// Mean margin per (step, strategy), pooled over logs of the same strategy.
pub fn margin_series(logs: &[&ExperimentLog]) -> Vec<(usize, String, f64)> {
    let mut out = Vec::new();
    for strategy in strategies(logs) {
        let steps = logs
            .iter()
            .flat_map(|l| l.records.iter())
            .filter(|r| r.strategy == strategy)
            .map(|r| r.step)
            .max();
        let Some(last) = steps else { continue };
        for step in 0..=last {
            let (mut sum, mut n) = (0.0, 0usize);
            for log in logs {
                for r in log.records.iter().filter(|r| r.strategy == strategy && r.step == step) {
                    sum += r.margins.iter().sum::<f64>();
                    n += r.margins.len();
                }
            }
            if n > 0 {
                out.push((step, strategy.clone(), sum / n as f64));
            }
        }
    }
    out
}

pub fn series_to_csv(series: &[(usize, String, f64)]) -> String {
    let mut out = String::from("step,strategy,mean_margin\n");
    for (step, s, m) in series {
        out.push_str(&format!("{step},{s},{m:.6}\n"));
    }
    out
}

/// 30-bin histogram on [0, 1] of margins selected within `window`.
pub fn margin_histogram(logs: &[&ExperimentLog], strategy: &str, window: StepWindow) -> Histogram {
    let steps = logs
        .iter()
        .flat_map(|l| l.records.iter())
        .filter(|r| r.strategy == strategy)
        .map(|r| r.step + 1)
        .max()
        .unwrap_or(0);
    let window = window.clamp(steps);
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let mut sum = 0.0;
    for log in logs {
        for r in log
            .records
            .iter()
            .filter(|r| r.strategy == strategy && window.contains(r.step))
        {
            for &m in &r.margins {
                let bin = ((m * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                counts[bin] += 1;
                sum += m;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    Histogram {
        strategy: strategy.to_string(),
        window,
        counts,
        total,
        mean: if total > 0 { sum / total as f64 } else { f64::NAN },
    }
}

pub fn histograms_to_csv(hists: &[Histogram]) -> String {
    let mut out = String::from("strategy,window_start,window_end,bin_lo,bin_hi,count\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            let w = 1.0 / HISTOGRAM_BINS as f64;
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{c}\n",
                h.strategy,
                h.window.start,
                h.window.end,
                i as f64 * w,
                (i + 1) as f64 * w
            ));
        }
    }
    out
}

/// Mean margin of one log's selections within `window`.
pub fn windowed_mean_margin(log: &ExperimentLog, window: StepWindow) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in log.records.iter().filter(|r| window.contains(r.step)) {
        sum += r.margins.iter().sum::<f64>();
        n += r.margins.len();
    }
    (n > 0).then(|| sum / n as f64)
}

/// Percentile bootstrap interval `(lower, upper)` of the mean of `values`
/// at two-sided level `1 - alpha`.
pub fn bootstrap_mean_interval(values: &[f64], resamples: usize, alpha: f64, seed: u64) -> (f64, f64) {
    if values.is_empty() || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = stream(seed, Stream::Eval);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(alpha / 2.0), at(1.0 - alpha / 2.0))
}
