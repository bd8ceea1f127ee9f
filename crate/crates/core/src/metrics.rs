//! Collision / missed-opportunity scoring.
//!
//! `C` is the fraction of truly busy pulses on which the predictor said
//! "available", `D` the fraction of truly idle pulses on which it did not,
//! and `ρ = αC + (1 - α)D`.

use std::io::Write;

use serde::{Deserialize, Serialize};

/// Half-open pulse range `[start, end)` over which decisions are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringWindow {
    pub start: u64,
    pub end: u64,
}

impl ScoringWindow {
    pub fn contains(&self, pulse: u64) -> bool {
        (self.start..self.end).contains(&pulse)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub busy_scored: u64,
    pub idle_scored: u64,
    pub collisions: u64,
    pub missed: u64,
}

impl ErrorCounts {
    pub fn record(&mut self, predicted_available: bool, truth_busy: bool) {
        if truth_busy {
            self.busy_scored += 1;
            self.collisions += u64::from(predicted_available);
        } else {
            self.idle_scored += 1;
            self.missed += u64::from(!predicted_available);
        }
    }

    #[must_use]
    pub fn merge(self, other: Self) -> Self {
        Self {
            busy_scored: self.busy_scored + other.busy_scored,
            idle_scored: self.idle_scored + other.idle_scored,
            collisions: self.collisions + other.collisions,
            missed: self.missed + other.missed,
        }
    }

    pub fn collision_rate(&self) -> f64 {
        ratio(self.collisions, self.busy_scored)
    }

    pub fn missed_rate(&self) -> f64 {
        ratio(self.missed, self.idle_scored)
    }

    pub fn finalize(&self, alpha: f64, window: ScoringWindow) -> MetricsReport {
        let collision_rate = self.collision_rate();
        let missed_rate = self.missed_rate();
        MetricsReport {
            collision_rate,
            missed_rate,
            weighted_error: weighted_error(alpha, collision_rate, missed_rate),
            alpha,
            counts: *self,
            window,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `αC + (1 - α)D`.
pub fn weighted_error(alpha: f64, collision_rate: f64, missed_rate: f64) -> f64 {
    alpha * collision_rate + (1.0 - alpha) * missed_rate
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub collision_rate: f64,
    pub missed_rate: f64,
    pub weighted_error: f64,
    pub alpha: f64,
    pub counts: ErrorCounts,
    pub window: ScoringWindow,
}

/// Writes one row per `(variant, seed)` followed by `mean` and `std` rows
/// for every variant, in first-seen order.
pub fn write_report_csv<W: Write>(
    rows: &[(String, u64, MetricsReport)],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "seed",
        "collision_rate",
        "missed_rate",
        "weighted_error",
        "alpha",
        "busy_scored",
        "idle_scored",
        "collisions",
        "missed",
        "window_start",
        "window_end",
    ])?;
    for (variant, seed, r) in rows {
        w.write_record(&[
            variant.clone(),
            seed.to_string(),
            r.collision_rate.to_string(),
            r.missed_rate.to_string(),
            r.weighted_error.to_string(),
            r.alpha.to_string(),
            r.counts.busy_scored.to_string(),
            r.counts.idle_scored.to_string(),
            r.counts.collisions.to_string(),
            r.counts.missed.to_string(),
            r.window.start.to_string(),
            r.window.end.to_string(),
        ])?;
    }
    let mut variants: Vec<&str> = Vec::new();
    for (v, _, _) in rows {
        if !variants.contains(&v.as_str()) {
            variants.push(v);
        }
    }
    for v in variants {
        let reports: Vec<&MetricsReport> = rows.iter().filter(|r| r.0 == v).map(|r| &r.2).collect();
        let summary = Summary::of(&reports);
        for (label, stats) in [("mean", summary.mean), ("std", summary.std)] {
            w.write_record(&[
                v.to_string(),
                label.to_string(),
                stats[0].to_string(),
                stats[1].to_string(),
                stats[2].to_string(),
                reports[0].alpha.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation of `(C, D, ρ)` across replications.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Summary {
    pub fn of(reports: &[&MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let values = |r: &MetricsReport| [r.collision_rate, r.missed_rate, r.weighted_error];
        let mut mean = [0.0; 3];
        for r in reports {
            for (m, v) in mean.iter_mut().zip(values(r)) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 3];
        if reports.len() > 1 {
            for r in reports {
                for ((s, v), m) in std.iter_mut().zip(values(r)).zip(mean) {
                    *s += (v - m).powi(2) / (n - 1.0);
                }
            }
            std.iter_mut().for_each(|s| *s = s.sqrt());
        }
        Self { mean, std }
    }
}
