//! Busy/idle interval duration models.
//!
//! Two families are supported: a lognormal fitted by moment matching to a
//! Normal mean/variance, and a nonparametric model that is just the
//! normalised histogram of integer durations. Both feed the same
//! conditional-failure machinery that turns "time already spent in a state"
//! into "probability the state ends within the next Δt pulses".

use std::collections::BTreeMap;
use std::io::Write;

use libm::erfc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("mean duration must be finite and positive, got {0}")]
    Mean(f64),
    #[error("duration variance must be finite and non-negative, got {0}")]
    Variance(f64),
    #[error("cannot build an empirical model from zero samples")]
    NoSamples,
    #[error("interval durations must be at least one pulse, got {0}")]
    Duration(u64),
}

/// Anything with a CDF over non-negative durations.
pub trait DurationDistribution {
    fn cdf(&self, t: f64) -> f64;

    /// `1 - cdf(t)`; implementors override when they can do better.
    fn survival(&self, t: f64) -> f64 {
        1.0 - self.cdf(t)
    }
}

/// Lognormal parameters in log-duration space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalParams {
    pub mu_hat: f64,
    pub sigma_hat: f64,
}

impl LognormalParams {
    pub fn mean(&self) -> f64 {
        (self.mu_hat + 0.5 * self.sigma_hat * self.sigma_hat).exp()
    }

    pub fn variance(&self) -> f64 {
        let s2 = self.sigma_hat * self.sigma_hat;
        s2.exp_m1() * (2.0 * self.mu_hat + s2).exp()
    }

    pub fn median(&self) -> f64 {
        self.mu_hat.exp()
    }

    /// Standardised log-duration; `None` at `t <= 0`.
    fn z(&self, t: f64) -> Option<f64> {
        (t > 0.0).then(|| (t.ln() - self.mu_hat) / self.sigma_hat)
    }
}

impl DurationDistribution for LognormalParams {
    fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if self.sigma_hat == 0.0 {
            return if t >= self.median() { 1.0 } else { 0.0 };
        }
        let z = self.z(t).unwrap_or(f64::NEG_INFINITY);
        0.5 * erfc(-z / std::f64::consts::SQRT_2)
    }

    fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        if self.sigma_hat == 0.0 {
            return 1.0 - self.cdf(t);
        }
        let z = self.z(t).unwrap_or(f64::NEG_INFINITY);
        0.5 * erfc(z / std::f64::consts::SQRT_2)
    }
}

/// Moment-matched lognormal for a duration with mean `mu` and variance `var`.
///
/// `σ̂² = ln(1 + σ²/μ²)` and `μ̂ = ln(μ² / √(σ² + μ²))`, so the lognormal
/// reproduces the Normal's first two moments exactly.
pub fn gaussian_to_lognormal(mu: f64, var: f64) -> Result<LognormalParams, ModelError> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(ModelError::Mean(mu));
    }
    if !(var.is_finite() && var >= 0.0) {
        return Err(ModelError::Variance(var));
    }
    let ratio = var / (mu * mu);
    let sigma2 = ratio.ln_1p();
    Ok(LognormalParams {
        mu_hat: mu.ln() - 0.5 * sigma2,
        sigma_hat: sigma2.sqrt(),
    })
}

/// Lognormal CDF at `t`.
pub fn lognormal_cdf(params: &LognormalParams, t: f64) -> f64 {
    params.cdf(t)
}

/// Normalised histogram of integer durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    /// Distinct durations, ascending, with their sample counts.
    bins: Vec<(u64, u64)>,
    /// `cumulative[i]` is the number of samples `<= bins[i].0`.
    cumulative: Vec<u64>,
    total: u64,
}

impl EmpiricalDistribution {
    pub fn from_samples<I>(samples: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = u64>,
    {
        let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
        for d in samples {
            if d < 1 {
                return Err(ModelError::Duration(d));
            }
            *counts.entry(d).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(ModelError::NoSamples);
        }
        let bins: Vec<(u64, u64)> = counts.into_iter().collect();
        let cumulative = bins
            .iter()
            .scan(0, |acc, &(_, c)| {
                *acc += c;
                Some(*acc)
            })
            .collect::<Vec<_>>();
        let total = cumulative[cumulative.len() - 1];
        Ok(Self {
            bins,
            cumulative,
            total,
        })
    }

    pub fn sample_count(&self) -> u64 {
        self.total
    }

    pub fn support_max(&self) -> u64 {
        self.bins[self.bins.len() - 1].0
    }

    pub fn pmf(&self, duration: u64) -> f64 {
        self.bins
            .binary_search_by_key(&duration, |b| b.0)
            .map(|i| self.bins[i].1 as f64 / self.total as f64)
            .unwrap_or(0.0)
    }

    /// `(duration, probability)` for every observed duration.
    pub fn pmf_entries(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.bins
            .iter()
            .map(|&(d, c)| (d, c as f64 / self.total as f64))
    }

    fn count_at_or_below(&self, t: f64) -> u64 {
        if t < 1.0 {
            return 0;
        }
        let k = t.floor() as u64;
        let idx = self.bins.partition_point(|b| b.0 <= k);
        if idx == 0 {
            0
        } else {
            self.cumulative[idx - 1]
        }
    }
}

impl DurationDistribution for EmpiricalDistribution {
    fn cdf(&self, t: f64) -> f64 {
        self.count_at_or_below(t) as f64 / self.total as f64
    }

    fn survival(&self, t: f64) -> f64 {
        (self.total - self.count_at_or_below(t)) as f64 / self.total as f64
    }
}

/// Histogram model of the given durations.
pub fn empirical_from_samples(samples: &[u64]) -> Result<EmpiricalDistribution, ModelError> {
    EmpiricalDistribution::from_samples(samples.iter().copied())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntervalModel {
    Lognormal(LognormalParams),
    Empirical(EmpiricalDistribution),
}

impl DurationDistribution for IntervalModel {
    fn cdf(&self, t: f64) -> f64 {
        match self {
            IntervalModel::Lognormal(p) => p.cdf(t),
            IntervalModel::Empirical(e) => e.cdf(t),
        }
    }

    fn survival(&self, t: f64) -> f64 {
        match self {
            IntervalModel::Lognormal(p) => p.survival(t),
            IntervalModel::Empirical(e) => e.survival(t),
        }
    }
}

/// `P(X <= b | X > a) = (F(b) - F(a)) / (1 - F(a))`, computed from the
/// survival function. Returns 1 once the support is exhausted (`F(a) = 1`).
pub fn conditional_failure<D: DurationDistribution + ?Sized>(dist: &D, a: f64, b: f64) -> f64 {
    debug_assert!(b >= a && a >= 0.0, "conditional_failure needs b >= a >= 0");
    let survived = dist.survival(a);
    if survived <= 0.0 {
        return 1.0;
    }
    (1.0 - dist.survival(b) / survived).clamp(0.0, 1.0)
}

/// Probability a busy sub-band frees up within `latency` pulses.
pub fn busy_availability<D: DurationDistribution + ?Sized>(
    model: &D,
    elapsed: f64,
    latency: f64,
) -> f64 {
    conditional_failure(model, elapsed, elapsed + latency)
}

/// Probability an idle sub-band is still idle after `latency` pulses.
pub fn idle_availability<D: DurationDistribution + ?Sized>(
    model: &D,
    elapsed: f64,
    latency: f64,
) -> f64 {
    1.0 - conditional_failure(model, elapsed, elapsed + latency)
}

/// Writes `duration,pmf,cdf` rows for durations `1..=max_duration`.
pub fn write_model_csv<D, W>(model: &D, max_duration: u64, out: W) -> csv::Result<()>
where
    D: DurationDistribution + ?Sized,
    W: Write,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["duration", "pmf", "cdf"])?;
    let mut prev = model.cdf(0.0);
    for d in 1..=max_duration {
        let cdf = model.cdf(d as f64);
        w.write_record(&[d.to_string(), (cdf - prev).to_string(), cdf.to_string()])?;
        prev = cdf;
    }
    w.flush()?;
    Ok(())
}
