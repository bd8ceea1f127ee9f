//! Prior-free Bayesian online changepoint detection.
//!
//! The detector consumes a univariate stream of positive interval durations
//! and maintains a discrete posterior over the current run length `r`, i.e.
//! the number of most recent observations that belong to the current
//! partition. There is no conjugate prior: each partition is modelled by a
//! Normal whose mean and variance are the plain moments of the data in it,
//! so a partition needs at least two data before it can score anything.
//!
//! ```text
//! P(r_t = 0)       ∝ Σ_{r' ≥ 1} h · π(r'+1) · P(r_{t-1} = r')
//! P(r_t = 1)       ∝ P(r_{t-1} = 0)
//! P(r_t = r' + 1)  ∝ (1 - h) · π(r'+1) · γ · P(r_{t-1} = r'),   r' ≥ 1
//! ```
//!
//! `π(k)` is the Normal density of the newest datum under the moments of the
//! `k` most recent observations (the newest included) and `γ` scales how
//! strongly growth is favoured over a reset. A run of length zero means the
//! last datum closed a partition; the next datum always starts a new one.
//!
//! The hazard `h` is not fixed. A second posterior over `(r, a)`, where `a`
//! counts changepoints since the start of the stream, is advanced with the
//! same likelihoods and a hazard of `(a + 1) / (t + 2)`; its posterior mean
//! drives the run-length recursion on the next step.
//!
//! Memory is bounded: run lengths beyond `L` are folded into `r = L`, the
//! high-`r` tail below `θ_r` is dropped, and changepoint-count columns whose
//! marginal falls below `θ_a` at either end of the `a` axis are discarded.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used by the normalisation checks run in debug builds.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum BocdError {
    #[error("max_run_length must be at least 2, got {0}")]
    MaxRunLength(usize),
    #[error("sensitivity must be finite and positive, got {0}")]
    Sensitivity(f64),
    #[error("{name} must lie in [0, 0.1], got {value}")]
    PruneThreshold { name: &'static str, value: f64 },
    #[error("variance floor must be finite and positive, got {0}")]
    VarianceFloor(f64),
    #[error("observation must be finite and positive, got {0}")]
    Observation(f64),
    #[error("predictive likelihood needs at least two data, got {0}")]
    TooFewData(usize),
}

/// Detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BocdConfig {
    /// Largest run length tracked (`L`); older mass accumulates at `L`.
    pub max_run_length: usize,
    /// Growth weight `γ`. Larger values make resets rarer.
    pub sensitivity: f64,
    /// `θ_r`: high-`r` tail entries below this are discarded.
    pub run_length_prune_threshold: f64,
    /// `θ_a`: changepoint-count columns below this at either tail are discarded.
    pub changepoint_count_prune_threshold: f64,
    /// Lower bound on partition variances, in squared pulses.
    pub variance_floor: f64,
}

impl Default for BocdConfig {
    fn default() -> Self {
        Self {
            max_run_length: 60,
            sensitivity: 60.0,
            run_length_prune_threshold: 1e-6,
            changepoint_count_prune_threshold: 1e-6,
            variance_floor: 1e-4,
        }
    }
}

impl BocdConfig {
    pub fn validate(&self) -> Result<(), BocdError> {
        if self.max_run_length < 2 {
            return Err(BocdError::MaxRunLength(self.max_run_length));
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(BocdError::Sensitivity(self.sensitivity));
        }
        for (name, value) in [
            (
                "run_length_prune_threshold",
                self.run_length_prune_threshold,
            ),
            (
                "changepoint_count_prune_threshold",
                self.changepoint_count_prune_threshold,
            ),
        ] {
            if !(0.0..=0.1).contains(&value) {
                return Err(BocdError::PruneThreshold { name, value });
            }
        }
        if !(self.variance_floor.is_finite() && self.variance_floor > 0.0) {
            return Err(BocdError::VarianceFloor(self.variance_floor));
        }
        Ok(())
    }
}

/// Count, sum and sum of squares of a partition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl SufficientStats {
    pub fn from_slice(data: &[f64]) -> Self {
        data.iter().fold(Self::default(), |s, &x| s.push(x))
    }

    #[must_use]
    pub fn push(self, x: f64) -> Self {
        Self {
            count: self.count + 1,
            sum: self.sum + x,
            sum_sq: self.sum_sq + x * x,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    /// Population variance `E[x²] - E[x]²`, clamped at zero.
    pub fn variance(&self) -> Option<f64> {
        let mean = self.mean()?;
        Some((self.sum_sq / self.count as f64 - mean * mean).max(0.0))
    }
}

fn log_normal_density(x: f64, mean: f64, variance: f64) -> f64 {
    let z = x - mean;
    -0.5 * (2.0 * PI * variance).ln() - z * z / (2.0 * variance)
}

fn ln_predictive(stats: &SufficientStats, x: f64, variance_floor: f64) -> f64 {
    let mean = stats.sum / stats.count as f64;
    let variance = (stats.sum_sq / stats.count as f64 - mean * mean).max(variance_floor);
    log_normal_density(x, mean, variance)
}

/// Normal density of `x` under the partition's mean and floored variance.
pub fn predictive_likelihood(
    stats: &SufficientStats,
    x: f64,
    variance_floor: f64,
) -> Result<f64, BocdError> {
    if stats.count < 2 {
        return Err(BocdError::TooFewData(stats.count));
    }
    Ok(ln_predictive(stats, x, variance_floor).exp())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Turn log-weights into a normalised PMF. Entries at `-inf` become zero.
fn normalize_log(weights: &[f64]) -> Vec<f64> {
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Index of the largest entry; ties go to the largest index.
fn argmax_last(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v >= values[best] {
            best = i;
        }
    }
    best
}

/// PMF over run lengths plus the statistics of each candidate partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLengthPosterior {
    probabilities: Vec<f64>,
    stats: Vec<SufficientStats>,
}

impl RunLengthPosterior {
    fn initial() -> Self {
        Self {
            probabilities: vec![1.0],
            stats: vec![SufficientStats::default()],
        }
    }

    /// A bare PMF without partition statistics.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        Self {
            probabilities,
            stats: Vec::new(),
        }
    }

    /// Dense PMF; index `r` holds `P(r)`. Trailing zeros are trimmed.
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, run_length: usize) -> f64 {
        self.probabilities.get(run_length).copied().unwrap_or(0.0)
    }

    /// Statistics of the `run_length` most recent observations, when retained.
    pub fn stats(&self, run_length: usize) -> Option<&SufficientStats> {
        self.stats.get(run_length)
    }

    pub fn total_mass(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    pub fn map_run_length(&self) -> usize {
        argmax_last(&self.probabilities)
    }

    /// Fold mass above `max_run_length` into `max_run_length`, drop high-`r`
    /// tail entries below `threshold`, and renormalise.
    ///
    /// Only entries above the posterior mode are eligible for pruning, and
    /// `r = 0` and `r = 1` are always kept.
    pub fn truncate_and_prune(&mut self, max_run_length: usize, threshold: f64) {
        let p = &mut self.probabilities;
        if p.len() > max_run_length + 1 {
            let overflow: f64 = p[max_run_length + 1..].iter().sum();
            p.truncate(max_run_length + 1);
            p[max_run_length] += overflow;
        }
        if threshold > 0.0 {
            let mode = argmax_last(p).max(1);
            for v in p.iter_mut().skip(mode + 1) {
                if *v < threshold {
                    *v = 0.0;
                }
            }
        }
        while p.len() > 1 && p[p.len() - 1] == 0.0 {
            p.pop();
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        self.stats.truncate(max_run_length + 1);
    }
}

/// Posterior over (run length, changepoint count) used to learn the hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPosterior {
    time: u64,
    a_offset: u64,
    /// `columns[i][r]` is the mass at `(r, a_offset + i)`.
    columns: Vec<Vec<f64>>,
}

impl JointPosterior {
    fn initial() -> Self {
        Self {
            time: 0,
            a_offset: 0,
            columns: vec![vec![1.0]],
        }
    }

    /// Builds a joint posterior from explicit `(r, a, mass)` entries at time `t`.
    pub fn from_entries(time: u64, entries: &[(usize, u64, f64)]) -> Self {
        let a_min = entries.iter().map(|e| e.1).min().unwrap_or(0);
        let a_max = entries.iter().map(|e| e.1).max().unwrap_or(0);
        let r_max = entries.iter().map(|e| e.0).max().unwrap_or(0);
        let mut columns = vec![vec![0.0; r_max + 1]; (a_max - a_min + 1) as usize];
        for &(r, a, m) in entries {
            columns[(a - a_min) as usize][r] += m;
        }
        Self {
            time,
            a_offset: a_min,
            columns,
        }
    }

    /// Number of observations absorbed so far.
    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn mass(&self, run_length: usize, changepoints: u64) -> f64 {
        if changepoints < self.a_offset {
            return 0.0;
        }
        self.columns
            .get((changepoints - self.a_offset) as usize)
            .and_then(|c| c.get(run_length))
            .copied()
            .unwrap_or(0.0)
    }

    /// Nonzero `(r, a, mass)` entries.
    pub fn entries(&self) -> impl Iterator<Item = (usize, u64, f64)> + '_ {
        self.columns.iter().enumerate().flat_map(move |(i, col)| {
            col.iter()
                .enumerate()
                .filter(|(_, &m)| m > 0.0)
                .map(move |(r, &m)| (r, self.a_offset + i as u64, m))
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.columns.iter().flatten().sum()
    }

    /// Marginal over the changepoint count as `(a, mass)` pairs.
    pub fn changepoint_count_marginal(&self) -> Vec<(u64, f64)> {
        self.columns
            .iter()
            .enumerate()
            .map(|(i, c)| (self.a_offset + i as u64, c.iter().sum()))
            .collect()
    }

    /// Posterior mean of the next-step hazard `(a + 1) / (a + b + 2)`.
    pub fn hazard_estimate(&self) -> f64 {
        let denom = self.time as f64 + 2.0;
        self.changepoint_count_marginal()
            .into_iter()
            .map(|(a, m)| m * (a as f64 + 1.0) / denom)
            .sum()
    }

    /// One step of the joint recursion. `log_pi[k]` is the log predictive of
    /// the newest datum under its `k` most recent observations.
    fn advance(&mut self, log_pi: &[f64], config: &BocdConfig) {
        let max_r = config.max_run_length;
        let ln_gamma = config.sensitivity.ln();
        let denom = self.time as f64 + 2.0;
        let width = self.columns.len() + 1;
        let mut logw = vec![vec![f64::NEG_INFINITY; max_r + 2]; width];
        let mut reset_terms: Vec<Vec<f64>> = vec![Vec::new(); width];

        for (i, col) in self.columns.iter().enumerate() {
            let a = (self.a_offset + i as u64) as f64;
            let hazard = (a + 1.0) / denom;
            let (ln_h, ln_growth) = (hazard.ln(), (1.0 - hazard).ln() + ln_gamma);
            for (r, &p) in col.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let lp = p.ln();
                if r == 0 {
                    logw[i][1] = lp;
                    continue;
                }
                let l = lp + log_pi[(r + 1).min(max_r)];
                reset_terms[i + 1].push(l + ln_h);
                logw[i][r + 1] = l + ln_growth;
            }
        }
        for (col, terms) in logw.iter_mut().zip(&reset_terms) {
            col[0] = log_sum_exp(terms);
        }

        let flat: Vec<f64> = logw.iter().flatten().copied().collect();
        let normalized = normalize_log(&flat);
        let mut columns: Vec<Vec<f64>> = normalized
            .chunks(max_r + 2)
            .map(|c| {
                let mut c = c.to_vec();
                let overflow = c.pop().unwrap_or(0.0);
                c[max_r] += overflow;
                c
            })
            .collect();
        let mut a_offset = self.a_offset;

        let theta = config.changepoint_count_prune_threshold;
        if theta > 0.0 {
            let marginal: Vec<f64> = columns.iter().map(|c| c.iter().sum()).collect();
            let lo = marginal.iter().position(|&m| m >= theta).unwrap_or(0);
            let hi = marginal
                .iter()
                .rposition(|&m| m >= theta)
                .unwrap_or(columns.len() - 1);
            columns.truncate(hi + 1);
            columns.drain(..lo);
            a_offset += lo as u64;
        } else {
            while columns.len() > 1 && columns[0].iter().all(|&m| m == 0.0) {
                columns.remove(0);
                a_offset += 1;
            }
            while columns.len() > 1 && columns[columns.len() - 1].iter().all(|&m| m == 0.0) {
                columns.pop();
            }
        }
        let total: f64 = columns.iter().flatten().sum();
        for c in &mut columns {
            c.iter_mut().for_each(|m| *m /= total);
            while c.len() > 1 && c[c.len() - 1] == 0.0 {
                c.pop();
            }
        }

        self.columns = columns;
        self.a_offset = a_offset;
        self.time += 1;
    }
}

/// Summary returned after each observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorUpdate {
    pub map_run_length: usize,
    /// Mean of the MAP partition; `None` when `map_run_length == 0`.
    pub partition_mean: Option<f64>,
    /// Floored variance of the MAP partition; `None` below two data.
    pub partition_variance: Option<f64>,
    pub hazard_estimate: f64,
    pub changepoint_probability: f64,
}

/// Sequential changepoint detector over interval durations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detector {
    config: BocdConfig,
    posterior: RunLengthPosterior,
    joint: JointPosterior,
    /// Most recent observations, newest first, at most `L` of them.
    window: VecDeque<f64>,
    observations: u64,
}

impl Detector {
    pub fn new(config: BocdConfig) -> Result<Self, BocdError> {
        config.validate()?;
        Ok(Self {
            config,
            posterior: RunLengthPosterior::initial(),
            joint: JointPosterior::initial(),
            window: VecDeque::with_capacity(config.max_run_length),
            observations: 0,
        })
    }

    pub fn config(&self) -> &BocdConfig {
        &self.config
    }

    pub fn posterior(&self) -> &RunLengthPosterior {
        &self.posterior
    }

    pub fn joint(&self) -> &JointPosterior {
        &self.joint
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn hazard_estimate(&self) -> f64 {
        self.joint.hazard_estimate()
    }

    /// The `run_length` most recent observations, newest first.
    pub fn partition(&self, run_length: usize) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied().take(run_length)
    }

    pub fn observe(&mut self, x: f64) -> Result<DetectorUpdate, BocdError> {
        if !(x.is_finite() && x > 0.0) {
            return Err(BocdError::Observation(x));
        }
        let max_r = self.config.max_run_length;
        let hazard = self.joint.hazard_estimate();

        self.window.push_front(x);
        self.window.truncate(max_r);

        let mut stats = Vec::with_capacity(self.window.len() + 1);
        stats.push(SufficientStats::default());
        for &v in &self.window {
            let last = stats[stats.len() - 1];
            stats.push(SufficientStats::push(last, v));
        }
        // log_pi[k]: newest datum under its k most recent observations.
        // Moments are accumulated with Welford's update; raw power sums lose
        // too many digits when the spread is small next to the mean.
        let mut log_pi = vec![f64::NEG_INFINITY; max_r + 1];
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &v) in self.window.iter().enumerate() {
            let k = (i + 1) as f64;
            let delta = v - mean;
            mean += delta / k;
            m2 += delta * (v - mean);
            if i >= 1 {
                let variance = (m2 / k).max(self.config.variance_floor);
                log_pi[i + 1] = log_normal_density(x, mean, variance);
            }
        }

        let prev = &self.posterior.probabilities;
        let mut logw = vec![f64::NEG_INFINITY; prev.len() + 1];
        let mut reset_terms = Vec::with_capacity(prev.len());
        let (ln_h, ln_growth) = (
            hazard.ln(),
            (1.0 - hazard).ln() + self.config.sensitivity.ln(),
        );
        for (r, &p) in prev.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            if r == 0 {
                logw[1] = p.ln();
                continue;
            }
            let l = p.ln() + log_pi[(r + 1).min(max_r)];
            reset_terms.push(l + ln_h);
            logw[r + 1] = l + ln_growth;
        }
        logw[0] = log_sum_exp(&reset_terms);

        self.posterior.probabilities = normalize_log(&logw);
        self.posterior.stats = stats;
        self.posterior
            .truncate_and_prune(max_r, self.config.run_length_prune_threshold);

        self.joint.advance(&log_pi, &self.config);
        self.observations += 1;

        debug_assert!(
            (self.posterior.total_mass() - 1.0).abs() <= NORMALIZATION_TOLERANCE,
            "run-length posterior mass {}",
            self.posterior.total_mass()
        );
        debug_assert!(
            (self.joint.total_mass() - 1.0).abs() <= NORMALIZATION_TOLERANCE,
            "joint posterior mass {}",
            self.joint.total_mass()
        );

        Ok(self.summary())
    }

    /// Update summary for the current state.
    pub fn summary(&self) -> DetectorUpdate {
        let map = self.posterior.map_run_length();
        let stats = self.posterior.stats(map).copied().unwrap_or_default();
        let partition_variance = if stats.count >= 2 {
            stats.variance().map(|v| v.max(self.config.variance_floor))
        } else {
            None
        };
        DetectorUpdate {
            map_run_length: map,
            partition_mean: stats.mean(),
            partition_variance,
            hazard_estimate: self.joint.hazard_estimate(),
            changepoint_probability: self.posterior.probability(0),
        }
    }
}

/// CSV writer for per-observation posterior snapshots.
///
/// Columns: `index,x,map_run_length,hazard,p0..pL`; the header is written
/// on construction so an empty stream still yields a well-formed file.
pub struct PosteriorDump<W: Write> {
    writer: csv::Writer<W>,
    max_run_length: usize,
    rows: u64,
}

impl<W: Write> PosteriorDump<W> {
    pub fn new(inner: W, max_run_length: usize) -> csv::Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        let mut header = vec![
            "index".to_string(),
            "x".to_string(),
            "map_run_length".to_string(),
            "hazard".to_string(),
        ];
        header.extend((0..=max_run_length).map(|r| format!("p{r}")));
        writer.write_record(&header)?;
        Ok(Self {
            writer,
            max_run_length,
            rows: 0,
        })
    }

    pub fn record(
        &mut self,
        x: f64,
        detector: &Detector,
        update: &DetectorUpdate,
    ) -> csv::Result<()> {
        let mut row = vec![
            self.rows.to_string(),
            x.to_string(),
            update.map_run_length.to_string(),
            update.hazard_estimate.to_string(),
        ];
        let post = detector.posterior();
        row.extend((0..=self.max_run_length).map(|r| post.probability(r).to_string()));
        self.writer.write_record(&row)?;
        self.rows += 1;
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.writer.flush()?;
        self.writer
            .into_inner()
            .map_err(|e| std::io::Error::other(e.to_string()))
    }
}
