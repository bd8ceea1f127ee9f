//! Sense-and-predict engine.
//!
//! Each pulse the engine sees the busy/idle flag of every sub-band, tracks
//! how long each has been in its current state, and predicts whether the
//! sub-band will be available `Δt` pulses later. The prediction is a
//! conditional-failure probability from the sub-band's busy or idle interval
//! model, compared against a threshold.
//!
//! Three variants differ only in how models and thresholds are maintained:
//!
//! * `original`: passive for the first SEI, then at every SEI boundary the
//!   lognormal models are refit from the intervals completed during that SEI
//!   and the thresholds are re-tuned by exhaustive grid search on it.
//! * `cp_lognormal` / `cp_empirical`: every completed interval goes through a
//!   per-state changepoint detector; the MAP partition becomes the model
//!   (moment-matched lognormal or histogram). Thresholds are `1 - α`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bocd::{BocdConfig, BocdError, Detector, DetectorUpdate, SufficientStats};
use crate::interval_models::{
    busy_availability, gaussian_to_lognormal, idle_availability, EmpiricalDistribution,
    IntervalModel, LognormalParams,
};
use crate::metrics::{weighted_error, ErrorCounts};

/// Number of candidate values per threshold in the grid search.
pub const GRID_SIZE: usize = 100;
pub const GRID_MIN: f64 = 0.05;
pub const GRID_MAX: f64 = 0.95;

/// Completed intervals of each kind required before any transmission.
pub const MIN_COMPLETED_INTERVALS: u64 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("SEI must be at least one pulse")]
    Sei,
    #[error("{name} threshold must lie in [0, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("expected {expected} sub-band flags, got {got}")]
    SubBandCount { expected: usize, got: usize },
    #[error("engine needs at least one sub-band")]
    NoSubBands,
    #[error(transparent)]
    Bocd(#[from] BocdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    CpLognormal,
    CpEmpirical,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::CpLognormal => "cp_lognormal",
            Variant::CpEmpirical => "cp_empirical",
        }
    }

    pub fn uses_changepoints(&self) -> bool {
        !matches!(self, Variant::Original)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Busy,
    Idle,
}

impl IntervalKind {
    fn of(busy: bool) -> Self {
        if busy {
            IntervalKind::Busy
        } else {
            IntervalKind::Idle
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub busy: f64,
    pub idle: f64,
}

/// `θ_B = θ_I = 1 - α`.
pub fn static_thresholds(alpha: f64) -> Thresholds {
    Thresholds {
        busy: 1.0 - alpha,
        idle: 1.0 - alpha,
    }
}

/// The candidate thresholds: 100 evenly spaced values in `[0.05, 0.95]`.
pub fn threshold_grid() -> [f64; GRID_SIZE] {
    std::array::from_fn(|i| GRID_MIN + (GRID_MAX - GRID_MIN) * i as f64 / (GRID_SIZE - 1) as f64)
}

/// One pulse of a training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub probability: f64,
    pub busy_now: bool,
    pub busy_at_target: bool,
}

/// Exhaustive search over the 100×100 threshold grid for the pair with the
/// least weighted error on `trace`. Ties go to the larger `θ_B`, then the
/// larger `θ_I`. An empty trace yields `(0.5, 0.5)`.
pub fn grid_search_thresholds(trace: &[TracePoint], alpha: f64) -> Thresholds {
    if trace.is_empty() {
        return Thresholds {
            busy: 0.5,
            idle: 0.5,
        };
    }
    let grid = threshold_grid();
    // A busy-now pulse only depends on θ_B and an idle-now pulse only on
    // θ_I, so the error counts split into two independent tables.
    let counts_for = |busy_now: bool, theta: f64| {
        let mut c = ErrorCounts::default();
        for p in trace.iter().filter(|p| p.busy_now == busy_now) {
            c.record(p.probability >= theta, p.busy_at_target);
        }
        c
    };
    let busy_table: Vec<ErrorCounts> = grid.iter().map(|&t| counts_for(true, t)).collect();
    let idle_table: Vec<ErrorCounts> = grid.iter().map(|&t| counts_for(false, t)).collect();

    let mut best: Option<(f64, Thresholds)> = None;
    for bi in (0..GRID_SIZE).rev() {
        for ii in (0..GRID_SIZE).rev() {
            let c = busy_table[bi].merge(idle_table[ii]);
            let rho = weighted_error(alpha, c.collision_rate(), c.missed_rate());
            if best.is_none_or(|(b, _)| rho < b) {
                best = Some((
                    rho,
                    Thresholds {
                        busy: grid[bi],
                        idle: grid[ii],
                    },
                ));
            }
        }
    }
    best.map(|b| b.1).unwrap_or(Thresholds {
        busy: 0.5,
        idle: 0.5,
    })
}

/// Moment-matched lognormal over an interval log, or `None` below two
/// intervals. Uses the population variance.
pub fn fit_interval_log(log: &[u64]) -> Option<LognormalParams> {
    if log.len() < 2 {
        return None;
    }
    let data: Vec<f64> = log.iter().map(|&d| d as f64).collect();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    gaussian_to_lognormal(mean, var).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub variant: Variant,
    /// Action latency `Δt` in pulses.
    pub latency: u64,
    /// Collision weight `α`.
    pub alpha: f64,
    /// Spectrum evaluation interval in pulses.
    pub sei: u64,
    /// Fixed thresholds for the changepoint variants; `1 - α` when absent.
    pub thresholds: Option<Thresholds>,
    pub bocd: BocdConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CpLognormal,
            latency: 5,
            alpha: 0.5,
            sei: 5000,
            thresholds: None,
            bocd: BocdConfig::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PredictorError::Alpha(self.alpha));
        }
        if self.sei == 0 {
            return Err(PredictorError::Sei);
        }
        if let Some(t) = self.thresholds {
            for (name, value) in [("busy", t.busy), ("idle", t.idle)] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(PredictorError::Threshold { name, value });
                }
            }
        }
        if self.variant.uses_changepoints() {
            self.bocd.validate()?;
        }
        Ok(())
    }

    fn static_thresholds(&self) -> Thresholds {
        self.thresholds
            .unwrap_or_else(|| static_thresholds(self.alpha))
    }
}

/// Per sub-band prediction for one target pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub predicted_available: bool,
    pub availability_probability: f64,
    pub model_ready: bool,
    /// State at the pulse the decision was made.
    pub busy_now: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletedInterval {
    pub sub_band: usize,
    pub kind: IntervalKind,
    pub duration: u64,
    pub update: Option<DetectorUpdate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSet {
    pub decided_at: u64,
    pub target_pulse: u64,
    pub decisions: Vec<Decision>,
    pub completed: Vec<CompletedInterval>,
}

/// How long a sub-band has been in its state, in model time: the midpoint of
/// the current pulse. With integer interval lengths this conditions on
/// "length ≥ elapsed" and asks for "length ≤ elapsed + Δt - 1".
fn state_age(elapsed: u64) -> f64 {
    elapsed as f64 - 0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubBandState {
    pub index: usize,
    /// `None` until the first pulse is observed.
    pub busy: Option<bool>,
    /// Pulses spent in the current state, counting the current one.
    pub elapsed: u64,
    /// Whether the current interval started while we were watching.
    start_observed: bool,
    pub busy_detector: Option<Detector>,
    pub idle_detector: Option<Detector>,
    pub busy_model: Option<IntervalModel>,
    pub idle_model: Option<IntervalModel>,
    pub completed_busy: u64,
    pub completed_idle: u64,
    /// Intervals completed during the current SEI (original variant).
    sei_busy_log: Vec<u64>,
    sei_idle_log: Vec<u64>,
    /// `(busy, elapsed)` for every pulse of the current SEI (original variant).
    sei_trace: Vec<(bool, u64)>,
    pub thresholds: Thresholds,
}

impl SubBandState {
    pub fn new(index: usize, config: &PredictorConfig) -> Result<Self, PredictorError> {
        let (busy_detector, idle_detector) = if config.variant.uses_changepoints() {
            (
                Some(Detector::new(config.bocd)?),
                Some(Detector::new(config.bocd)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            index,
            busy: None,
            elapsed: 0,
            start_observed: false,
            busy_detector,
            idle_detector,
            busy_model: None,
            idle_model: None,
            completed_busy: 0,
            completed_idle: 0,
            sei_busy_log: Vec::new(),
            sei_idle_log: Vec::new(),
            sei_trace: Vec::new(),
            thresholds: config.static_thresholds(),
        })
    }

    pub fn model(&self, kind: IntervalKind) -> Option<&IntervalModel> {
        match kind {
            IntervalKind::Busy => self.busy_model.as_ref(),
            IntervalKind::Idle => self.idle_model.as_ref(),
        }
    }

    pub fn detector(&self, kind: IntervalKind) -> Option<&Detector> {
        match kind {
            IntervalKind::Busy => self.busy_detector.as_ref(),
            IntervalKind::Idle => self.idle_detector.as_ref(),
        }
    }

    fn has_models(&self) -> bool {
        self.busy_model.is_some() && self.idle_model.is_some()
    }

    /// Feeds a finished interval to the models.
    ///
    /// Changepoint variants push it through the matching detector and rebuild
    /// the model from the MAP partition. A MAP run length of zero keeps the
    /// previous model. The original variant only logs it for the next retrain.
    pub fn on_interval_complete(
        &mut self,
        kind: IntervalKind,
        duration: u64,
        config: &PredictorConfig,
    ) -> Option<DetectorUpdate> {
        match kind {
            IntervalKind::Busy => self.completed_busy += 1,
            IntervalKind::Idle => self.completed_idle += 1,
        }
        let (detector, model, log) = match kind {
            IntervalKind::Busy => (
                self.busy_detector.as_mut(),
                &mut self.busy_model,
                &mut self.sei_busy_log,
            ),
            IntervalKind::Idle => (
                self.idle_detector.as_mut(),
                &mut self.idle_model,
                &mut self.sei_idle_log,
            ),
        };
        let Some(detector) = detector else {
            log.push(duration);
            return None;
        };
        let update = detector
            .observe(duration as f64)
            .expect("interval durations are positive");

        let run_length = match (update.map_run_length, model.is_some()) {
            (0, true) => return Some(update),
            (0, false) => 1,
            (r, _) => r,
        };
        let data: Vec<f64> = detector.partition(run_length).collect();
        let rebuilt = match config.variant {
            Variant::CpEmpirical => {
                EmpiricalDistribution::from_samples(data.iter().map(|&x| x.round() as u64))
                    .ok()
                    .map(IntervalModel::Empirical)
            }
            _ => {
                let stats = SufficientStats::from_slice(&data);
                let variance = if stats.count >= 2 {
                    stats
                        .variance()
                        .map(|v| v.max(detector.config().variance_floor))
                } else {
                    Some(0.0)
                };
                stats
                    .mean()
                    .zip(variance)
                    .and_then(|(m, v)| gaussian_to_lognormal(m, v).ok())
                    .map(IntervalModel::Lognormal)
            }
        };
        if rebuilt.is_some() {
            *model = rebuilt;
        }
        Some(update)
    }

    /// Refits both lognormal models from the intervals logged this SEI. A log
    /// with fewer than two intervals keeps the previous model.
    pub fn legacy_retrain(&mut self) {
        if let Some(p) = fit_interval_log(&self.sei_busy_log) {
            self.busy_model = Some(IntervalModel::Lognormal(p));
        }
        if let Some(p) = fit_interval_log(&self.sei_idle_log) {
            self.idle_model = Some(IntervalModel::Lognormal(p));
        }
        self.sei_busy_log.clear();
        self.sei_idle_log.clear();
    }

    fn availability(&self, busy: bool, elapsed: u64, latency: u64) -> f64 {
        let age = state_age(elapsed);
        let latency = latency as f64;
        match (busy, self.model(IntervalKind::of(busy))) {
            (true, Some(m)) => busy_availability(m, age, latency),
            (false, Some(m)) => idle_availability(m, age, latency),
            (_, None) => 0.0,
        }
    }

    /// Training trace of the SEI just finished, scored with the current models.
    fn sei_training_trace(&self, latency: u64) -> Vec<TracePoint> {
        let lag = latency as usize;
        if self.sei_trace.len() <= lag {
            return Vec::new();
        }
        self.sei_trace
            .iter()
            .zip(self.sei_trace.iter().skip(lag))
            .map(|(&(busy, elapsed), &(busy_at_target, _))| TracePoint {
                probability: self.availability(busy, elapsed, latency),
                busy_now: busy,
                busy_at_target,
            })
            .collect()
    }

    fn end_sei(&mut self, config: &PredictorConfig) {
        self.legacy_retrain();
        let trace = self.sei_training_trace(config.latency);
        self.thresholds = grid_search_thresholds(&trace, config.alpha);
        self.sei_trace.clear();
    }

    /// Whether this sub-band may transmit at `pulse`.
    fn model_ready(&self, config: &PredictorConfig, pulse: u64) -> bool {
        match config.variant {
            Variant::Original => pulse >= config.sei && self.has_models(),
            _ => {
                self.completed_busy >= MIN_COMPLETED_INTERVALS
                    && self.completed_idle >= MIN_COMPLETED_INTERVALS
                    && self.has_models()
            }
        }
    }

    fn observe(
        &mut self,
        busy: bool,
        config: &PredictorConfig,
        completed: &mut Vec<CompletedInterval>,
    ) {
        match self.busy {
            Some(prev) if prev == busy => self.elapsed += 1,
            Some(prev) => {
                if self.start_observed {
                    let kind = IntervalKind::of(prev);
                    let update = self.on_interval_complete(kind, self.elapsed, config);
                    completed.push(CompletedInterval {
                        sub_band: self.index,
                        kind,
                        duration: self.elapsed,
                        update,
                    });
                }
                self.busy = Some(busy);
                self.elapsed = 1;
                self.start_observed = true;
            }
            None => {
                self.busy = Some(busy);
                self.elapsed = 1;
            }
        }
        if config.variant == Variant::Original {
            self.sei_trace.push((busy, self.elapsed));
        }
    }

    fn decide(&self, config: &PredictorConfig, pulse: u64) -> Decision {
        let busy = self.busy.unwrap_or(true);
        let probability = self.availability(busy, self.elapsed, config.latency);
        let model_ready = self.model_ready(config, pulse);
        let threshold = if busy {
            self.thresholds.busy
        } else {
            self.thresholds.idle
        };
        Decision {
            predicted_available: model_ready && probability >= threshold,
            availability_probability: probability,
            model_ready,
            busy_now: busy,
        }
    }
}

/// Multi-sub-band predictor driven one pulse at a time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictor {
    config: PredictorConfig,
    bands: Vec<SubBandState>,
    pulse: u64,
}

impl Predictor {
    pub fn new(config: PredictorConfig, sub_bands: usize) -> Result<Self, PredictorError> {
        config.validate()?;
        if sub_bands == 0 {
            return Err(PredictorError::NoSubBands);
        }
        let bands = (0..sub_bands)
            .map(|i| SubBandState::new(i, &config))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config,
            bands,
            pulse: 0,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    /// Index of the next pulse `step` expects.
    pub fn pulse(&self) -> u64 {
        self.pulse
    }

    pub fn bands(&self) -> &[SubBandState] {
        &self.bands
    }

    pub fn detector(&self, sub_band: usize, kind: IntervalKind) -> Option<&Detector> {
        self.bands.get(sub_band).and_then(|b| b.detector(kind))
    }

    /// Consumes the busy flags for the current pulse `t` and returns the
    /// availability decisions for pulse `t + Δt`.
    pub fn step(&mut self, observed: &[bool]) -> Result<DecisionSet, PredictorError> {
        if observed.len() != self.bands.len() {
            return Err(PredictorError::SubBandCount {
                expected: self.bands.len(),
                got: observed.len(),
            });
        }
        let config = self.config;
        let pulse = self.pulse;
        if config.variant == Variant::Original && pulse > 0 && pulse.is_multiple_of(config.sei) {
            self.bands.iter_mut().for_each(|b| b.end_sei(&config));
        }
        let mut completed = Vec::new();
        for (band, &busy) in self.bands.iter_mut().zip(observed) {
            band.observe(busy, &config, &mut completed);
        }
        let decisions = self
            .bands
            .iter()
            .map(|b| b.decide(&config, pulse))
            .collect();
        self.pulse += 1;
        Ok(DecisionSet {
            decided_at: pulse,
            target_pulse: pulse + config.latency,
            decisions,
            completed,
        })
    }
}
