//! Pulse-indexed spectral environment.
//!
//! Every sub-band is an alternating renewal process: it holds a busy or idle
//! interval whose length is a rounded Normal draw, then flips. On any pulse a
//! sub-band may suffer a changepoint that shifts both its busy and idle means
//! by an independently signed random magnitude. A shift only affects
//! intervals drawn after it; the interval in progress runs to completion.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest mean a changepoint can push a distribution to, in pulses.
pub const MIN_MEAN: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimulatorError {
    #[error("environment needs at least one sub-band")]
    NoSubBands,
    #[error("{what} mean must be finite and positive, got {value}")]
    Mean { what: String, value: f64 },
    #[error("{what} standard deviation must be finite and non-negative, got {value}")]
    Std { what: String, value: f64 },
    #[error("changepoint probability must lie in [0, 1), got {0}")]
    ChangepointProbability(f64),
    #[error("simulation needs at least one pulse")]
    NoPulses,
}

/// Normal distribution in pulses; `std` is a standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalSpec {
    pub mean: f64,
    pub std: f64,
}

impl NormalSpec {
    pub const fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.std * z
    }

    fn validate(&self, what: &str, positive_mean: bool) -> Result<(), SimulatorError> {
        if !self.mean.is_finite() || (positive_mean && self.mean <= 0.0) {
            return Err(SimulatorError::Mean {
                what: what.to_string(),
                value: self.mean,
            });
        }
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(SimulatorError::Std {
                what: what.to_string(),
                value: self.std,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubBandSpec {
    pub busy: NormalSpec,
    pub idle: NormalSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub sub_bands: Vec<SubBandSpec>,
    /// Per-pulse, per-sub-band changepoint probability `h`.
    pub changepoint_probability: f64,
    /// Distribution of the shift magnitude `|Δ|`.
    pub magnitude: NormalSpec,
    /// Total number of pulses `T`.
    pub pulses: u64,
    #[serde(default)]
    pub seed: u64,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.sub_bands.is_empty() {
            return Err(SimulatorError::NoSubBands);
        }
        for (i, band) in self.sub_bands.iter().enumerate() {
            band.busy.validate(&format!("sub_bands[{i}].busy"), true)?;
            band.idle.validate(&format!("sub_bands[{i}].idle"), true)?;
        }
        if !(0.0..1.0).contains(&self.changepoint_probability) {
            return Err(SimulatorError::ChangepointProbability(
                self.changepoint_probability,
            ));
        }
        self.magnitude.validate("magnitude", false)?;
        if self.pulses == 0 {
            return Err(SimulatorError::NoPulses);
        }
        Ok(())
    }
}

/// Draws a duration: rounded Normal sample, at least one pulse.
pub fn draw_interval<R: Rng + ?Sized>(dist: &NormalSpec, rng: &mut R) -> u64 {
    dist.sample(rng).round().max(1.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangepointEvent {
    pub pulse: u64,
    pub sub_band: usize,
    pub busy_mean: f64,
    pub idle_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandState {
    pub busy: bool,
    /// Pulses left in the current interval, counting the current pulse.
    pub remaining: u64,
    pub busy_mean: f64,
    pub idle_mean: f64,
    busy_std: f64,
    idle_std: f64,
}

impl BandState {
    fn distribution(&self, busy: bool) -> NormalSpec {
        if busy {
            NormalSpec::new(self.busy_mean, self.busy_std)
        } else {
            NormalSpec::new(self.idle_mean, self.idle_std)
        }
    }
}

/// Shifts both means of a sub-band by independently signed draws of `|Δ|`.
pub fn apply_changepoint<R: Rng + ?Sized>(
    band: &mut BandState,
    magnitude: &NormalSpec,
    rng: &mut R,
) {
    let shift = magnitude.sample(rng).abs();
    let busy_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let idle_sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    band.busy_mean = (band.busy_mean + busy_sign * shift).max(MIN_MEAN);
    band.idle_mean = (band.idle_mean + idle_sign * shift).max(MIN_MEAN);
}

/// Seeded, reproducible environment.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvironmentSpec,
    rng: ChaCha8Rng,
    bands: Vec<BandState>,
    pulse: u64,
    changepoints: Vec<ChangepointEvent>,
}

impl Environment {
    pub fn new(spec: EnvironmentSpec) -> Result<Self, SimulatorError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let bands = spec
            .sub_bands
            .iter()
            .map(|b| {
                let busy = rng.random::<bool>();
                let mut state = BandState {
                    busy,
                    remaining: 0,
                    busy_mean: b.busy.mean,
                    idle_mean: b.idle.mean,
                    busy_std: b.busy.std,
                    idle_std: b.idle.std,
                };
                state.remaining = draw_interval(&state.distribution(busy), &mut rng);
                state
            })
            .collect();
        Ok(Self {
            spec,
            rng,
            bands,
            pulse: 0,
            changepoints: Vec::new(),
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    /// Index of the next pulse to be produced.
    pub fn pulse(&self) -> u64 {
        self.pulse
    }

    pub fn bands(&self) -> &[BandState] {
        &self.bands
    }

    pub fn changepoints(&self) -> &[ChangepointEvent] {
        &self.changepoints
    }

    pub fn is_finished(&self) -> bool {
        self.pulse >= self.spec.pulses
    }

    /// Busy flags for the current pulse, then moves the clock forward.
    /// Returns `None` once `T` pulses have been produced.
    pub fn advance(&mut self) -> Option<Vec<bool>> {
        if self.is_finished() {
            return None;
        }
        let h = self.spec.changepoint_probability;
        let flags = self.bands.iter().map(|b| b.busy).collect();
        for (i, band) in self.bands.iter_mut().enumerate() {
            if h > 0.0 && self.rng.random::<f64>() < h {
                apply_changepoint(band, &self.spec.magnitude, &mut self.rng);
                self.changepoints.push(ChangepointEvent {
                    pulse: self.pulse,
                    sub_band: i,
                    busy_mean: band.busy_mean,
                    idle_mean: band.idle_mean,
                });
            }
            band.remaining -= 1;
            if band.remaining == 0 {
                band.busy = !band.busy;
                band.remaining = draw_interval(&band.distribution(band.busy), &mut self.rng);
            }
        }
        self.pulse += 1;
        Some(flags)
    }
}

/// `pulse,sub_band,state` rows, one per sub-band per pulse.
pub struct TruthWriter<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TruthWriter<W> {
    pub fn new(inner: W) -> csv::Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(["pulse", "sub_band", "state"])?;
        Ok(Self { writer })
    }

    pub fn record(&mut self, pulse: u64, flags: &[bool]) -> csv::Result<()> {
        for (i, &busy) in flags.iter().enumerate() {
            self.writer.write_record(&[
                pulse.to_string(),
                i.to_string(),
                u8::from(busy).to_string(),
            ])?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}

pub fn write_changepoint_log<W: Write>(events: &[ChangepointEvent], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pulse", "sub_band", "busy_mean", "idle_mean"])?;
    for e in events {
        w.write_record(&[
            e.pulse.to_string(),
            e.sub_band.to_string(),
            e.busy_mean.to_string(),
            e.idle_mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_band(
        busy: NormalSpec,
        idle: NormalSpec,
        h: f64,
        pulses: u64,
        seed: u64,
    ) -> EnvironmentSpec {
        EnvironmentSpec {
            sub_bands: vec![SubBandSpec { busy, idle }],
            changepoint_probability: h,
            magnitude: NormalSpec::new(40.0, 10.0),
            pulses,
            seed,
        }
    }

    #[test]
    fn deterministic_square_wave() {
        let d = NormalSpec::new(3.0, 0.0);
        let mut env = Environment::new(single_band(d, d, 0.0, 60, 1)).unwrap();
        let states: Vec<bool> = std::iter::from_fn(|| env.advance()).map(|f| f[0]).collect();
        assert_eq!(states.len(), 60);
        for (t, s) in states.iter().enumerate() {
            assert_eq!(*s, states[0] ^ ((t / 3) % 2 == 1), "pulse {t}");
        }
        assert!(env.advance().is_none());
    }

    #[test]
    fn draw_interval_clamps_and_rounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw_interval(&NormalSpec::new(150.0, 0.0), &mut rng), 150);
        assert_eq!(draw_interval(&NormalSpec::new(0.2, 0.0), &mut rng), 1);
        assert_eq!(draw_interval(&NormalSpec::new(-40.0, 0.0), &mut rng), 1);
        assert_eq!(draw_interval(&NormalSpec::new(2.6, 0.0), &mut rng), 3);
    }

    #[test]
    fn changepoint_shift_and_clamp() {
        let mut band = BandState {
            busy: true,
            remaining: 5,
            busy_mean: 150.0,
            idle_mean: 10.0,
            busy_std: 4.0,
            idle_std: 4.0,
        };
        let fixed = NormalSpec::new(40.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let before = band.clone();
            apply_changepoint(&mut band, &fixed, &mut rng);
            for (old, new) in [
                (before.busy_mean, band.busy_mean),
                (before.idle_mean, band.idle_mean),
            ] {
                assert!(
                    new == old + 40.0 || new == (old - 40.0).max(MIN_MEAN),
                    "{old} -> {new}"
                );
            }
            assert_eq!(band.remaining, 5);
        }
    }

    #[test]
    fn validation_errors() {
        let d = NormalSpec::new(3.0, 0.0);
        let mut spec = single_band(d, d, 1.0, 10, 0);
        assert_eq!(
            Environment::new(spec.clone()).unwrap_err(),
            SimulatorError::ChangepointProbability(1.0)
        );
        spec.changepoint_probability = 0.0;
        spec.pulses = 0;
        assert_eq!(
            Environment::new(spec.clone()).unwrap_err(),
            SimulatorError::NoPulses
        );
        spec.pulses = 5;
        spec.sub_bands[0].busy.mean = 0.0;
        assert!(matches!(
            Environment::new(spec).unwrap_err(),
            SimulatorError::Mean { .. }
        ));
    }

    #[test]
    fn changepoint_log_csv() {
        let events = [ChangepointEvent {
            pulse: 4,
            sub_band: 0,
            busy_mean: 190.0,
            idle_mean: 110.0,
        }];
        let mut buf = Vec::new();
        write_changepoint_log(&events, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "pulse,sub_band,busy_mean,idle_mean\n4,0,190,110\n"
        );
    }
}
