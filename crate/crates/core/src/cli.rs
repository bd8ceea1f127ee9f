//! Config-driven experiment runner.
//!
//! An experiment is one environment description, a list of predictor
//! variants and a replication count. Every `(variant, seed)` pair replays the
//! same seeded environment through one predictor and is scored on its own,
//! so jobs run in parallel and their results are collected in a fixed order.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bocd::PosteriorDump;
use crate::metrics::{write_report_csv, ErrorCounts, MetricsReport, ScoringWindow};
use crate::predictor::{IntervalKind, Predictor, PredictorConfig, PredictorError, Variant};
use crate::simulator::{
    write_changepoint_log, Environment, EnvironmentSpec, SimulatorError, TruthWriter,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot read config {path}: {source}")]
    ReadConfig {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        RunError::Invalid {
            field: field.into(),
            message: message.to_string(),
        }
    }

    fn output(path: &Path, source: std::io::Error) -> Self {
        RunError::Output {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Score `[0, T)`.
    Full,
    /// Score `[SEI, T)`, skipping the original variant's passive start.
    #[default]
    PostSei,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Write `truth.csv` and `changepoints.csv` for the first replication.
    pub truth_trace: bool,
    /// Write `decisions_<variant>.csv` for the first replication.
    pub decision_traces: bool,
    /// Dump the posterior of one detector for the first replication.
    pub posterior: Option<PosteriorTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTarget {
    pub sub_band: usize,
    pub kind: IntervalKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub environment: EnvironmentSpec,
    pub predictors: Vec<PredictorConfig>,
    #[serde(default = "default_replications")]
    pub replications: u64,
    #[serde(default)]
    pub scoring_window: ScoringMode,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn default_replications() -> u64 {
    10
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|source| RunError::ReadConfig {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.environment.validate().map_err(|e| {
            let field = match &e {
                SimulatorError::Mean { what, .. } | SimulatorError::Std { what, .. } => {
                    format!("environment.{what}")
                }
                SimulatorError::ChangepointProbability(_) => {
                    "environment.changepoint_probability".into()
                }
                SimulatorError::NoPulses => "environment.pulses".into(),
                SimulatorError::NoSubBands => "environment.sub_bands".into(),
            };
            RunError::invalid(field, e)
        })?;
        if self.predictors.is_empty() {
            return Err(RunError::invalid(
                "predictors",
                "at least one variant is required",
            ));
        }
        for (i, p) in self.predictors.iter().enumerate() {
            p.validate().map_err(|e| {
                let field = match &e {
                    PredictorError::Alpha(_) => "alpha",
                    PredictorError::Sei => "sei",
                    PredictorError::Threshold { .. } => "thresholds",
                    PredictorError::Bocd(_) => "bocd",
                    _ => "",
                };
                RunError::invalid(format!("predictors[{i}].{field}"), e)
            })?;
        }
        if self.replications == 0 {
            return Err(RunError::invalid("replications", "must be at least 1"));
        }
        if let Some(t) = self.outputs.posterior {
            if t.sub_band >= self.environment.sub_bands.len() {
                return Err(RunError::invalid(
                    "outputs.posterior.sub_band",
                    format!("no sub-band {}", t.sub_band),
                ));
            }
        }
        Ok(())
    }

    pub fn scoring_window(&self) -> ScoringWindow {
        let start = match self.scoring_window {
            ScoringMode::Full => 0,
            ScoringMode::PostSei => self.predictors.iter().map(|p| p.sei).max().unwrap_or(0),
        };
        ScoringWindow {
            start: start.min(self.environment.pulses),
            end: self.environment.pulses,
        }
    }

    /// Environment seed for replication `rep`.
    pub fn seed(&self, rep: u64) -> u64 {
        self.environment.seed.wrapping_add(rep)
    }
}

/// Optional per-run diagnostic sinks.
#[derive(Default)]
pub struct RunSinks {
    pub truth: Option<TruthWriter<Box<dyn Write + Send>>>,
    pub decisions: Option<csv::Writer<Box<dyn Write + Send>>>,
    pub posterior: Option<(PosteriorTarget, PosteriorDump<Box<dyn Write + Send>>)>,
}

struct Pending {
    decided_at: u64,
    target: u64,
    decisions: Vec<crate::predictor::Decision>,
}

/// Result of replaying one environment through one predictor.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub changepoints: Vec<crate::simulator::ChangepointEvent>,
}

/// Simulates `spec` and scores `predictor` on it.
pub fn run_single(
    spec: &EnvironmentSpec,
    predictor: &PredictorConfig,
    window: ScoringWindow,
    sinks: &mut RunSinks,
) -> Result<RunOutcome, RunError> {
    let mut env =
        Environment::new(spec.clone()).map_err(|e| RunError::invalid("environment", e))?;
    let mut engine = Predictor::new(*predictor, spec.sub_bands.len())
        .map_err(|e| RunError::invalid("predictors", e))?;
    let mut counts = ErrorCounts::default();
    let mut pending: VecDeque<Pending> = VecDeque::new();

    if let Some(w) = sinks.decisions.as_mut() {
        w.write_record([
            "pulse",
            "sub_band",
            "state",
            "probability",
            "available",
            "truth",
        ])?;
    }

    while let Some(flags) = env.advance() {
        let now = env.pulse() - 1;
        if let Some(t) = sinks.truth.as_mut() {
            t.record(now, &flags)?;
        }
        let set = engine
            .step(&flags)
            .map_err(|e| RunError::invalid("predictors", e))?;
        if let Some((target, dump)) = sinks.posterior.as_mut() {
            for c in set
                .completed
                .iter()
                .filter(|c| c.sub_band == target.sub_band && c.kind == target.kind)
            {
                if let (Some(u), Some(det)) = (c.update, engine.detector(c.sub_band, c.kind)) {
                    dump.record(c.duration as f64, det, &u)?;
                }
            }
        }
        pending.push_back(Pending {
            decided_at: set.decided_at,
            target: set.target_pulse,
            decisions: set.decisions,
        });
        while pending.front().is_some_and(|p| p.target == now) {
            let p = pending.pop_front().expect("front exists");
            for (i, (d, &truth)) in p.decisions.iter().zip(&flags).enumerate() {
                if window.contains(p.target) {
                    counts.record(d.predicted_available, truth);
                }
                if let Some(w) = sinks.decisions.as_mut() {
                    w.write_record(&[
                        p.decided_at.to_string(),
                        i.to_string(),
                        u8::from(d.busy_now).to_string(),
                        d.availability_probability.to_string(),
                        u8::from(d.predicted_available).to_string(),
                        u8::from(truth).to_string(),
                    ])?;
                }
            }
        }
    }
    if let Some(t) = sinks.truth.as_mut() {
        t.flush()
            .map_err(|e| RunError::output(Path::new("truth.csv"), e))?;
    }
    if let Some(w) = sinks.decisions.as_mut() {
        w.flush()
            .map_err(|e| RunError::output(Path::new("decisions.csv"), e))?;
    }
    Ok(RunOutcome {
        report: counts.finalize(predictor.alpha, window),
        changepoints: env.changepoints().to_vec(),
    })
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seeds: Option<u64>,
    pub score_window: Option<ScoringMode>,
    pub dump_posterior: Option<PosteriorTarget>,
    pub quiet: bool,
}

/// Per-variant summary returned by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<(String, u64, MetricsReport)>,
}

impl ExperimentResult {
    /// Mean weighted error of `variant` across seeds.
    pub fn mean_rho(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.0 == variant)
            .map(|r| r.2.weighted_error)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn create(path: &Path) -> Result<Box<dyn Write + Send>, RunError> {
    let file = File::create(path).map_err(|e| RunError::output(path, e))?;
    Ok(Box::new(BufWriter::new(file)))
}

/// Runs every `(variant, seed)` job, writes `metrics.csv` and any enabled
/// diagnostic files into `options.out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentResult, RunError> {
    let mut config = config.clone();
    if let Some(n) = options.seeds {
        config.replications = n;
    }
    if let Some(mode) = options.score_window {
        config.scoring_window = mode;
    }
    if options.dump_posterior.is_some() {
        config.outputs.posterior = options.dump_posterior;
    }
    config.validate()?;
    std::fs::create_dir_all(&options.out_dir).map_err(|e| RunError::output(&options.out_dir, e))?;

    let window = config.scoring_window();
    let jobs: Vec<(usize, u64)> = (0..config.predictors.len())
        .flat_map(|v| (0..config.replications).map(move |r| (v, r)))
        .collect();

    // The posterior is dumped from the first changepoint variant; both
    // changepoint variants feed identical detectors.
    let dump_variant = config
        .predictors
        .iter()
        .position(|p| p.variant.uses_changepoints());

    let results: Vec<Result<(usize, u64, RunOutcome), RunError>> = jobs
        .par_iter()
        .map(|&(v, rep)| {
            let predictor = &config.predictors[v];
            let mut spec = config.environment.clone();
            spec.seed = config.seed(rep);
            let mut sinks = RunSinks::default();
            if rep == 0 {
                if config.outputs.truth_trace && v == 0 {
                    sinks.truth = Some(TruthWriter::new(create(
                        &options.out_dir.join("truth.csv"),
                    )?)?);
                }
                if config.outputs.decision_traces {
                    let name = format!("decisions_{}.csv", variant_label(&config.predictors, v));
                    sinks.decisions = Some(csv::Writer::from_writer(create(
                        &options.out_dir.join(name),
                    )?));
                }
                if let (Some(target), Some(dv)) = (config.outputs.posterior, dump_variant) {
                    if dv == v {
                        let out = create(&options.out_dir.join("posterior.csv"))?;
                        let dump = PosteriorDump::new(out, predictor.bocd.max_run_length)?;
                        sinks.posterior = Some((target, dump));
                    }
                }
            }
            let outcome = run_single(&spec, predictor, window, &mut sinks)?;
            if let Some((_, dump)) = sinks.posterior.take() {
                dump.finish()
                    .map_err(|e| RunError::output(&options.out_dir.join("posterior.csv"), e))?;
            }
            if rep == 0 && v == 0 && config.outputs.truth_trace {
                let path = options.out_dir.join("changepoints.csv");
                write_changepoint_log(&outcome.changepoints, create(&path)?)?;
            }
            Ok((v, rep, outcome))
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let (v, rep, outcome) = r?;
        rows.push((
            variant_label(&config.predictors, v),
            config.seed(rep),
            outcome.report,
        ));
    }
    let metrics_path = options.out_dir.join("metrics.csv");
    write_report_csv(&rows, create(&metrics_path)?)?;

    if !options.quiet {
        let result = ExperimentResult { rows: rows.clone() };
        let mut seen = Vec::new();
        for (label, _, _) in &rows {
            if seen.contains(label) {
                continue;
            }
            seen.push(label.clone());
            let reports: Vec<&MetricsReport> = rows
                .iter()
                .filter(|r| &r.0 == label)
                .map(|r| &r.2)
                .collect();
            let s = crate::metrics::Summary::of(&reports);
            println!(
                "{label:<14} C={:.4} D={:.4} rho={:.4} (±{:.4}, {} seeds)",
                s.mean[0],
                s.mean[1],
                result.mean_rho(label).unwrap_or(f64::NAN),
                s.std[2],
                reports.len()
            );
        }
    }
    Ok(ExperimentResult { rows })
}

/// Variant name, suffixed with its position when a name repeats.
fn variant_label(predictors: &[PredictorConfig], index: usize) -> String {
    let name = predictors[index].variant.name();
    let repeats = predictors
        .iter()
        .filter(|p| p.variant.name() == name)
        .count();
    if repeats > 1 {
        format!("{name}_{index}")
    } else {
        name.to_string()
    }
}

/// The three variants with shared settings.
pub fn standard_variants(base: PredictorConfig) -> Vec<PredictorConfig> {
    [
        Variant::Original,
        Variant::CpLognormal,
        Variant::CpEmpirical,
    ]
    .into_iter()
    .map(|variant| PredictorConfig { variant, ..base })
    .collect()
}
