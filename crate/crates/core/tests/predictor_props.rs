use cpsense::bocd::BocdConfig;
use cpsense::interval_models::IntervalModel;
use cpsense::metrics::{weighted_error, ErrorCounts};
use cpsense::predictor::{
    fit_interval_log, grid_search_thresholds, threshold_grid, IntervalKind, Predictor,
    PredictorConfig, Thresholds, TracePoint, Variant,
};
use cpsense::simulator::{Environment, EnvironmentSpec, NormalSpec, SubBandSpec};
use proptest::prelude::*;

fn environment(h: f64, pulses: u64, seed: u64) -> Environment {
    let dist = NormalSpec::new(60.0, 4.0);
    Environment::new(EnvironmentSpec {
        sub_bands: vec![
            SubBandSpec {
                busy: dist,
                idle: NormalSpec::new(40.0, 6.0)
            };
            2
        ],
        changepoint_probability: h,
        magnitude: NormalSpec::new(20.0, 5.0),
        pulses,
        seed,
    })
    .unwrap()
}

/// Replays `env` through a fresh predictor; returns it with every decision set.
fn replay(
    config: PredictorConfig,
    mut env: Environment,
) -> (Predictor, Vec<cpsense::predictor::DecisionSet>) {
    let mut p = Predictor::new(config, env.spec().sub_bands.len()).unwrap();
    let mut out = Vec::new();
    while let Some(flags) = env.advance() {
        out.push(p.step(&flags).unwrap());
    }
    (p, out)
}

fn available_count(sets: &[cpsense::predictor::DecisionSet]) -> usize {
    sets.iter()
        .flat_map(|s| &s.decisions)
        .filter(|d| d.predicted_available)
        .count()
}

#[test]
fn higher_thresholds_never_add_transmissions() {
    for variant in [Variant::CpLognormal, Variant::CpEmpirical] {
        let mut last = usize::MAX;
        for theta in [0.0, 0.2, 0.5, 0.8, 1.0] {
            let config = PredictorConfig {
                variant,
                thresholds: Some(Thresholds {
                    busy: theta,
                    idle: theta,
                }),
                ..PredictorConfig::default()
            };
            let (_, sets) = replay(config, environment(0.002, 20_000, 4));
            let n = available_count(&sets);
            assert!(n <= last, "{variant:?} θ={theta}: {n} > {last}");
            last = n;
        }
    }
}

#[test]
fn thresholds_follow_the_current_state() {
    let t = Thresholds {
        busy: 0.3,
        idle: 0.8,
    };
    let config = PredictorConfig {
        thresholds: Some(t),
        ..PredictorConfig::default()
    };
    let (_, sets) = replay(config, environment(0.002, 10_000, 6));
    let mut seen = [false; 2];
    for d in sets.iter().flat_map(|s| &s.decisions) {
        let theta = if d.busy_now { t.busy } else { t.idle };
        assert_eq!(
            d.predicted_available,
            d.model_ready && d.availability_probability >= theta
        );
        if d.model_ready {
            seen[usize::from(d.busy_now)] = true;
        }
        assert!(!d.predicted_available || d.model_ready);
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn boundary_probability_counts_as_available() {
    // Zero latency makes the idle probability exactly 1.
    let config = PredictorConfig {
        latency: 0,
        thresholds: Some(Thresholds {
            busy: 1.0,
            idle: 1.0,
        }),
        ..PredictorConfig::default()
    };
    let (_, sets) = replay(config, environment(0.0, 5_000, 2));
    let idle_ready: Vec<_> = sets
        .iter()
        .flat_map(|s| &s.decisions)
        .filter(|d| d.model_ready && !d.busy_now)
        .collect();
    assert!(!idle_ready.is_empty());
    assert!(idle_ready
        .iter()
        .all(|d| d.availability_probability == 1.0 && d.predicted_available));
}

#[test]
fn replays_are_deterministic() {
    for variant in [
        Variant::Original,
        Variant::CpLognormal,
        Variant::CpEmpirical,
    ] {
        let config = PredictorConfig {
            variant,
            sei: 2000,
            ..PredictorConfig::default()
        };
        let (_, a) = replay(config, environment(0.003, 15_000, 12));
        let (_, b) = replay(config, environment(0.003, 15_000, 12));
        assert_eq!(a, b);
    }
}

#[test]
fn saturated_detector_agrees_with_batch_fit() {
    let l = 30;
    let config = PredictorConfig {
        bocd: BocdConfig {
            max_run_length: l,
            ..BocdConfig::default()
        },
        ..PredictorConfig::default()
    };
    let (p, sets) = replay(config, environment(0.0, 12_000, 31));
    for kind in [IntervalKind::Busy, IntervalKind::Idle] {
        let durations: Vec<u64> = sets
            .iter()
            .flat_map(|s| &s.completed)
            .filter(|c| c.sub_band == 0 && c.kind == kind)
            .map(|c| c.duration)
            .collect();
        assert!(durations.len() > 2 * l);
        assert_eq!(p.detector(0, kind).unwrap().summary().map_run_length, l);

        let batch = fit_interval_log(&durations[durations.len() - l..]).unwrap();
        let Some(IntervalModel::Lognormal(online)) = p.bands()[0].model(kind).cloned() else {
            panic!("lognormal model expected");
        };
        for (x, y) in [
            (online.mu_hat, batch.mu_hat),
            (online.sigma_hat, batch.sigma_hat),
        ] {
            assert!((x - y).abs() <= 0.1 * y.abs(), "{kind:?}: {x} vs {y}");
        }
    }
}

/// Direct 100×100 evaluation of the weighted error with no table reuse.
fn exhaustive_thresholds(trace: &[TracePoint], alpha: f64) -> Thresholds {
    let grid = threshold_grid();
    let mut best = (
        f64::INFINITY,
        Thresholds {
            busy: 0.5,
            idle: 0.5,
        },
    );
    for &busy in &grid {
        for &idle in &grid {
            let mut counts = ErrorCounts::default();
            for p in trace {
                let theta = if p.busy_now { busy } else { idle };
                counts.record(p.probability >= theta, p.busy_at_target);
            }
            let rho = weighted_error(alpha, counts.collision_rate(), counts.missed_rate());
            let better = rho < best.0
                || (rho == best.0
                    && (busy > best.1.busy || (busy == best.1.busy && idle > best.1.idle)));
            if better {
                best = (rho, Thresholds { busy, idle });
            }
        }
    }
    best.1
}

fn trace_strategy() -> impl Strategy<Value = Vec<TracePoint>> {
    prop::collection::vec(
        (0.0f64..=1.0, any::<bool>(), any::<bool>()).prop_map(
            |(probability, busy_now, busy_at_target)| TracePoint {
                probability,
                busy_now,
                busy_at_target,
            },
        ),
        1..60,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn grid_search_matches_exhaustive_scan(trace in trace_strategy(), alpha in 0.0f64..=1.0) {
        prop_assert_eq!(grid_search_thresholds(&trace, alpha), exhaustive_thresholds(&trace, alpha));
    }
}

#[test]
fn collision_only_weight_picks_top_thresholds() {
    let trace: Vec<TracePoint> = (0..100)
        .map(|i| TracePoint {
            probability: (i as f64 * 0.37).fract(),
            busy_now: i % 3 == 0,
            busy_at_target: i % 2 == 0,
        })
        .chain(std::iter::once(TracePoint {
            probability: 0.99,
            busy_now: true,
            busy_at_target: true,
        }))
        .collect();
    let t = grid_search_thresholds(&trace, 1.0);
    assert_eq!(
        t,
        Thresholds {
            busy: 0.95,
            idle: 0.95
        }
    );
    assert_eq!(t, exhaustive_thresholds(&trace, 1.0));
}
