//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Untruncated, unpruned run-length and joint recursion over the raw data.
///
/// Partition moments are recomputed from the stored observations with a
/// two-pass mean/variance, and the joint posterior lives in a sparse map.
pub struct ReferenceBocd {
    sensitivity: f64,
    variance_floor: f64,
    data: Vec<f64>,
    run_length: Vec<f64>,
    joint: BTreeMap<(usize, u64), f64>,
}

impl ReferenceBocd {
    pub fn new(sensitivity: f64, variance_floor: f64) -> Self {
        Self {
            sensitivity,
            variance_floor,
            data: Vec::new(),
            run_length: vec![1.0],
            joint: BTreeMap::from([((0, 0), 1.0)]),
        }
    }

    pub fn run_length(&self) -> &[f64] {
        &self.run_length
    }

    pub fn joint(&self) -> &BTreeMap<(usize, u64), f64> {
        &self.joint
    }

    pub fn hazard(&self) -> f64 {
        let t = self.data.len() as f64;
        self.joint
            .iter()
            .map(|(&(_, a), &m)| m * (a as f64 + 1.0) / (t + 2.0))
            .sum()
    }

    /// Log density of the newest datum under its `k` most recent observations.
    fn ln_pi(&self, k: usize) -> f64 {
        let window = &self.data[self.data.len() - k..];
        let x = window[k - 1];
        let n = k as f64;
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let var = var.max(self.variance_floor);
        -0.5 * (2.0 * PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
    }

    pub fn observe(&mut self, x: f64) {
        let hazard = self.hazard();
        let t = self.data.len() as f64;
        self.data.push(x);
        let ln_gamma = self.sensitivity.ln();

        let mut next = vec![f64::NEG_INFINITY; self.run_length.len() + 1];
        let mut resets = Vec::new();
        for (r, &p) in self.run_length.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if r == 0 {
                next[1] = p.ln();
            } else {
                let l = p.ln() + self.ln_pi(r + 1);
                resets.push(l + hazard.ln());
                next[r + 1] = l + (1.0 - hazard).ln() + ln_gamma;
            }
        }
        next[0] = log_sum_exp(resets);
        let norm = log_sum_exp(next.iter().copied());
        self.run_length = next.iter().map(|w| (w - norm).exp()).collect();

        let mut grown: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
        for (&(r, a), &m) in &self.joint {
            if m == 0.0 {
                continue;
            }
            let h = (a as f64 + 1.0) / (t + 2.0);
            if r == 0 {
                grown.entry((1, a)).or_default().push(m.ln());
            } else {
                let l = m.ln() + self.ln_pi(r + 1);
                grown.entry((0, a + 1)).or_default().push(l + h.ln());
                grown
                    .entry((r + 1, a))
                    .or_default()
                    .push(l + (1.0 - h).ln() + ln_gamma);
            }
        }
        let logw: BTreeMap<(usize, u64), f64> = grown
            .into_iter()
            .map(|(k, v)| (k, log_sum_exp(v)))
            .collect();
        let norm = log_sum_exp(logw.values().copied());
        self.joint = logw
            .into_iter()
            .map(|(k, w)| (k, (w - norm).exp()))
            .collect();
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `eps`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
            + step(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, eps, 50)
}

pub fn lognormal_density(mu_hat: f64, sigma_hat: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let z = (t.ln() - mu_hat) / sigma_hat;
    (-0.5 * z * z).exp() / (t * sigma_hat * (2.0 * PI).sqrt())
}

/// `∫ f` over `[a, b]`, split at the density's log-scale landmarks so every
/// panel sees a smooth piece of the curve.
pub fn lognormal_mass(mu_hat: f64, sigma_hat: f64, a: f64, b: f64) -> f64 {
    let mut cuts = vec![a];
    for k in -40..=40 {
        let c = (mu_hat + 0.5 * k as f64 * sigma_hat).exp();
        if c > a && c < b {
            cuts.push(c);
        }
    }
    cuts.push(b);
    let f = |t: f64| lognormal_density(mu_hat, sigma_hat, t);
    cuts.windows(2)
        .map(|w| adaptive_simpson(&f, w[0], w[1], 1e-15))
        .sum()
}

/// Quadrature value of `P(a < D ≤ b | D > a)` for a lognormal duration `D`.
pub fn quadrature_conditional_failure(mu_hat: f64, sigma_hat: f64, a: f64, b: f64) -> f64 {
    let far = (mu_hat + 20.0 * sigma_hat).exp();
    let window = lognormal_mass(mu_hat, sigma_hat, a, b);
    let tail = lognormal_mass(mu_hat, sigma_hat, b, far.max(b));
    window / (window + tail)
}

pub fn normal<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + std * z
}

/// Piecewise-constant Normal stream with known changepoints.
pub struct SegmentedStream {
    pub data: Vec<f64>,
    /// Index of the first observation of every segment after the first.
    pub changepoints: Vec<usize>,
}

/// Segments of length `min_len..=max_len` with means at least `10σ` apart.
pub fn segmented_stream(
    seed: u64,
    segments: usize,
    min_len: usize,
    max_len: usize,
    sigma: f64,
) -> SegmentedStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut changepoints = Vec::new();
    let mut mean: f64 = rng.random_range(100.0..300.0);
    for s in 0..segments {
        if s > 0 {
            changepoints.push(data.len());
            let jump = rng.random_range(10.0 * sigma..25.0 * sigma);
            mean = if mean - jump < 20.0 * sigma || (mean + jump < 600.0 && rng.random::<bool>()) {
                mean + jump
            } else {
                mean - jump
            };
        }
        let len = rng.random_range(min_len..=max_len);
        data.extend((0..len).map(|_| normal(&mut rng, mean, sigma).max(1.0)));
    }
    SegmentedStream { data, changepoints }
}

/// Stream where each observation starts a new segment with probability `p`.
pub fn bernoulli_segmented_stream(seed: u64, len: usize, p: f64, sigma: f64) -> SegmentedStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(len);
    let mut changepoints = Vec::new();
    let mut mean = 200.0;
    for i in 0..len {
        if i > 0 && rng.random::<f64>() < p {
            changepoints.push(i);
            let jump = rng.random_range(15.0 * sigma..30.0 * sigma);
            mean = if mean > 300.0 {
                mean - jump
            } else {
                mean + jump
            };
        }
        data.push(normal(&mut rng, mean, sigma).max(1.0));
    }
    SegmentedStream { data, changepoints }
}

/// Whether, within `window` observations from `changepoint`, the MAP
/// partition stops reaching back before it.
pub fn detected_within(maps: &[usize], changepoint: usize, window: usize) -> bool {
    (changepoint..(changepoint + window).min(maps.len())).any(|t| maps[t] <= t - changepoint + 1)
}

/// Observations at which the MAP partition does not extend the previous one.
pub fn map_resets(maps: &[usize]) -> usize {
    maps.windows(2).filter(|w| w[1] <= w[0]).count()
}
