use rand::seq::index::sample;

use crate::rng::{keyed, Stream};

/// Central-difference comparison settings.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates sampled per check; all when larger than the input.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-5, floor: 1e-6, samples: 100, seed: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Sorted coordinates to probe.
pub fn sample_coords(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut v = sample(&mut keyed(seed, Stream::GradCheck, &[n as u64]), n, count).into_vec();
    v.sort_unstable();
    v
}

/// Max relative error between `analytic` and central differences of `f`
/// at sampled coordinates of `x`.
pub fn check_gradient(cfg: &GradCheck, x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut v = x.to_vec();
    let mut worst = 0.0f64;
    for i in sample_coords(x.len(), cfg.samples, cfg.seed) {
        v[i] = x[i] + cfg.eps;
        let up = f(&v);
        v[i] = x[i] - cfg.eps;
        let down = f(&v);
        v[i] = x[i];
        let numeric = (up - down) / (2.0 * cfg.eps);
        worst = worst.max(relative_error(analytic[i], numeric, cfg.floor));
    }
    worst
}
