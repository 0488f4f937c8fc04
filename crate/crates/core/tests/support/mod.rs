//! Shared oracles for the integration suites: central finite differences,
//! random tensors on seeded streams, and a KS-statistic helper. Everything
//! here is independent of the graph's backward implementation.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use xform_core::rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng_for(seed: u64) -> ChaCha20Rng {
    rng::stream(seed, 7777)
}

/// Values in [-2, 2], pushed away from the given kink offsets by a margin.
pub fn random_values<R: Rng>(r: &mut R, n: usize, kinks: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = r.gen_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect()
}

/// Central finite differences at selected coordinates only; keeps oracles
/// tractable on wide parameter matrices.
pub fn finite_diff_at(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    indices: &[usize],
) -> Vec<f64> {
    let mut grad = vec![0.0; indices.len()];
    let mut probe = x.to_vec();
    for (slot, &i) in indices.iter().enumerate() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[slot] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central finite differences of a scalar function at x.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest pairwise relative error, treating values below `floor` as equal.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    let err = max_rel_err(a, b, 1.0);
    assert!(err < tol, "{what}: max relative error {err:.3e} >= {tol:.0e}");
}

/// Two-sided Kolmogorov-Smirnov statistic of samples against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut worst = 0.0f64;
    for (i, x) in samples.iter().enumerate() {
        let f = cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        worst = worst.max((f - lo).abs()).max((hi - f).abs());
    }
    worst
}

/// Empirical CDF evaluator for a piecewise-linear histogram CDF.
pub fn histogram_cdf<'a>(edges: &'a [f64], densities: &'a [f64]) -> impl Fn(f64) -> f64 + 'a {
    move |x: f64| {
        if x <= edges[0] {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..densities.len() {
            let (a, b) = (edges[i], edges[i + 1]);
            if x >= b {
                acc += densities[i] * (b - a);
            } else {
                acc += densities[i] * (x - a).max(0.0);
                break;
            }
        }
        acc.min(1.0)
    }
}
