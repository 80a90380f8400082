//! Inputs shared by the benchmarks and their sanity tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tranad_core::dataset::{fit_normalize, SynthSpec, TimeSeries};

/// A normalized 600-step, three-dimensional synthetic series.
pub fn small_series() -> TimeSeries {
    let spec = SynthSpec {
        length: 600,
        ..SynthSpec::default()
    };
    let raw = spec.generate().expect("default synthetic spec is valid");
    fit_normalize(&raw, 1e-8)
        .expect("synthetic series normalizes")
        .0
}

/// `n` seeded draws from GPD(gamma, sigma) by inversion.
pub fn gpd_sample(n: usize, gamma: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            sigma / gamma * (u.powf(-gamma) - 1.0)
        })
        .collect()
}

/// `n` labels with about 5% positives and scores that separate them partly.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.05))).collect();
    let scores = truth
        .iter()
        .map(|&y| 0.5 * f64::from(y) + rng.random::<f64>())
        .collect();
    (scores, truth)
}
