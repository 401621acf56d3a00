//! Seeded inputs for the statistics benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integer reference scores with an evaluator that drifts by up to two points.
pub fn integer_pairs(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = rng.random_range(1..=5) as f64;
            (r, (r + rng.random_range(-2..=2) as f64).clamp(1.0, 5.0))
        })
        .collect()
}

/// Real-valued evaluator scores against integer targets, as for a jury mean.
pub fn calibration_pairs(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(1.0..=5.0);
            let y = (x - 0.8 + rng.random_range(-1.0..1.0)).round().clamp(1.0, 5.0);
            (x, y)
        })
        .collect()
}
