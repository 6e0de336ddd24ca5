//! Seeded inputs for the pipeline benchmarks.

use rgx_core::LogitPair;

/// Deterministic logits in [-5, 5) from a linear congruential sequence.
pub fn logits(n: usize, seed: u64) -> LogitPair {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 10.0 - 5.0
    };
    let start = (0..n).map(|_| next()).collect();
    let end = (0..n).map(|_| next()).collect();
    LogitPair::new(start, end).expect("generated logits are finite")
}

/// Losses drawn from three well separated bands.
pub fn three_band_losses(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let jitter = ((i * 7919) % 101) as f64 / 1000.0;
            match i % 3 {
                0 => 0.1 + jitter,
                1 => 1.5 + jitter,
                _ => 6.0 + jitter,
            }
        })
        .collect()
}
