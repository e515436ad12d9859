//! Deterministic random streams. Every stochastic choice in the crate draws
//! from a ChaCha generator derived from an explicit seed, so reruns of any
//! command produce byte-identical outputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose ("init", "sampler", ...) under one
/// run seed. FNV-1a keeps the mapping stable across platforms.
pub fn derived(seed: u64, label: &str) -> ChaCha20Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha20Rng::seed_from_u64(seed ^ h)
}

/// A fresh u64 seed for a named sub-run (e.g. one model in a fleet).
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    derived(seed, label).gen()
}

/// Standard normal via Box-Muller, resampled until within `cutoff` standard
/// deviations, then scaled by `std`.
pub fn truncated_normal(rng: &mut impl Rng, std: f64, cutoff: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= cutoff {
            return z * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_streams_differ_by_label_and_repeat_by_seed() {
        let a: Vec<u64> = (0..4).map(|_| derived(7, "init").gen()).collect();
        let b: Vec<u64> = (0..4).map(|_| derived(7, "sampler").gen()).collect();
        assert_ne!(a[0], b[0]);
        let mut r1 = derived(7, "init");
        let mut r2 = derived(7, "init");
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    }

    #[test]
    fn truncated_normal_respects_cutoff_and_moments() {
        let mut rng = seeded(42);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = truncated_normal(&mut rng, 0.02, 2.0);
            assert!(v.abs() <= 0.04 + 1e-12);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 2e-3);
        // truncation at 2 sigma shrinks variance to about 0.774 sigma^2
        let expected = 0.02f64 * 0.02 * 0.7737;
        assert!((var - expected).abs() < 0.15 * expected, "var {}", var);
    }
}
