//! Seeded, stream-split random number generation.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`] keyed by the run
//! seed and a fixed stream id. Streams make independent consumers (data
//! sampling, projection vectors, noise draws, samplers) reproducible in
//! isolation: drawing more from one stream never shifts another.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream ids, one per independent randomness consumer.
pub mod streams {
    /// Dataset draws (training batches, oracle samples).
    pub const DATA: u64 = 1;
    /// Projection vectors for sliced objectives.
    pub const PROJECTION: u64 = 2;
    /// Gaussian perturbations (DSM / LCSS noise, SDE marginals).
    pub const NOISE: u64 = 3;
    /// Network parameter initialization.
    pub const INIT: u64 = 4;
    /// Sampler randomness (Euler–Maruyama, Langevin).
    pub const SAMPLER: u64 = 5;
    /// Diffusion-time draws for SDE-weighted training.
    pub const TIME: u64 = 6;
    /// Monte-Carlo evaluation draws (Stein checks, trace studies).
    pub const EVAL: u64 = 7;
}

/// A generator for (`seed`, `stream`): same pair, same sequence, always.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` i.i.d. standard normal draws.
pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal_draw(rng)).collect()
}

/// One standard normal draw (Box–Muller on open-interval uniforms).
pub fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    // gen::<f64>() yields [0,1); flip to (0,1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `n` i.i.d. Rademacher draws (±1 with equal probability), scaled by `scale`.
pub fn rademacher(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen::<bool>() { scale } else { -scale })
        .collect()
}

/// `n` i.i.d. uniform draws on `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_reproduces() {
        let a = standard_normal(&mut stream_rng(7, streams::NOISE), 32);
        let b = standard_normal(&mut stream_rng(7, streams::NOISE), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent_of_consumption_order() {
        // Draw from NOISE after exhausting DATA heavily; the NOISE stream
        // must be unaffected.
        let mut rng_data = stream_rng(7, streams::DATA);
        let _ = standard_normal(&mut rng_data, 10_000);
        let noise_after = standard_normal(&mut stream_rng(7, streams::NOISE), 8);
        let noise_fresh = standard_normal(&mut stream_rng(7, streams::NOISE), 8);
        assert_eq!(noise_after, noise_fresh);
    }

    #[test]
    fn normal_moments_are_sane() {
        let xs = standard_normal(&mut stream_rng(3, streams::EVAL), 200_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn rademacher_values_are_pm_scale() {
        let vs = rademacher(&mut stream_rng(5, streams::PROJECTION), 1000, 0.5);
        assert!(vs.iter().all(|&v| v == 0.5 || v == -0.5));
        let balance = vs.iter().sum::<f64>() / vs.len() as f64;
        assert!(balance.abs() < 0.1, "balance {balance}");
    }
}
