//! Seed derivation and seeded sampling helpers.
//!
//! Every stochastic choice in a run is driven by a seed derived from the run
//! seed through `mix`, so results are a pure function of the configuration.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby inputs.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix(splitmix(seed) ^ tag)
}

/// Derive a child seed from a parent seed and two stream tags.
pub fn mix2(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed, a), b)
}

/// Derive a child seed from a parent seed and three stream tags.
pub fn mix3(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    mix(mix2(seed, a, b), c)
}

/// Seeded generator used throughout the crate.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Uniforms in (0,1]; log(0) guarded by the 1-u transform.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gamma(shape, 1) draw via Marsaglia-Tsang, with the standard boost for
/// shape < 1.
pub fn gamma(rng: &mut ChaCha8Rng, shape: f64) -> f64 {
    assert!(shape > 0.0, "gamma shape must be positive");
    if shape < 1.0 {
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        return gamma(rng, shape + 1.0) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

/// Dirichlet(concentration * 1_n) draw: normalized i.i.d. Gamma components.
pub fn dirichlet(rng: &mut ChaCha8Rng, concentration: f64, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| gamma(rng, concentration)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All-underflow corner at tiny concentrations: fall back to uniform.
        return vec![1.0 / n as f64; n];
    }
    draws.into_iter().map(|g| g / total).collect()
}
