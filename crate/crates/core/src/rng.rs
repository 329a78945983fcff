//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 keystream addressed by `(seed, stream id)`, so a
//! work item can regenerate its numbers from its index alone. Results are
//! therefore independent of how work items are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream ids are built from a domain tag and up to two indices.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(b);
    rng
}

/// Domain tags, one per consumer.
pub mod domain {
    pub const THIN_SHELL: u64 = 1;
    pub const PROFILE: u64 = 2;
    pub const MALGRANGE: u64 = 3;
    pub const SPHERICAL: u64 = 4;
    pub const CLOUD: u64 = 5;
    pub const HYPERPLANE: u64 = 6;
    pub const DEGREE: u64 = 7;
    pub const RANDOM_FAMILY: u64 = 8;
}

/// Mixes a parent seed with an index into a child seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform direction on the unit sphere of `R^n`.
pub fn unit_vector<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let r = crate::vecops::norm(&v);
        if r > 1e-300 {
            return v.into_iter().map(|c| c / r).collect();
        }
    }
}

/// Uniform point in the ball of radius `r` in `R^n`.
pub fn in_ball<R: Rng>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    let u = unit_vector(rng, n);
    let s: f64 = rng.random::<f64>().powf(1.0 / n as f64) * r;
    u.into_iter().map(|c| c * s).collect()
}

/// Volume of the ball of radius `r` in `R^n`.
pub fn ball_volume(n: usize, r: f64) -> f64 {
    // V_n = pi^{n/2} / Gamma(n/2 + 1), via the two-step recursion V_n = 2 pi / n V_{n-2}.
    let mut v = if n % 2 == 0 { 1.0 } else { 2.0 };
    let mut k = if n % 2 == 0 { 2 } else { 3 };
    while k <= n {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v * r.powi(n as i32)
}
