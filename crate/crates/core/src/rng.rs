//! Seeded random streams. Every random draw in the crate flows from a run
//! seed through named substreams, so runs are reproducible and substreams
//! can be re-derived independently (e.g. re-rendering one observation).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// FNV-1a over bytes; stable across platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives a substream generator from a root seed, a label and an index.
pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&fnv1a(b"rwm.substream").to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Uniform f64 in [0, 1) using the top 53 bits of a u64 draw.
pub fn uniform01(rng: &mut ChaCha12Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [lo, hi).
pub fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Uniform integer in [lo, hi] inclusive.
pub fn uniform_int(rng: &mut ChaCha12Rng, lo: i64, hi: i64) -> i64 {
    debug_assert!(hi >= lo);
    let span = (hi - lo) as u64 + 1;
    lo + (rng.next_u64() % span) as i64
}

/// Approximately standard-normal draw as a sum of 12 uniforms minus 6.
///
/// Uses only additions of exactly representable uniforms, so the result is
/// bit-identical across platforms (no libm involved).
pub fn gaussian_ih(rng: &mut ChaCha12Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..12 {
        acc += uniform01(rng);
    }
    acc - 6.0
}

/// Picks one element of a slice uniformly.
pub fn choose<'a, T>(rng: &mut ChaCha12Rng, items: &'a [T]) -> &'a T {
    &items[(rng.next_u64() % items.len() as u64) as usize]
}
