//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a master seed through
//! [`derive_seed`], a stable mix of (master, purpose tag, index). Deriving
//! instead of sharing one generator keeps results independent of evaluation
//! order, so parallel workers and resumed runs reproduce the sequential
//! stream bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finalizer from the splitmix64 generator; a bijective avalanche mix.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit hash of the tag bytes (FNV-1a); independent of std's
/// unstable hasher so seeds survive toolchain upgrades.
fn hash_tag(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for the stream identified by (master, tag, index).
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    mix64(mix64(master ^ hash_tag(tag)).wrapping_add(index))
}

/// Generator for the stream identified by (master, tag, index).
pub fn derive_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
