//! Deterministic seed derivation.
//!
//! Every randomized stage takes an explicit seed. Sub-streams (per step,
//! per epoch, per view) derive their own seed from the parent seed and a
//! stream index so that reruns are bit-identical and streams are
//! independent.

/// Mixes a base seed and a stream index into a new seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
