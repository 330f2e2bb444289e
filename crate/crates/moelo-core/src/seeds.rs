//! Seed derivation.
//!
//! Every random draw in a run flows from a single master seed. Independent
//! streams (weight init, dropout, shuffles, signal noise, splits, ...) are
//! derived as `derive_seed(master, tag)` where `tag` is a short purpose
//! string such as `"encoder"`, `"epoch:3"`, or `"fp:d2:rp14:t3"`.
//!
//! The derivation is FNV-1a over the tag bytes mixed into the master seed
//! with a SplitMix64 finalizer. It is stable across platforms and releases;
//! changing a tag string is a breaking change for reproducibility.

/// Derive a child seed from `master` and a purpose `tag`.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;

    let mut h = FNV_OFFSET;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(master ^ h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
