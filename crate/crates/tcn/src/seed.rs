//! Deterministic seed derivation and hashing helpers.
//!
//! All randomness in the crate funnels through a single root seed; per-use
//! streams are derived with splitmix64 mixing so adding a consumer never
//! shifts the streams of existing ones.

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Mix extra words into a seed, order-sensitively.
pub fn mix(root: u64, words: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0xA076_1D64_78BD_642F);
    for &w in words {
        h = splitmix64(h ^ w.wrapping_mul(0xE703_7ED1_A0B4_28DB));
    }
    h
}

/// FNV-1a over bytes; used for vocabulary and corpus fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn fnv1a_str(h: u64, s: &str) -> u64 {
    let mut h = h;
    for &b in s.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    // separator so ["ab","c"] differs from ["a","bc"]
    h ^= 0x1F;
    h.wrapping_mul(0x0000_0100_0000_01B3)
}
