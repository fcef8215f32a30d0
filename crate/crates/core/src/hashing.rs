//! Small, platform-stable hash functions.
//!
//! `std`'s hashers make no stability promise across releases, so anything
//! that ends up on disk (embeddings, sampling seeds) goes through these.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `bytes`, starting from `FNV_OFFSET ^ seed`.
pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; spreads FNV's weak low bits.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stable_hash(s: &str, seed: u64) -> u64 {
    mix64(fnv1a64(s.as_bytes(), seed))
}
