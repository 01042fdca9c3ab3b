//! Tokenisation and stable hashing shared by the mock embedder and the
//! feature extractor.

use std::hash::Hasher;

use fnv::FnvHasher;

/// Splits `text` into lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a of `bytes`, starting from the standard offset basis mixed
/// with `seed`. The value is identical on every platform.
pub fn stable_hash(seed: u64, bytes: &[u8]) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(&seed.to_le_bytes());
    hasher.write(bytes);
    hasher.finish()
}

/// Maps `bytes` to a bucket in `0..n_buckets`.
pub fn bucket(seed: u64, bytes: &[u8], n_buckets: usize) -> usize {
    debug_assert!(n_buckets > 0);
    (stable_hash(seed, bytes) % n_buckets as u64) as usize
}
