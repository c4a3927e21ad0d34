//! Deterministic parallel helpers: seed splitting and indexed map that
//! is identical with and without the `parallel` feature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream from (master seed, module label, index).
/// Stable splitting rule: SplitMix64-style mixing of the three inputs.
pub fn derive_stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15 ^ master;
    for &b in label.as_bytes() {
        h = splitmix(h ^ b as u64);
    }
    h = splitmix(h ^ index);
    let mut seed = [0u8; 32];
    let mut s = h;
    for chunk in seed.chunks_exact_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Map f over 0..n, collecting results in index order. Parallel when the
/// feature is on; the output is identical either way because every call
/// gets only its own index (callers derive per-index rng streams).
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept for benchmarking the parallel path
/// against a like-for-like baseline.
pub fn map_indexed_seq<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}
