//! Deterministic execution helpers: seed derivation for per-sample random
//! streams and order-preserving indexed maps with a sequential fallback.
//!
//! The determinism contract for the whole crate rests on two rules. First,
//! every randomized sample gets its own generator seeded from
//! [`derive_seed`], so values do not depend on which thread produced them.
//! Second, parallel loops only ever *map*; reductions happen afterwards in
//! index order. Under those rules the `parallel` feature changes wall time,
//! never output bytes.

use rand::RngCore;

/// Derives an independent stream seed from a base seed and an index.
///
/// splitmix64 applied to the base xor a spread index; bijective in the
/// index for a fixed base, so distinct indices never collide.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform draw on the open interval (0, 1); never returns 0 or 1, so it is
/// safe to feed through quantile functions.
pub fn uniform_open01<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Maps `f` over `0..n`, preserving index order in the result.
///
/// With the `parallel` feature this fans out over the rayon pool; the
/// result vector is identical to [`map_indexed_seq`] either way.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Sequential reference implementation of [`map_indexed`]; always compiled
/// so benches can compare both paths in one run.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Chunk length for batched gradient accumulation. Chunk boundaries are
/// fixed by this constant, not by thread count, so partial sums merge in
/// the same order no matter how the chunks were computed.
pub const REDUCE_CHUNK: usize = 32;
