//! Data-parallel execution with a sequential fallback.
//!
//! Every batched computation in the crate goes through [`Exec::map`] or
//! [`Exec::map_chunks`]. Work is split into index ranges whose boundaries do
//! not depend on the thread count, and reductions are performed afterwards in
//! index order with compensated summation, so parallel and sequential runs
//! produce bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fixed chunk size for chunked reductions.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs
    /// sequentially.
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this mode actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Evaluates `f(i)` for `i in 0..n`, collecting results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Evaluates `f(range)` over consecutive ranges of length [`CHUNK`]
    /// covering `0..n`, in index order.
    pub fn map_chunks<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    {
        let chunks = n.div_ceil(CHUNK);
        self.map(chunks, |c| {
            let start = c * CHUNK;
            f(start..(start + CHUNK).min(n))
        })
    }
}

/// Neumaier-compensated sum, evaluated in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean with compensated summation; zero for an empty input.
pub fn compensated_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Adds per-chunk gradient vectors into `out` in chunk order.
pub fn reduce_into(out: &mut [f64], parts: &[Vec<f64>]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o += compensated_sum(parts.iter().map(|p| p[j]));
    }
}

/// Independent random stream `stream` derived from `seed`.
///
/// Streams are addressed by index, so a sample's randomness depends only on
/// `(seed, stream)` and never on which worker draws it.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a sub-seed for a named purpose (paths, evaluation, init, ...).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
