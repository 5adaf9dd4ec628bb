//! Data-parallel helpers.
//!
//! Every hot loop that fans out over independent work items (sub-network
//! samples, test points, ensemble members, Monte-Carlo chunks, experiment
//! runs) goes through [`map_indexed`]. With the `parallel` feature the items
//! are scheduled on rayon's pool; without it, or with
//! [`Execution::Sequential`], they run in order on the calling thread.
//! Each item receives only its index, so callers derive per-item RNG seeds
//! from it and the results are identical under both execution modes.

/// How [`map_indexed`] schedules work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `f` inside a rayon pool limited to `jobs` threads (0 = rayon default).
pub fn with_worker_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if jobs > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                return pool.install(f);
            }
            log::warn!("could not build a {jobs}-thread pool, using the global pool");
        }
    }
    let _ = jobs;
    f()
}

/// Mixes a root seed with a label into an independent 64-bit stream seed.
///
/// FNV-1a over the label bytes, xored into the root seed, then one
/// splitmix64 finalization round. Stable across platforms and releases.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

/// Seed for the `index`-th item of a fan-out rooted at `root`.
pub fn derive_index_seed(root: u64, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
