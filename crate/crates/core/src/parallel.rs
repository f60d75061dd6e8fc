//! Thread-count selection.
//!
//! `SGNET_THREADS` unset, empty, `0` or `1` selects the deterministic
//! single-threaded executor. Larger values enable rayon over disjoint output
//! regions; every kernel partitions its writes so results stay bit-identical
//! either way.

use std::sync::OnceLock;

pub const THREADS_ENV: &str = "SGNET_THREADS";

static THREADS: OnceLock<usize> = OnceLock::new();

pub fn threads() -> usize {
    *THREADS.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1)
            .max(1);
        if n > 1 {
            // Fails only if a global pool already exists, which is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        n
    })
}

pub fn deterministic() -> bool {
    threads() == 1
}

/// Runs `f(chunk_index, chunk)` over `chunk`-sized pieces of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if deterministic() {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}
