//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the maps below run on the rayon pool. Without
//! it, or inside [`sequential`], they run in order on the calling thread.
//! Results are always collected in index order, so reductions are identical
//! in both modes.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every helper in this module forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Default Monte Carlo chunk size. Chunks, not threads, own RNG streams.
pub const MC_CHUNK: usize = 2048;

/// Generator for stream `stream` of a base seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits `samples` into fixed chunks, each with its own RNG stream, and
/// returns the per-chunk results in chunk order.
pub fn mc_chunks<T, F>(samples: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync + Send,
{
    let chunks = samples.div_ceil(MC_CHUNK);
    map_range(chunks, |c| {
        let count = MC_CHUNK.min(samples - c * MC_CHUNK);
        let mut rng = stream_rng(seed, c as u64);
        f(&mut rng, count)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn chunked_streams_do_not_depend_on_mode() {
        let run = || mc_chunks(10_000, 42, |rng, k| (0..k).map(|_| rng.gen::<f64>()).sum::<f64>());
        let par = run();
        let seq = sequential(run);
        assert_eq!(par, seq);
        assert_eq!(par.len(), 10_000usize.div_ceil(MC_CHUNK));
    }

    #[test]
    fn sequential_flag_is_scoped() {
        sequential(|| assert!(!is_parallel()));
        assert_eq!(is_parallel(), cfg!(feature = "parallel"));
    }
}
