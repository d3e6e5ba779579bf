//! Data-parallel helpers with deterministic reduction order.
//!
//! Per-image work (gradients, evaluation) fans out across a worker pool when
//! the `parallel` feature is enabled, but results are always combined in
//! index order over fixed-size chunks, so a run is bit-identical regardless
//! of thread count. Call sites pass `parallel: false` to force the
//! sequential path (used by the benchmark suite to measure the speedup).

use std::ops::Range;

/// Fixed chunk width for deterministic chunked reductions.
pub const DEFAULT_CHUNK: usize = 8;

fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    assert!(chunk > 0);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Map every index in `0..n` to a value, preserving index order.
pub fn ordered_map<U, F>(n: usize, parallel: bool, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Chunked map-reduce with a fixed reduction order.
///
/// Each chunk of indices is mapped to a partial result (the chunk itself is
/// processed sequentially in index order inside `map_chunk`); partial results
/// are then folded left-to-right in chunk order. The chunk layout depends
/// only on `n` and `chunk`, never on thread count.
pub fn map_reduce_ordered<T, F, G, R>(
    n: usize,
    chunk: usize,
    parallel: bool,
    map_chunk: F,
    mut fold: G,
    init: R,
) -> R
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
    G: FnMut(R, T) -> R,
{
    let ranges = chunk_ranges(n, chunk);
    let partials: Vec<T> = {
        #[cfg(feature = "parallel")]
        {
            if parallel {
                use rayon::prelude::*;
                ranges.into_par_iter().map(&map_chunk).collect()
            } else {
                ranges.into_iter().map(&map_chunk).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = parallel;
            ranges.into_iter().map(&map_chunk).collect()
        }
    };
    partials.into_iter().fold(init, |acc, t| fold(acc, t))
}
