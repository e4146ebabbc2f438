//! Data-parallel helpers.
//!
//! With the `parallel` feature the work items run on the rayon pool; without
//! it they run in order on the calling thread. Work is split into chunks of a
//! fixed size and results are returned in index order, so floating-point
//! reductions performed by callers are bit-identical between the two builds
//! and across thread counts.

use std::ops::Range;

/// Samples per work item for the batch kernels.
pub const CHUNK: usize = 16;

/// Whether this build dispatches work to the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Applies `f` to each index in `0..n`, returning results in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Applies `f` to consecutive index ranges of length `chunk` (the last may be
/// shorter), returning one result per range in order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n, chunk);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let parts = map_chunks(37, 8, |r| r);
        assert_eq!(parts.len(), 5);
        assert_eq!(parts[0], 0..8);
        assert_eq!(parts[4], 32..37);
        assert!(map_chunks(0, 8, |r| r).is_empty());
    }

    #[test]
    fn map_preserves_order() {
        assert_eq!(map(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
