//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every kernel in this crate is written as "fill disjoint output rows, each
//! row computed by a sequential inner loop". That shape keeps results
//! bit-identical no matter how rayon schedules the rows, so parallel and
//! sequential builds (and runs) produce byte-equal tensors.
//!
//! The `parallel` feature compiles the rayon path in; [`set_sequential`]
//! switches to the plain loop at runtime, which the benches use to compare
//! both paths inside one binary.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is enabled.
pub fn set_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::Relaxed);
}

/// True when calls will run on the rayon pool.
pub fn parallel_active() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Split `out` into `row_len`-sized rows and fill each with `f(row_index, row)`.
///
/// Rows are disjoint, so the result does not depend on scheduling.
pub fn fill_rows<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to every item of a slice, in parallel when enabled.
pub fn for_each_item<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    fill_rows(items, 1, |i, chunk| f(i, &mut chunk[0]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_rows_matches_sequential() {
        let compute = |i: usize, row: &mut [f64]| {
            let mut acc = 0.0f64;
            for (j, v) in row.iter_mut().enumerate() {
                acc += ((i * 31 + j) as f64).sin();
                *v = acc;
            }
        };
        let mut par = vec![0.0; 64 * 17];
        fill_rows(&mut par, 17, compute);
        let mut seq = vec![0.0; 64 * 17];
        set_sequential(true);
        fill_rows(&mut seq, 17, compute);
        set_sequential(false);
        assert_eq!(par, seq);
    }

    #[test]
    fn map_indexed_order() {
        let v = map_indexed(5, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16]);
    }
}
