//! Dense float kernels shared by the adapter, training, and retrieval paths.
//!
//! Reductions run in a fixed per-row order, so results are bit-identical
//! whether the `parallel` feature is enabled or not, and across thread
//! counts. Parallelism only ever fans out over independent rows.

use ndarray::Array2;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dot product with a fixed four-lane accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Apply `f` to each row of `out`, in parallel when the `parallel` feature
/// is enabled. `f` receives the row index and a mutable view of the row.
pub fn for_each_row<F>(out: &mut Array2<f64>, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let cols = out.ncols();
    let data = out
        .as_slice_mut()
        .expect("row-major layout expected for row kernels");
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Sequential twin of [`for_each_row`], kept available for benchmarks.
pub fn for_each_row_seq<F>(out: &mut Array2<f64>, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    let cols = out.ncols();
    if cols == 0 {
        return;
    }
    let data = out
        .as_slice_mut()
        .expect("row-major layout expected for row kernels");
    data.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

fn sim_row(q_row: &[f64], refs: &Array2<f64>, out: &mut [f64]) {
    let r_data = refs.as_slice().expect("row-major refs");
    let d = refs.ncols();
    for (j, out_j) in out.iter_mut().enumerate() {
        *out_j = dot(q_row, &r_data[j * d..(j + 1) * d]);
    }
}

/// Pairwise inner products: row i holds `q_i . r_j` for every reference j.
///
/// Rows are computed independently; per-row reduction order is fixed.
pub fn similarity_matrix(queries: &Array2<f64>, refs: &Array2<f64>) -> Array2<f64> {
    assert_eq!(queries.ncols(), refs.ncols(), "dimension mismatch");
    let mut out = Array2::zeros((queries.nrows(), refs.nrows()));
    let q = queries.as_slice().expect("row-major queries");
    let d = queries.ncols();
    for_each_row(&mut out, |i, row| {
        sim_row(&q[i * d..(i + 1) * d], refs, row);
    });
    out
}

/// Sequential twin of [`similarity_matrix`].
pub fn similarity_matrix_seq(queries: &Array2<f64>, refs: &Array2<f64>) -> Array2<f64> {
    assert_eq!(queries.ncols(), refs.ncols(), "dimension mismatch");
    let mut out = Array2::zeros((queries.nrows(), refs.nrows()));
    let q = queries.as_slice().expect("row-major queries");
    let d = queries.ncols();
    for_each_row_seq(&mut out, |i, row| {
        sim_row(&q[i * d..(i + 1) * d], refs, row);
    });
    out
}

/// Collect the result of `f` for indices `0..n`, preserving index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}
