//! Single-precision GEMM with an optional row-split parallel path.
//!
//! The inner kernel is `matrixmultiply::sgemm`. Parallelism splits the output
//! rows across threads; each output element is still accumulated by exactly
//! one thread in the same k-order as the sequential path, so parallel and
//! sequential results are bitwise identical.

use crate::parallel::{for_each_chunk_mut, Parallelism};

/// Minimum multiply-add count before the parallel split is worth the overhead.
const PAR_WORK_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Copy)]
struct RawMat {
    ptr: *const f32,
    row_stride: isize,
    col_stride: isize,
}

unsafe impl Sync for RawMat {}
unsafe impl Send for RawMat {}

impl RawMat {
    /// Pointer advanced by `rows` logical rows.
    fn ptr_at_row(&self, rows: usize) -> *const f32 {
        unsafe { self.ptr.offset(rows as isize * self.row_stride) }
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize, usize, usize) {
    // Returns (row_stride, col_stride, logical_rows, logical_cols) of the
    // possibly-transposed view over row-major storage of [rows, cols].
    if transposed {
        (1, cols as isize, cols, rows)
    } else {
        (cols as isize, 1, rows, cols)
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is stored row-major as `[a_rows, a_cols]`, likewise `b`; `c` is
/// row-major `[m, n]` with `m, n, k` taken from the transposed views.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    par: Parallelism,
    alpha: f32,
    a: &[f32],
    a_rows: usize,
    a_cols: usize,
    a_trans: bool,
    b: &[f32],
    b_rows: usize,
    b_cols: usize,
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    let (rsa, csa, m, k) = strides(a_rows, a_cols, a_trans);
    let (rsb, csb, kb, n) = strides(b_rows, b_cols, b_trans);
    assert_eq!(k, kb, "inner dimensions disagree: {k} vs {kb}");
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }

    let a_raw = RawMat { ptr: a.as_ptr(), row_stride: rsa, col_stride: csa };
    let b_raw = RawMat { ptr: b.as_ptr(), row_stride: rsb, col_stride: csb };

    let work = m * n * k;
    let threads = current_threads(par);
    let rows_per_chunk = if threads > 1 && work >= PAR_WORK_THRESHOLD && m >= 2 * threads {
        m.div_ceil(threads)
    } else {
        m
    };

    for_each_chunk_mut(par, c, rows_per_chunk * n, |chunk_idx, c_chunk| {
        let (a_view, b_view) = (&a_raw, &b_raw);
        let r0 = chunk_idx * rows_per_chunk;
        let rows = c_chunk.len() / n;
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                alpha,
                a_view.ptr_at_row(r0),
                a_view.row_stride,
                a_view.col_stride,
                b_view.ptr_at_row(0),
                b_view.row_stride,
                b_view.col_stride,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

fn current_threads(par: Parallelism) -> usize {
    match par {
        Parallelism::Sequential => 1,
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => rayon::current_num_threads(),
    }
}

/// `out = a @ b` convenience over freshly zeroed output.
pub fn matmul(
    par: Parallelism,
    a: &[f32],
    a_rows: usize,
    a_cols: usize,
    a_trans: bool,
    b: &[f32],
    b_rows: usize,
    b_cols: usize,
    b_trans: bool,
) -> Vec<f32> {
    let m = if a_trans { a_cols } else { a_rows };
    let n = if b_trans { b_rows } else { b_cols };
    let mut c = vec![0.0; m * n];
    sgemm(par, 1.0, a, a_rows, a_cols, a_trans, b, b_rows, b_cols, b_trans, 0.0, &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        c.iter().map(|&x| x as f32).collect()
    }

    #[test]
    fn matches_naive_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (17, 8, 3), (64, 33, 20)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c = matmul(Parallelism::Sequential, &a, m, k, a_trans(), &b, k, n, false);
            let want = naive(&a, m, k, &b, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
        fn a_trans() -> bool {
            false
        }
    }

    #[test]
    fn transposed_views_match_explicit_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (9, 6, 4);
        // a stored as [k, m], used transposed.
        let a_t: Vec<f32> = (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a[i * k + p] = a_t[p * m + i];
            }
        }
        let c1 = matmul(Parallelism::Sequential, &a_t, k, m, true, &b, k, n, false);
        let c2 = matmul(Parallelism::Sequential, &a, m, k, false, &b, k, n, false);
        assert_eq!(c1, c2);
    }

    #[test]
    fn parallel_is_bitwise_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (256, 128, 96);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = matmul(Parallelism::Sequential, &a, m, k, false, &b, k, n, false);
        let par = matmul(Parallelism::auto(), &a, m, k, false, &b, k, n, false);
        assert_eq!(seq, par);
    }
}
