//! Flat row-major matrix kernels used by the graph ops.
//!
//! All kernels compute each output element by accumulating over the shared
//! extent in increasing index order, so results are bit-identical no matter
//! how the row-level rayon parallelism is scheduled, and identical between
//! the plain and transposed-operand entry points.

use rayon::prelude::*;

/// Columns per strip; keeps one strip of the streamed operand resident in
/// cache while a task's rows accumulate over it.
const J_TILE: usize = 512;

/// Fixed task count for row-parallel kernels (independent of pool size).
const ROW_TASKS: usize = 4;

#[inline]
fn mul_add_row(out_row: &mut [f64], aip: f64, brow: &[f64]) {
    for (o, &bv) in out_row.iter_mut().zip(brow) {
        *o += aip * bv;
    }
}

/// Shared driver: each task owns a contiguous block of output rows and fills
/// it strip by strip. `fill` receives (global row index, j0, out strip) and
/// must accumulate over the shared extent in increasing order.
fn rows_by_strips<F>(out: &mut [f64], m: usize, n: usize, fill: F)
where
    F: Fn(usize, usize, &mut [f64]) + Sync,
{
    let chunk_rows = m.div_ceil(ROW_TASKS).max(1);
    let run = |task: usize, out_rows: &mut [f64]| {
        let i0 = task * chunk_rows;
        let rows = out_rows.len() / n;
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + J_TILE).min(n);
            for r in 0..rows {
                fill(i0 + r, j0, &mut out_rows[r * n + j0..r * n + j1]);
            }
            j0 = j1;
        }
    };
    if m > chunk_rows {
        out.par_chunks_mut(chunk_rows * n).enumerate().for_each(|(t, c)| run(t, c));
    } else {
        run(0, out);
    }
}

/// out = a (m x k) · b (k x n). `out` is overwritten.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    rows_by_strips(out, m, n, |i, j0, strip| {
        strip.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            mul_add_row(strip, aip, &b[p * n + j0..p * n + j0 + strip.len()]);
        }
    });
}

/// out = a (m x k) · bᵀ where b is (n x k). `out` is overwritten.
///
/// Implemented by materializing bᵀ so the inner loops stay unit-stride; the
/// per-element accumulation order matches `matmul_into` exactly.
pub fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![0.0; n * k];
    transpose_into(b, &mut bt, n, k);
    matmul_into(a, &bt, out, m, k, n);
}

/// out = aᵀ · b where a is (p x m) and b is (p x n). `out` is overwritten.
pub fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], p: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    rows_by_strips(out, m, n, |i, j0, strip| {
        strip.fill(0.0);
        for q in 0..p {
            mul_add_row(strip, a[q * m + i], &b[q * n + j0..q * n + j0 + strip.len()]);
        }
    });
}

/// out = transpose of a (m x n) -> (n x m). Blocked for cache locality.
pub fn transpose_into(a: &[f64], out: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    const TILE: usize = 32;
    for i0 in (0..m).step_by(TILE) {
        for j0 in (0..n).step_by(TILE) {
            for i in i0..(i0 + TILE).min(m) {
                for j in j0..(j0 + TILE).min(n) {
                    out[j * m + i] = a[i * n + j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_into(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|v| (v as f64).sin()).collect(); // 2x3
        let mut bt = vec![0.0; 6];
        transpose_into(&b, &mut bt, 2, 3);

        let mut via_nt = vec![0.0; 4];
        matmul_nt_into(&a, &b, &mut via_nt, 2, 3, 2);
        let mut via_nn = vec![0.0; 4];
        matmul_into(&a, &bt, &mut via_nn, 2, 3, 2);
        assert_eq!(via_nt, via_nn);

        let mut via_tn = vec![0.0; 9];
        matmul_tn_into(&a, &b, &mut via_tn, 2, 3, 3);
        let mut at = vec![0.0; 6];
        transpose_into(&a, &mut at, 2, 3);
        let mut refv = vec![0.0; 9];
        matmul_into(&at, &b, &mut refv, 3, 2, 3);
        assert_eq!(via_tn, refv);
    }

    #[test]
    fn transpose_non_square() {
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 3x4
        let mut out = vec![0.0; 12];
        transpose_into(&a, &mut out, 3, 4);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(out[j * 3 + i], a[i * 4 + j]);
            }
        }
    }
}
