//! Raw row-major kernels behind the tape's matrix ops.
//!
//! Every product accumulates `c[i][j] += a[i][t] * b[t][j]` with `t`
//! ascending from zero, so results match a plain triple loop bit for bit.

use crate::numerics::scalar::Scalar;

/// Extents of `op(A)`, where `op` optionally transposes a stored `rows x cols` matrix.
fn logical(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..rows {
        let row = &src[i * cols..(i + 1) * cols];
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// Rows and columns of the register tile in [`gemm`].
const MR: usize = 4;
const NR: usize = 8;

/// `C = op(A) * op(B)`; returns `(C, m, n)`. Inner extents must already match.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    a_dims: (usize, usize),
    ta: bool,
    b: &[T],
    b_dims: (usize, usize),
    tb: bool,
) -> (Vec<T>, usize, usize) {
    let (m, k) = logical(a_dims.0, a_dims.1, ta);
    let (k2, n) = logical(b_dims.0, b_dims.1, tb);
    debug_assert_eq!(k, k2);
    let b_owned;
    let b_nn: &[T] = if tb {
        b_owned = transpose(b, b_dims.0, b_dims.1);
        &b_owned
    } else {
        b
    };
    // element (i, t) of op(A) sits at i * row_stride + t * col_stride
    let strides = if ta { (1, m) } else { (k, 1) };
    let mut c = vec![T::zero(); m * n];
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, the only requirement of the wrapper.
            unsafe { tiles_avx2(a, strides, b_nn, &mut c, (m, k, n)) };
            return (c, m, n);
        }
    }
    tiles(a, strides, b_nn, &mut c, (m, k, n));
    (c, m, n)
}

/// Same code compiled with AVX2 enabled; rounding is unchanged because
/// no multiply-add is fused.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tiles_avx2<T: Scalar>(a: &[T], strides: (usize, usize), b_nn: &[T], c: &mut [T], dims: (usize, usize, usize)) {
    tiles(a, strides, b_nn, c, dims)
}

#[inline(always)]
fn tiles<T: Scalar>(a: &[T], (row_stride, col_stride): (usize, usize), b_nn: &[T], c: &mut [T], (m, k, n): (usize, usize, usize)) {
    for i0 in (0..m).step_by(MR) {
        for j0 in (0..n).step_by(NR) {
            if i0 + MR <= m && j0 + NR <= n {
                let mut acc = [[T::zero(); NR]; MR];
                for t in 0..k {
                    let brow: &[T; NR] = b_nn[t * n + j0..t * n + j0 + NR].try_into().expect("tile width");
                    for (r, acc_row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * row_stride + t * col_stride];
                        for (cv, &bv) in acc_row.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
                }
            } else {
                for i in i0..(i0 + MR).min(m) {
                    for j in j0..(j0 + NR).min(n) {
                        let mut s = T::zero();
                        for t in 0..k {
                            s += a[i * row_stride + t * col_stride] * b_nn[t * n + j];
                        }
                        c[i * n + j] = s;
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
