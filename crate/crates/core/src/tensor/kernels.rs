//! Plain loops behind the graph operations.
//!
//! Every reduction runs in a fixed sequential order and never depends on
//! values or neighbouring rows, so a given output element is computed
//! identically regardless of batch shape.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, where `a` is addressed through strides and
/// `b`, `c` are contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_rs: usize,
    a_cs: usize,
    b: &[T],
    c: &mut [T],
) {
    debug_assert!(b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * a_rs + p * a_cs];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose2<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output of `permute(axes)`: `out[idx] = x[idx mapped through axes]`.
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
