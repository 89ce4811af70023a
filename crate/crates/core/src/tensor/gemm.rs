//! Row-major dgemm wrappers.
//!
//! `matrixmultiply` does the heavy lifting; transposed operands are
//! expressed through strides so no materialized transpose is ever built.
//! Very small products fall back to naive loops, which beat the packing
//! overhead of the blocked kernel.

/// `c = alpha * op(a) @ op(b) + beta * c` with logical dims `(m, k) @ (k, n)`.
///
/// `ta`/`tb` flag whether the stored row-major buffer is the transpose of
/// the logical operand (so `a` is stored `(k, m)` when `ta` is true).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);

    if m * n * k <= 4096 {
        return gemm_naive(m, k, n, alpha, a, ta, b, tb, beta, c);
    }

    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_naive(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
    let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += at(i, p) * bt(p, j);
            }
            let slot = &mut c[i * n + j];
            *slot = alpha * acc + beta * *slot;
        }
    }
}
