//! Dense row-major GEMM over `f64` slices, backed by `matrixmultiply`.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`, `op(b)` is
/// `k x n` and `c` is `m x n`. All buffers are row-major; a transposed operand
/// is stored in its untransposed layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
    assert_eq!(c.len(), m * n, "gemm: output buffer length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to exactly the extent implied
    // by the dimensions and strides handed to dgemm.
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

/// `out += v * w` for a row vector `v` (`k`) and row-major `w` (`k x n`).
pub fn row_times_matrix(v: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), v.len() * n);
    for (a, row) in v.iter().zip(w.chunks_exact(n)) {
        if *a != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += a * x);
        }
    }
}

/// `out += w * v` for row-major `w` (`k x n`) and a column vector `v` (`n`).
pub fn matrix_times_col(w: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    debug_assert_eq!(w.len(), out.len() * n);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    }
}

/// Numerically stable `ln(sum(exp(xs)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
