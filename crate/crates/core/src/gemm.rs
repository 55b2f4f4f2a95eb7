//! Row-major matrix product on top of `matrixmultiply`.

/// How a row-major operand is read.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    /// Stored as the logical matrix.
    N,
    /// Stored transposed.
    T,
}

/// `c = a·b + beta·c` where `a` is logically `m×k`, `b` is `k×n` and `c` is a
/// row-major `m×n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    op_a: Op,
    b: &[f64],
    op_b: Op,
    beta: f64,
    c: &mut [f64],
) {
    gemm_into(m, k, n, a, op_a, b, op_b, beta, c, Op::N)
}

/// Like [`gemm`], but `op_c == Op::T` stores the `m×n` result transposed
/// (as an `n×m` row-major buffer).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    op_a: Op,
    b: &[f64],
    op_b: Op,
    beta: f64,
    c: &mut [f64],
    op_c: Op,
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too short"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let (rsc, csc) = match op_c {
        Op::N => (n as isize, 1),
        Op::T => (1, m as isize),
    };
    // SAFETY: the length checks above cover every index reachable with these
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
