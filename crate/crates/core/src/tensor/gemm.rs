//! Single-matrix GEMM on row-major slices, backed by `matrixmultiply`.

/// `c[m,n] = op(a) · op(b)` (or `+=` when `accumulate`).
///
/// `op(a)` is `a` stored `[m,k]`, or `aᵀ` with `a` stored `[k,m]` when `a_t`.
/// `op(b)` is `b` stored `[k,n]`, or `bᵀ` with `b` stored `[n,k]` when `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "lhs buffer too short");
    assert!(b.len() >= k * n, "rhs buffer too short");
    assert!(c.len() >= m * n, "output buffer too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches:
    // a spans m·k elements, b spans k·n, c spans m·n with the given strides.
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
            n as isize,
            1,
        );
    }
}
