// Bounds checks for the strided matrix products handed to `matrixmultiply`.

fn max_offset(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize
}

#[allow(clippy::too_many_arguments)]
pub(super) fn check_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_strides: (isize, isize),
    b_len: usize,
    b_strides: (isize, isize),
    c_len: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_offset(m, k, a_strides) < a_len, "gemm: lhs out of bounds");
        assert!(max_offset(k, n, b_strides) < b_len, "gemm: rhs out of bounds");
    }
    assert!(m * n <= c_len, "gemm: output out of bounds");
}
