/// Strides of a row-major matrix view, possibly transposed.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    row_stride: isize,
    col_stride: isize,
}

impl Layout {
    /// A stored row-major with leading dimension `ld`.
    pub fn row_major(ld: usize) -> Self {
        Self {
            row_stride: ld as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with leading dimension `ld`.
    pub fn transposed(ld: usize) -> Self {
        Self {
            row_stride: 1,
            col_stride: ld as isize,
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * self.row_stride as usize + (cols - 1) * self.col_stride as usize
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n` and `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(la.max_offset(m, k) < a.len(), "gemm lhs out of bounds");
    assert!(lb.max_offset(k, n) < b.len(), "gemm rhs out of bounds");
    // SAFETY: every strided access stays inside the slices, checked by the asserts above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
