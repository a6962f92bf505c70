//! Low-level numeric kernels shared by the tape ops.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy)]
pub(crate) struct Strides(pub isize, pub isize);

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(cols: usize) -> Self {
        Strides(1, cols as isize)
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        (rows.saturating_sub(1) as isize * self.0 + cols.saturating_sub(1) as isize * self.1)
            as usize
    }
}

/// `c = beta * c + a · b` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
///
/// `beta == 0` overwrites `c` without reading it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    assert!(sa.max_offset(m, k) < a.len(), "gemm lhs out of bounds");
    assert!(sb.max_offset(k, n) < b.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every offset the kernel touches, and
    // `c` is uniquely borrowed for the duration of the call.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution on a single sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C·kh·kw, out_h·out_w]` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let src_row = g.source(oh, ki, g.height);
                    for ow in 0..g.out_w {
                        dst[oh * g.out_w + ow] = match (src_row, g.source(ow, kj, g.width)) {
                            (Some(r), Some(s)) => plane[r * g.width + s],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..g.out_h {
                    let Some(r) = g.source(oh, ki, g.height) else {
                        continue;
                    };
                    for ow in 0..g.out_w {
                        if let Some(s) = g.source(ow, kj, g.width) {
                            plane[r * g.width + s] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}
