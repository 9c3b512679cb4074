//! Raw numeric kernels shared by the graph ops.

/// Strided matrix view descriptor: `(row_stride, col_stride)`.
pub(crate) type Strides = (isize, isize);

/// Strides of a row-major matrix with `cols` columns.
pub(crate) fn row_major(cols: usize) -> Strides {
    (cols as isize, 1)
}

/// Strides that read a row-major matrix with `cols` columns as its transpose.
pub(crate) fn transposed(cols: usize) -> Strides {
    (1, cols as isize)
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m as isize - 1) * sa.0 + (k as isize - 1) * sa.1;
    let max_b = (k as isize - 1) * sb.0 + (n as isize - 1) * sb.1;
    assert!((max_a as usize) < a.len() && (max_b as usize) < b.len());
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `x[N,C,H,W]` into a `(C·k·k) × (N·OH·OW)` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.rows() * cols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let base = n * plane + oi * g.ow;
                        for oj in 0..g.ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst[base + oj] = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub(crate) fn col2im_add(dcols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &dcols[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let base = n * plane + oi * g.ow;
                        for oj in 0..g.ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                dst[ii as usize * g.w + jj as usize] += src[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[F, N·P] -> [N, F, P]`
pub(crate) fn fnp_to_nfp(src: &[f64], f: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; f * n * p];
    for fi in 0..f {
        for ni in 0..n {
            let s = &src[fi * n * p + ni * p..fi * n * p + (ni + 1) * p];
            out[(ni * f + fi) * p..(ni * f + fi + 1) * p].copy_from_slice(s);
        }
    }
    out
}

/// `[N, F, P] -> [F, N·P]`
pub(crate) fn nfp_to_fnp(src: &[f64], f: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; f * n * p];
    for ni in 0..n {
        for fi in 0..f {
            let s = &src[(ni * f + fi) * p..(ni * f + fi + 1) * p];
            out[fi * n * p + ni * p..fi * n * p + (ni + 1) * p].copy_from_slice(s);
        }
    }
    out
}
