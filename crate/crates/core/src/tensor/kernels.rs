//! Raw slice kernels behind the tape ops. No shape checking here.

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, both row-major,
/// optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements of the three slices, whose lengths are asserted above.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Unfolds `x[N,C,H,W]` into `cols[C·k·k, N·Ho·Wo]`.
pub(crate) fn im2col(x: &[f32], g: ConvGeom) -> Vec<f32> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let mut cols = vec![0.0f32; g.col_rows() * ncols];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let base = ni * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[base + oy * wo..][..wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into an `[N,C,H,W]` buffer.
pub(crate) fn col2im(cols: &[f32], g: ConvGeom) -> Vec<f32> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let mut x = vec![0.0f32; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    let base = ni * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[base + oy * wo..][..wo];
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C, N·S]` → `[N, C, S]`.
pub(crate) fn channels_to_batch(src: &[f32], n: usize, c: usize, s: usize) -> Vec<f32> {
    let mut dst = vec![0.0f32; n * c * s];
    for ci in 0..c {
        for ni in 0..n {
            dst[(ni * c + ci) * s..][..s].copy_from_slice(&src[ci * n * s + ni * s..][..s]);
        }
    }
    dst
}

/// `[N, C, S]` → `[C, N·S]`.
pub(crate) fn batch_to_channels(src: &[f32], n: usize, c: usize, s: usize) -> Vec<f32> {
    let mut dst = vec![0.0f32; n * c * s];
    for ni in 0..n {
        for ci in 0..c {
            dst[ci * n * s + ni * s..][..s].copy_from_slice(&src[(ni * c + ci) * s..][..s]);
        }
    }
    dst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive_mm(m, k, n, &a, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_in = if ta { transpose(m, k, &a) } else { a.clone() };
            let b_in = if tb { transpose(k, n, &b) } else { b.clone() };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a_in, ta, &b_in, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { n: 2, c: 3, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let x: Vec<f32> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f32 * 0.3).sin()).collect();
        let cols = im2col(&x, g);
        let y: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.7).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let back = col2im(&y, g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn layout_permutations_invert() {
        let src: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let t = batch_to_channels(&src, 2, 3, 4);
        assert_eq!(channels_to_batch(&t, 2, 3, 4), src);
    }
}
