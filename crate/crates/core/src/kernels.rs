//! Low-level dense kernels: GEMM wrapper and im2col/col2im for 2-D convolution.

/// Geometry of one 2-D convolution (square kernel, symmetric zero padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let ho = (self.height + 2 * self.pad - span) / self.stride + 1;
        let wo = (self.width + 2 * self.pad - span) / self.stride + 1;
        (ho, wo)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a · b + beta · c` for row-major operands described by explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(a.len() as isize >= span(m, k, rsa, csa));
    assert!(b.len() as isize >= span(k, n, rsb, csb));
    assert!(c.len() as isize >= span(m, n, rsc, csc));
    // SAFETY: every operand extent was checked against its slice length above,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
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
            rsc,
            csc,
        );
    }
}

/// Unfold one `C×H×W` sample into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let off_y = (ki * g.dilation) as isize - g.pad as isize;
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + off_y;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto a `C×H×W` sample.
pub fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let off_y = (ki * g.dilation) as isize - g.pad as isize;
                let off_x = (kj * g.dilation) as isize - g.pad as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + off_y;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride) as isize + off_x;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], wt: &[f32], out_c: usize, g: &ConvGeom) -> Vec<f32> {
        let (ho, wo) = g.out_hw();
        let mut y = vec![0.0; out_c * ho * wo];
        for o in 0..out_c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                let xv = x[(c * g.height + iy as usize) * g.width + ix as usize];
                                let wv = wt[((o * g.channels + c) * g.kernel + ki) * g.kernel + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(stride, pad, dilation) in &[(1, 1, 1), (2, 1, 1), (1, 4, 4), (2, 2, 2), (1, 0, 1)] {
            let g = ConvGeom {
                channels: 3,
                height: 9,
                width: 9,
                kernel: 3,
                stride,
                pad,
                dilation,
            };
            let x: Vec<f32> = (0..3 * 81).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
            let wt: Vec<f32> = (0..2 * 27).map(|i| ((i * 11 % 7) as f32 - 3.0) / 5.0).collect();
            let (ho, wo) = g.out_hw();
            let mut cols = vec![0.0; g.col_rows() * ho * wo];
            im2col(&x, &g, &mut cols);
            let mut y = vec![0.0; 2 * ho * wo];
            gemm(
                2,
                g.col_rows(),
                ho * wo,
                &wt,
                (g.col_rows() as isize, 1),
                &cols,
                ((ho * wo) as isize, 1),
                0.0,
                &mut y,
                ((ho * wo) as isize, 1),
            );
            let expect = naive_conv(&x, &wt, 2, &g);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-5, "stride {stride} pad {pad} dil {dilation}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 7,
            width: 7,
            kernel: 3,
            stride: 2,
            pad: 2,
            dilation: 2,
        };
        let (ho, wo) = g.out_hw();
        let x: Vec<f32> = (0..2 * 49).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..g.col_rows() * ho * wo).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
