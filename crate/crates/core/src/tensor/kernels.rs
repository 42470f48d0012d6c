//! Plain loops for the heavy ops. Every output element accumulates its
//! terms in one fixed order, so results are bitwise reproducible.

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    /// Rows of the patch matrix: `channels · kernel²`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output `(oy, ox)` and tap `(ky, kx)`, or `None`
    /// when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            None
        } else {
            Some(iy as usize * self.width + ix as usize)
        }
    }
}

/// Gather one sample `[C,H,W]` into columns `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.out_len();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some(i) => xc[i],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns `[C·k·k, Ho·Wo]` back into one sample `[C,H,W]`.
pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.out_len();
    let plane = g.height * g.width;
    for c in 0..g.channels {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some(i) = g.source(oy, ox, ky, kx) {
                            dxc[i] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gather one sample into patches `[Ho·Wo, C·k·k]` (the transpose of
/// [`im2col`]).
pub(crate) fn im2row(x: &[f64], g: &ConvGeom, patches: &mut [f64]) {
    let k = g.patch_len();
    let plane = g.height * g.width;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let dst = &mut patches[(oy * g.out_w + ox) * k..(oy * g.out_w + ox + 1) * k];
            let mut idx = 0;
            for c in 0..g.channels {
                let xc = &x[c * plane..(c + 1) * plane];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        dst[idx] = match g.source(oy, ox, ky, kx) {
                            Some(i) => xc[i],
                            None => 0.0,
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}
