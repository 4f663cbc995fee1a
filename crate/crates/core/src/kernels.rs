//! Slice-level numeric kernels shared by the autograd ops and the
//! tape-free inference paths. Layouts are row-major; images are `[C, H, W]`.

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A matrix stored in a flat buffer with arbitrary row and column strides.
#[derive(Debug, Clone, Copy)]
pub struct Strided {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strided {
    /// Dense row-major `[rows, cols]`.
    pub fn rm(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of `self`, same buffer.
    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `C ← α A B + β C` on strided buffers (blocked GEMM for non-tiny shapes).
pub fn gemm(alpha: f64, a: &[f64], sa: Strided, b: &[f64], sb: Strided, beta: f64, c: &mut [f64], sc: Strided) {
    assert!(sa.cols == sb.rows && sa.rows == sc.rows && sb.cols == sc.cols, "gemm shape mismatch");
    assert!(a.len() >= sa.span() && b.len() >= sb.span() && c.len() >= sc.span(), "gemm buffer too short");
    if sc.rows == 0 || sc.cols == 0 {
        return;
    }
    // SAFETY: every index the kernel touches lies within the spans checked above.
    unsafe {
        matrixmultiply::dgemm(
            sa.rows,
            sa.cols,
            sb.cols,
            alpha,
            a.as_ptr(),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr(),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr(),
            sc.rs as isize,
            sc.cs as isize,
        );
    }
}

/// Dot product with four interleaved accumulators; the summation order is
/// fixed so results are reproducible.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Returns `None` when the output size is not an exact division.
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let span_h = (h + 2 * pad).checked_sub(k)?;
        let span_w = (w + 2 * pad).checked_sub(k)?;
        if stride == 0 || span_h % stride != 0 || span_w % stride != 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        })
    }

    /// Output columns `[x0, x1)` whose input column `x*stride + kx - pad`
    /// lies inside the image.
    #[inline]
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo_num = self.pad.saturating_sub(kx);
        let x0 = lo_num.div_ceil(s);
        // need x*s + kx - pad <= w - 1
        let limit = self.w + self.pad;
        let x1 = if kx >= limit {
            0
        } else {
            ((limit - kx - 1) / s + 1).min(self.w_out)
        };
        (x0.min(x1), x1)
    }

    #[inline]
    fn y_range(&self, ky: usize) -> (usize, usize) {
        let s = self.stride;
        let y0 = self.pad.saturating_sub(ky).div_ceil(s);
        let limit = self.h + self.pad;
        let y1 = if ky >= limit {
            0
        } else {
            ((limit - ky - 1) / s + 1).min(self.h_out)
        };
        (y0.min(y1), y1)
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    out.iter_mut().for_each(|v| *v = 0.0);
    for co in 0..g.c_out {
        let out_c = &mut out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let in_c = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (y0, y1) = g.y_range(ky);
                for kx in 0..k {
                    let wv = kernel[((co * g.c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.x_range(kx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y * s + ky - p;
                        let orow = &mut out_c[y * g.w_out..(y + 1) * g.w_out];
                        let irow = &in_c[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let ix0 = x0 + kx - p;
                            axpy(wv, &irow[ix0..ix0 + (x1 - x0)], &mut orow[x0..x1]);
                        } else {
                            for x in x0..x1 {
                                orow[x] += wv * irow[x * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    for co in 0..g.c_out {
        let go_c = &grad_out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let gi_c = &mut grad_in[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (y0, y1) = g.y_range(ky);
                for kx in 0..k {
                    let wv = kernel[((co * g.c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.x_range(kx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y * s + ky - p;
                        let grow = &go_c[y * g.w_out..(y + 1) * g.w_out];
                        let irow = &mut gi_c[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let ix0 = x0 + kx - p;
                            axpy(wv, &grow[x0..x1], &mut irow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for x in x0..x1 {
                                irow[x * s + kx - p] += wv * grow[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64], grad_k: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    for co in 0..g.c_out {
        let go_c = &grad_out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let in_c = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (y0, y1) = g.y_range(ky);
                for kx in 0..k {
                    let (x0, x1) = g.x_range(kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * s + ky - p;
                        let grow = &go_c[y * g.w_out..(y + 1) * g.w_out];
                        let irow = &in_c[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let ix0 = x0 + kx - p;
                            acc += dot(&grow[x0..x1], &irow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for x in x0..x1 {
                                acc += grow[x] * irow[x * s + kx - p];
                            }
                        }
                    }
                    grad_k[((co * g.c_in + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

pub fn avg_pool_forward(c: usize, h: usize, w: usize, win: usize, input: &[f64], out: &mut [f64]) {
    let (ho, wo) = (h / win, w / win);
    let norm = 1.0 / (win * win) as f64;
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for dy in 0..win {
                    let row = ch * h * w + (y * win + dy) * w + x * win;
                    acc += input[row..row + win].iter().sum::<f64>();
                }
                out[ch * ho * wo + y * wo + x] = acc * norm;
            }
        }
    }
}

pub fn avg_pool_backward(c: usize, h: usize, w: usize, win: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    let (ho, wo) = (h / win, w / win);
    let norm = 1.0 / (win * win) as f64;
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let g = grad_out[ch * ho * wo + y * wo + x] * norm;
                for dy in 0..win {
                    let row = ch * h * w + (y * win + dy) * w + x * win;
                    grad_in[row..row + win].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
}

pub fn upsample_forward(c: usize, h: usize, w: usize, f: usize, input: &[f64], out: &mut [f64]) {
    let (ho, wo) = (h * f, w * f);
    for ch in 0..c {
        for y in 0..ho {
            let src = &input[ch * h * w + (y / f) * w..ch * h * w + (y / f + 1) * w];
            let dst = &mut out[ch * ho * wo + y * wo..ch * ho * wo + (y + 1) * wo];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / f];
            }
        }
    }
}

pub fn upsample_backward(c: usize, h: usize, w: usize, f: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    let (ho, wo) = (h * f, w * f);
    for ch in 0..c {
        for y in 0..ho {
            let src = &grad_out[ch * ho * wo + y * wo..ch * ho * wo + (y + 1) * wo];
            let dst = &mut grad_in[ch * h * w + (y / f) * w..ch * h * w + (y / f + 1) * w];
            for (x, g) in src.iter().enumerate() {
                dst[x / f] += g;
            }
        }
    }
}

/// `y[b, :] = W x[b, :] + bias` for `x: [batch, n]`, `W: [m, n]`.
pub fn linear_forward(batch: usize, n: usize, m: usize, x: &[f64], wt: &[f64], bias: Option<&[f64]>, y: &mut [f64]) {
    if batch == 1 {
        for j in 0..m {
            y[j] = dot(&wt[j * n..(j + 1) * n], x) + bias.map_or(0.0, |b| b[j]);
        }
        return;
    }
    // Transposed weights turn the inner loop into a contiguous axpy over m.
    let mut w_t = vec![0.0; n * m];
    for j in 0..m {
        for i in 0..n {
            w_t[i * m + j] = wt[j * n + i];
        }
    }
    for b in 0..batch {
        let yrow = &mut y[b * m..(b + 1) * m];
        match bias {
            Some(bv) => yrow.copy_from_slice(bv),
            None => yrow.iter_mut().for_each(|v| *v = 0.0),
        }
        let xrow = &x[b * n..(b + 1) * n];
        for i in 0..n {
            let xv = xrow[i];
            if xv != 0.0 {
                axpy(xv, &w_t[i * m..(i + 1) * m], yrow);
            }
        }
    }
}

pub fn linear_backward_input(batch: usize, n: usize, m: usize, gy: &[f64], w: &[f64], gx: &mut [f64]) {
    for b in 0..batch {
        let gxrow = &mut gx[b * n..(b + 1) * n];
        for j in 0..m {
            let g = gy[b * m + j];
            if g != 0.0 {
                axpy(g, &w[j * n..(j + 1) * n], gxrow);
            }
        }
    }
}

pub fn linear_backward_weight(batch: usize, n: usize, m: usize, gy: &[f64], x: &[f64], gw: &mut [f64]) {
    for b in 0..batch {
        let xrow = &x[b * n..(b + 1) * n];
        for j in 0..m {
            let g = gy[b * m + j];
            if g != 0.0 {
                axpy(g, xrow, &mut gw[j * n..(j + 1) * n]);
            }
        }
    }
}
