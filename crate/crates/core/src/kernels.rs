//! Slice-level numeric kernels shared by the autodiff graph and the
//! gradient-free CAM pipeline.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize + 1
    }
}

/// Layout of a strided output matrix.
#[derive(Clone, Copy)]
pub(crate) struct OutLayout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl OutLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(a: MatRef, b: MatRef, c: &mut [f64], out: OutLayout, alpha: f64, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!((a.rows, b.cols), (out.rows, out.cols), "gemm output extent");
    assert!(a.rs >= 0 && a.cs >= 0 && b.rs >= 0 && b.cs >= 0 && out.rs >= 0 && out.cs >= 0);
    if out.rows == 0 || out.cols == 0 {
        return;
    }
    let out_span = (out.rows - 1) * out.rs as usize + (out.cols - 1) * out.cs as usize + 1;
    assert!(c.len() >= out_span, "gemm output buffer too small");
    if a.cols == 0 {
        for i in 0..out.rows {
            for j in 0..out.cols {
                let idx = i * out.rs as usize + j * out.cs as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.data.len() >= a.span() && b.data.len() >= b.span(), "gemm input view out of range");
    // SAFETY: every index touched by dgemm lies within the spans checked above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            out.rs,
            out.cs,
        );
    }
}

/// Geometry of a 2-D convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate hit by output position `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }

    /// Unfolds `x` (`in_ch × h × w`) into `cols` (`col_rows × out_h*out_w`).
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let plane = oh * ow;
        for c in 0..self.in_ch {
            let xc = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let Some(iy) = self.src(oy, ki, self.h) else {
                            dst[oy * ow..(oy + 1) * ow].fill(0.0);
                            continue;
                        };
                        for ox in 0..ow {
                            dst[oy * ow + ox] = match self.src(ox, kj, self.w) {
                                Some(ix) => xc[iy * self.w + ix],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `cols` into `dx`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let plane = oh * ow;
        for c in 0..self.in_ch {
            let dxc = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let Some(iy) = self.src(oy, ki, self.h) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                dxc[iy * self.w + ix] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Linear interpolation taps along one axis, half-pixel centres.
#[derive(Clone, Debug)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut taps = Self {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
        }
        taps
    }
}

/// Precomputed bilinear resampling between two plane sizes.
#[derive(Clone, Debug)]
pub(crate) struct BilinearPlan {
    in_w: usize,
    out_w: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl BilinearPlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_w,
            out_w,
            rows: AxisTaps::new(in_h, out_h),
            cols: AxisTaps::new(in_w, out_w),
        }
    }

    pub fn forward(&self, src: &[f64], dst: &mut [f64]) {
        let iw = self.in_w;
        for (oy, ((&y0, &y1), &fy)) in self
            .rows
            .lo
            .iter()
            .zip(&self.rows.hi)
            .zip(&self.rows.frac)
            .enumerate()
        {
            for (ox, ((&x0, &x1), &fx)) in self
                .cols
                .lo
                .iter()
                .zip(&self.cols.hi)
                .zip(&self.cols.frac)
                .enumerate()
            {
                let top = (1.0 - fx) * src[y0 * iw + x0] + fx * src[y0 * iw + x1];
                let bottom = (1.0 - fx) * src[y1 * iw + x0] + fx * src[y1 * iw + x1];
                dst[oy * self.out_w + ox] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }

    /// Accumulates the adjoint of [`forward`](Self::forward) into `dsrc`.
    pub fn backward(&self, ddst: &[f64], dsrc: &mut [f64]) {
        let iw = self.in_w;
        for (oy, ((&y0, &y1), &fy)) in self
            .rows
            .lo
            .iter()
            .zip(&self.rows.hi)
            .zip(&self.rows.frac)
            .enumerate()
        {
            for (ox, ((&x0, &x1), &fx)) in self
                .cols
                .lo
                .iter()
                .zip(&self.cols.hi)
                .zip(&self.cols.frac)
                .enumerate()
            {
                let g = ddst[oy * self.out_w + ox];
                let (gt, gb) = ((1.0 - fy) * g, fy * g);
                dsrc[y0 * iw + x0] += (1.0 - fx) * gt;
                dsrc[y0 * iw + x1] += fx * gt;
                dsrc[y1 * iw + x0] += (1.0 - fx) * gb;
                dsrc[y1 * iw + x1] += fx * gb;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow.
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax over contiguous rows of length `width`, max-shifted.
pub(crate) fn softmax_rows(x: &[f64], width: usize, out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        let inv = 1.0 / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}
