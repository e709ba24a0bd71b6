//! Forward primitives.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, BilinearPlan, ConvGeom, MatRef, OutLayout};
use crate::tensor::{numel, Tensor};

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Splits `dims` around `axis` into `(outer, len, inner)`.
fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        dims[..axis].iter().product(),
        dims[axis],
        dims[axis + 1..].iter().product(),
    )
}

fn matrix_dims(dims: &[usize], transposed: bool) -> (usize, usize) {
    let (r, c) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

impl Graph {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.ensure_recording()?;
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        Ok(self.push(value, op, rg))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_dims(op, self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        self.same_dims("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        self.same_dims("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        self.same_dims("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::Config(format!("scale factor {factor}")));
        }
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Config(format!("scalar offset {c}")));
        }
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::LogSigmoid(x), kernels::log_sigmoid)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands with equal leading extent. `ta`/`tb` transpose the trailing
    /// two axes of the respective operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.ensure_recording()?;
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let batched = match (ad.len(), bd.len()) {
            (2, 2) => false,
            (3, 3) if ad[0] == bd[0] => true,
            _ => return Err(Error::shape("matmul", format!("{ad:?} x {bd:?}"))),
        };
        let (m, k) = matrix_dims(&ad, ta);
        let (k2, n) = matrix_dims(&bd, tb);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{ad:?} x {bd:?} (ta={ta}, tb={tb})")));
        }
        let batch = if batched { ad[0] } else { 1 };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        let (sa, sb) = (m * k, k * n);
        for i in 0..batch {
            let mut am = MatRef::row_major(&av[i * sa..(i + 1) * sa], ad[ad.len() - 2], ad[ad.len() - 1]);
            let mut bm = MatRef::row_major(&bv[i * sb..(i + 1) * sb], bd[bd.len() - 2], bd[bd.len() - 1]);
            if ta {
                am = am.t();
            }
            if tb {
                bm = bm.t();
            }
            kernels::gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], OutLayout::row_major(m, n), 1.0, 0.0);
        }
        let dims: Vec<usize> = if batched { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(&dims, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · w + b` over the last axis of `x`; `w` is `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.ensure_recording()?;
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let k = *xd.last().unwrap();
        if wd.len() != 2 || wd[0] != k {
            return Err(Error::shape("linear", format!("input {xd:?}, weight {wd:?}")));
        }
        let n = wd[1];
        if let Some(b) = b {
            if self.dims(b) != [n] {
                return Err(Error::shape("linear", format!("bias {:?}, expected [{n}]", self.dims(b))));
            }
        }
        let m = numel(&xd) / k;
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            out.chunks_exact_mut(n).for_each(|row| row.copy_from_slice(bias));
        }
        kernels::gemm(
            MatRef::row_major(self.value(x).data(), m, k),
            MatRef::row_major(self.value(w).data(), k, n),
            &mut out,
            OutLayout::row_major(m, n),
            1.0,
            1.0,
        );
        let mut dims = xd;
        *dims.last_mut().unwrap() = n;
        let value = Tensor::new(&dims, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution of `x: [batch, in, h, w]` with `w: [out, in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.ensure_recording()?;
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 4 || wd.len() != 4 || xd[1] != wd[1] {
            return Err(Error::shape("conv2d", format!("input {xd:?}, weight {wd:?}")));
        }
        let (batch, out_ch) = (xd[0], wd[0]);
        if xd[2] + 2 * pad < wd[2] || xd[3] + 2 * pad < wd[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {wd:?} larger than padded input {xd:?} (pad {pad})"),
            ));
        }
        if let Some(b) = b {
            if self.dims(b) != [out_ch] {
                return Err(Error::shape("conv2d", format!("bias {:?}, expected [{out_ch}]", self.dims(b))));
            }
        }
        let geom = ConvGeom {
            in_ch: xd[1],
            h: xd[2],
            w: xd[3],
            kh: wd[2],
            kw: wd[3],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let kdim = geom.col_rows();
        let in_stride = geom.in_ch * geom.h * geom.w;
        let pointwise = geom.is_pointwise();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; batch * kdim * plane] };
        let mut out = vec![0.0; batch * out_ch * plane];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for chunk in out.chunks_exact_mut(plane).enumerate() {
                chunk.1.fill(bias[chunk.0 % out_ch]);
            }
        }
        for s in 0..batch {
            let xs = &xv[s * in_stride..(s + 1) * in_stride];
            let col: &[f64] = if pointwise {
                xs
            } else {
                let c = &mut cols[s * kdim * plane..(s + 1) * kdim * plane];
                geom.im2col(xs, c);
                c
            };
            kernels::gemm(
                MatRef::row_major(wv, out_ch, kdim),
                MatRef::row_major(col, kdim, plane),
                &mut out[s * out_ch * plane..(s + 1) * out_ch * plane],
                OutLayout::row_major(out_ch, plane),
                1.0,
                1.0,
            );
        }
        let value = Tensor::new(&[batch, out_ch, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    fn check_channel_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xd = self.dims(x);
        if xd.len() < 2 {
            return Err(Error::shape(op, format!("input {xd:?} needs [batch, channel, ...]")));
        }
        let (batch, ch) = (xd[0], xd[1]);
        let spatial: usize = xd[2..].iter().product();
        if self.dims(gamma) != [ch] || self.dims(beta) != [ch] {
            return Err(Error::shape(
                op,
                format!("scale {:?} / shift {:?} for {ch} channels", self.dims(gamma), self.dims(beta)),
            ));
        }
        Ok((batch, ch, spatial))
    }

    /// Training-mode batch normalization using statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        self.ensure_recording()?;
        let (batch, ch, spatial) = self.check_channel_affine("batch_norm", x, gamma, beta)?;
        let count = batch * spatial;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for s in 0..batch {
            for c in 0..ch {
                let plane = &xv[(s * ch + c) * spatial..(s * ch + c + 1) * spatial];
                mean[c] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for s in 0..batch {
            for c in 0..ch {
                let plane = &xv[(s * ch + c) * spatial..(s * ch + c + 1) * spatial];
                var[c] += plane.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.channel_affine(x, gamma, beta, &mean, &inv_std, batch, ch, spatial, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.ensure_recording()?;
        let (batch, ch, spatial) = self.check_channel_affine("batch_norm", x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(Error::shape("batch_norm", format!("running stats for {} channels, need {ch}", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.channel_affine(x, gamma, beta, mean, &inv_std, batch, ch, spatial, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch: usize,
        ch: usize,
        spatial: usize,
        batch_stats: bool,
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..batch {
            for c in 0..ch {
                let base = (s * ch + c) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let value = Tensor::new(self.dims(x), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            rg,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.ensure_recording()?;
        let xd = self.dims(x).to_vec();
        let d = *xd.last().unwrap();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("input {xd:?}, scale {:?}", self.dims(gamma))));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor::new(&xd, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let xt = self.value(x);
        let width = *xt.dims().last().unwrap();
        let mut out = vec![0.0; xt.numel()];
        kernels::softmax_rows(xt.data(), width, &mut out);
        let value = Tensor::new(xt.dims(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Mean over the trailing spatial axes: `[batch, ch, h, w] -> [batch, ch]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xd:?}")));
        }
        let plane = xd[2] * xd[3];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&xd[..2], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Non-overlapping `k × k` average pooling; spatial extents must divide by `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.ensure_recording()?;
        if k == 0 {
            return Err(Error::Config("pool size must be >= 1".into()));
        }
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 || xd[2] % k != 0 || xd[3] % k != 0 {
            return Err(Error::shape("avg_pool2d", format!("input {xd:?} with window {k}")));
        }
        let (h, w) = (xd[2], xd[3]);
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let xv = self.value(x).data();
        let planes = xd[0] * xd[1];
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / k) * ow + x / k] += src[y * w + x] * norm;
                }
            }
        }
        let value = Tensor::new(&[xd[0], xd[1], oh, ow], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::AvgPool2d { x, k }, rg))
    }

    /// Non-overlapping `k × k` max pooling; ties go to the first element in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.ensure_recording()?;
        if k == 0 {
            return Err(Error::Config("pool size must be >= 1".into()));
        }
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 || xd[2] % k != 0 || xd[3] % k != 0 {
            return Err(Error::shape("max_pool2d", format!("input {xd:?} with window {k}")));
        }
        let (h, w) = (xd[2], xd[3]);
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let planes = xd[0] * xd[1];
        let mut out = vec![f64::NEG_INFINITY; planes * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    let src = p * h * w + y * w + xx;
                    let dst = p * oh * ow + (y / k) * ow + xx / k;
                    if xv[src] > out[dst] {
                        out[dst] = xv[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let value = Tensor::new(&[xd[0], xd[1], oh, ow], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Bilinear resize of the two trailing axes (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.ensure_recording()?;
        let value = self.value(x).resize_bilinear(out_h, out_w)?;
        let xd = self.dims(x);
        let plan = BilinearPlan::new(xd[xd.len() - 2], xd[xd.len() - 1], out_h, out_w);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Resize { x, plan }, rg))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.ensure_recording()?;
        let value = self.value(x).clone().reshape(dims)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.ensure_recording()?;
        let xd = self.dims(x).to_vec();
        let mut seen = vec![false; xd.len()];
        if axes.len() != xd.len() || axes.iter().any(|&a| a >= xd.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for dims {xd:?}")));
        }
        let out_dims: Vec<usize> = axes.iter().map(|&a| xd[a]).collect();
        let data = permute_data(self.value(x).data(), &xd, axes);
        let value = Tensor::new(&out_dims, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.ensure_recording()?;
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.dims(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for dims {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let d = self.dims(v);
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{d:?} vs {base:?} along axis {axis}")));
            }
            total += d[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.dims(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let value = Tensor::new(&dims, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.ensure_recording()?;
        let xd = self.dims(x).to_vec();
        if axis >= xd.len() || start >= end || end > xd[axis] {
            return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {xd:?}")));
        }
        let (outer, len, inner) = split_axis(&xd, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut dims = xd;
        dims[axis] = end - start;
        let value = Tensor::new(&dims, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Sum of all elements as a single-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    /// Mean over `axis`, which is removed from the result.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.ensure_recording()?;
        let xd = self.dims(x).to_vec();
        if axis >= xd.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} for dims {xd:?}")));
        }
        let (outer, len, inner) = split_axis(&xd, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut dims: Vec<usize> = xd.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if dims.is_empty() {
            dims.push(1);
        }
        let value = Tensor::new(&dims, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MeanAxis { x, axis }, rg))
    }
}

/// Row-major strides of `dims`.
pub(super) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Gathers `src` (row-major, extents `dims`) into permuted order.
pub(super) fn permute_data(src: &[f64], dims: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; dims.len()];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            offset -= gather[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    out
}
