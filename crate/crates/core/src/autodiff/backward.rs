//! Reverse sweep: vector-Jacobian products for every primitive.

use super::ops::permute_data;
use super::{Node, Op, Var};
use crate::kernels::{self, MatRef, OutLayout};

type Grads = [Option<Vec<f64>>];

/// Gradient buffer for `v`, allocated on first use; `None` for constants.
fn slot<'a>(nodes: &[Node], grads: &'a mut Grads, v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn accumulate(nodes: &[Node], grads: &mut Grads, v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if let Some(dst) = slot(nodes, grads, v) {
        for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(i, gi);
        }
    }
}

pub(super) fn run(nodes: &[Node], grads: &mut Grads, root: usize) {
    for i in (0..=root).rev() {
        if !nodes[i].requires_grad || matches!(nodes[i].op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[i].take() else {
            continue;
        };
        step(nodes, grads, &nodes[i], &g);
        grads[i] = Some(g);
    }
}

fn step(nodes: &[Node], grads: &mut Grads, node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g, |_, gi| gi);
            accumulate(nodes, grads, *b, g, |_, gi| gi);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g, |_, gi| gi);
            accumulate(nodes, grads, *b, g, |_, gi| -gi);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, g, |i, gi| gi * vb[i]);
            accumulate(nodes, grads, *b, g, |i, gi| gi * va[i]);
        }
        Op::Scale(x, f) => accumulate(nodes, grads, *x, g, |_, gi| gi * f),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, g, |_, gi| gi),
        Op::Gelu(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, g, |i, gi| gi * kernels::gelu_grad(vx[i]));
        }
        Op::Relu(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, g, |i, gi| if vx[i] > 0.0 { gi } else { 0.0 });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, g, |i, gi| gi * y[i] * (1.0 - y[i]));
        }
        Op::Log(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, g, |i, gi| gi / vx[i]);
        }
        Op::LogSigmoid(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, g, |i, gi| gi * kernels::sigmoid(-vx[i]));
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, &vec![g[0]; nodes[x.0].value.numel()], |_, gi| gi),
        Op::MatMul { a, b, ta, tb } => matmul_backward(nodes, grads, node, g, *a, *b, *ta, *tb),
        Op::Linear { x, w, b } => {
            let wd = nodes[w.0].value.dims();
            let (k, n) = (wd[0], wd[1]);
            let m = g.len() / n;
            let gm = MatRef::row_major(g, m, n);
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::gemm(gm, MatRef::row_major(val(*w), k, n).t(), gx, OutLayout::row_major(m, k), 1.0, 1.0);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                kernels::gemm(MatRef::row_major(val(*x), m, k).t(), gm, gw, OutLayout::row_major(k, n), 1.0, 1.0);
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let out_ch = nodes[w.0].value.dims()[0];
            let kdim = geom.col_rows();
            let plane = geom.out_h() * geom.out_w();
            let batch = g.len() / (out_ch * plane);
            let in_stride = geom.in_ch * geom.h * geom.w;
            let xv = val(*x);
            let wv = val(*w);
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (idx, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[idx % out_ch] += chunk.iter().sum::<f64>();
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                for s in 0..batch {
                    let col = if geom.is_pointwise() {
                        &xv[s * in_stride..(s + 1) * in_stride]
                    } else {
                        &cols[s * kdim * plane..(s + 1) * kdim * plane]
                    };
                    kernels::gemm(
                        MatRef::row_major(&g[s * out_ch * plane..(s + 1) * out_ch * plane], out_ch, plane),
                        MatRef::row_major(col, kdim, plane).t(),
                        gw,
                        OutLayout::row_major(out_ch, kdim),
                        1.0,
                        1.0,
                    );
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kdim * plane] };
                for s in 0..batch {
                    let gs = MatRef::row_major(&g[s * out_ch * plane..(s + 1) * out_ch * plane], out_ch, plane);
                    let wt = MatRef::row_major(wv, out_ch, kdim).t();
                    let gxs = &mut gx[s * in_stride..(s + 1) * in_stride];
                    if geom.is_pointwise() {
                        kernels::gemm(wt, gs, gxs, OutLayout::row_major(kdim, plane), 1.0, 1.0);
                    } else {
                        kernels::gemm(wt, gs, &mut dcols, OutLayout::row_major(kdim, plane), 1.0, 0.0);
                        geom.col2im(&dcols, gxs);
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let xd = nodes[x.0].value.dims();
            let (batch, ch) = (xd[0], xd[1]);
            let spatial: usize = xd[2..].iter().product();
            let count = (batch * spatial) as f64;
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for s in 0..batch {
                for c in 0..ch {
                    let base = (s * ch + c) * spatial;
                    for i in base..base + spatial {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            let gv = val(*gamma);
            if let Some(gx) = slot(nodes, grads, *x) {
                for s in 0..batch {
                    for c in 0..ch {
                        let base = (s * ch + c) * spatial;
                        let k = gv[c] * inv_std[c];
                        for i in base..base + spatial {
                            gx[i] += if *batch_stats {
                                k * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = nodes[gamma.0].value.numel();
            let gv = val(*gamma);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &is) in inv_std.iter().enumerate() {
                    let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let (mean_dh, mean_dh_h) = (sum_dh / d as f64, sum_dh_h / d as f64);
                    for j in 0..d {
                        gx[r * d + j] += is * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks_exact(d) {
                    gb.iter_mut().zip(gr).for_each(|(dst, v)| *dst += v);
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let width = *node.value.dims().last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((gr, yr), dst) in g.chunks_exact(width).zip(y.chunks_exact(width)).zip(gx.chunks_exact_mut(width)) {
                    // y_j * (g_j * sum(y) - <g, y>): exact zero for a constant upstream gradient.
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let total: f64 = yr.iter().sum();
                    for j in 0..width {
                        dst[j] += yr[j] * (gr[j] * total - dot);
                    }
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let xd = nodes[x.0].value.dims();
            let plane = xd[2] * xd[3];
            accumulate(nodes, grads, *x, &vec![0.0; plane * g.len()], |i, _| g[i / plane] / plane as f64);
        }
        Op::AvgPool2d { x, k } => {
            let xd = nodes[x.0].value.dims();
            let (h, w) = (xd[2], xd[3]);
            let (oh, ow) = (h / k, w / k);
            let norm = 1.0 / (k * k) as f64;
            if let Some(gx) = slot(nodes, grads, *x) {
                for (p, dst) in gx.chunks_exact_mut(h * w).enumerate() {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] += src[(y / k) * ow + xx / k] * norm;
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&src, &d) in argmax.iter().zip(g) {
                    gx[src] += d;
                }
            }
        }
        Op::Resize { x, plan } => {
            let xd = nodes[x.0].value.dims();
            let in_plane = xd[xd.len() - 2] * xd[xd.len() - 1];
            let od = node.value.dims();
            let out_plane = od[od.len() - 2] * od[od.len() - 1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (dst, src) in gx.chunks_exact_mut(in_plane).zip(g.chunks_exact(out_plane)) {
                    plan.backward(src, dst);
                }
            }
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let back = permute_data(g, node.value.dims(), &inverse);
            accumulate(nodes, grads, *x, &back, |_, gi| gi);
        }
        Op::Concat { inputs, axis } => {
            let od = node.value.dims();
            let inner: usize = od[axis + 1..].iter().product();
            let outer: usize = od[..*axis].iter().product();
            let total = od[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.dims()[*axis] * inner;
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        gv[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xd = nodes[x.0].value.dims();
            let inner: usize = xd[axis + 1..].iter().product();
            let outer: usize = xd[..*axis].iter().product();
            let full = xd[*axis] * inner;
            let kept = node.value.dims()[*axis] * inner;
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[o * full + start * inner..o * full + start * inner + kept];
                    dst.iter_mut().zip(&g[o * kept..(o + 1) * kept]).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::MeanAxis { x, axis } => {
            let xd = nodes[x.0].value.dims();
            let inner: usize = xd[axis + 1..].iter().product();
            let len = xd[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (i, d) in gx.iter_mut().enumerate() {
                    let o = i / (len * inner);
                    *d += g[o * inner + i % inner] / len as f64;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(nodes: &[Node], grads: &mut Grads, node: &Node, g: &[f64], a: Var, b: Var, ta: bool, tb: bool) {
    let ad = nodes[a.0].value.dims().to_vec();
    let bd = nodes[b.0].value.dims().to_vec();
    let od = node.value.dims();
    let batch = if od.len() == 3 { od[0] } else { 1 };
    let (m, n) = (od[od.len() - 2], od[od.len() - 1]);
    let (ar, ac) = (ad[ad.len() - 2], ad[ad.len() - 1]);
    let (br, bc) = (bd[bd.len() - 2], bd[bd.len() - 1]);
    let (sa, sb, so) = (ar * ac, br * bc, m * n);
    fn view(data: &[f64], r: usize, c: usize, t: bool) -> MatRef<'_> {
        let v = MatRef::row_major(data, r, c);
        if t {
            v.t()
        } else {
            v
        }
    }
    let layout = |r: usize, c: usize, t: bool| {
        let l = OutLayout::row_major(r, c);
        if t {
            l.t()
        } else {
            l
        }
    };
    if nodes[a.0].requires_grad {
        let bv = nodes[b.0].value.data();
        let ga = slot(nodes, grads, a).unwrap();
        for i in 0..batch {
            let gi = MatRef::row_major(&g[i * so..(i + 1) * so], m, n);
            let b_eff = view(&bv[i * sb..(i + 1) * sb], br, bc, tb);
            kernels::gemm(gi, b_eff.t(), &mut ga[i * sa..(i + 1) * sa], layout(ar, ac, ta), 1.0, 1.0);
        }
    }
    if nodes[b.0].requires_grad {
        let av = nodes[a.0].value.data();
        let gb = slot(nodes, grads, b).unwrap();
        for i in 0..batch {
            let gi = MatRef::row_major(&g[i * so..(i + 1) * so], m, n);
            let a_eff = view(&av[i * sa..(i + 1) * sa], ar, ac, ta);
            kernels::gemm(a_eff.t(), gi, &mut gb[i * sb..(i + 1) * sb], layout(br, bc, tb), 1.0, 1.0);
        }
    }
}
