//! Building blocks of the dual-branch network.
//!
//! Every layer reads its weights by name from a [`Ctx`], which binds each
//! stored tensor into the graph the first time it is used. Feature maps are
//! `[batch, channels, h, w]`; token sequences are `[batch, tokens, width]`.

use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics and reports them.
    Train,
    /// Batch norm uses the stored running statistics.
    Eval,
}

/// Graph handles of the parameters a forward pass touched, plus the batch
/// statistics of every training-mode batch norm.
#[derive(Debug, Default)]
pub struct Bindings {
    pub params: BTreeMap<String, Var>,
    pub bn_stats: Vec<(String, BatchStats)>,
}

pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamStore,
    buffers: &'a ParamStore,
    mode: Mode,
    trainable: bool,
    bound: Bindings,
}

impl<'a> Ctx<'a> {
    /// `trainable` binds parameters as gradient-carrying leaves.
    pub fn new(g: &'a mut Graph, params: &'a ParamStore, buffers: &'a ParamStore, mode: Mode, trainable: bool) -> Self {
        Self {
            g,
            params,
            buffers,
            mode,
            trainable,
            bound: Bindings::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn finish(self) -> Bindings {
        self.bound
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.params.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = if self.trainable {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.bound.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn optional(&mut self, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.optional(&format!("{name}.bias"))?;
        self.g.conv2d(x, w, b, stride, pad)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.optional(&format!("{name}.bias"))?;
        self.g.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.bound.bn_stats.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{name}.running_mean"))?;
                let var = self.buffers.get(&format!("{name}.running_var"))?;
                self.g.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }
}

fn spatial(g: &Graph, op: &'static str, f: Var) -> Result<(usize, usize, usize, usize)> {
    match *g.dims(f) {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref d => Err(Error::shape(op, format!("expected [batch, ch, h, w], got {d:?}"))),
    }
}

/// `[batch, width, g, g]` map to `[batch, g*g, width]` tokens in row-major order.
pub fn map_to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let (b, c, h, w) = spatial(g, "map_to_tokens", x)?;
    let flat = g.reshape(x, &[b, c, h * w])?;
    g.permute(flat, &[0, 2, 1])
}

/// Inverse of [`map_to_tokens`] for a `side × side` grid.
pub fn tokens_to_map(g: &mut Graph, x: Var, side: usize) -> Result<Var> {
    let (b, c) = match *g.dims(x) {
        [b, n, c] if n == side * side => (b, c),
        ref d => return Err(Error::shape("tokens_to_map", format!("{d:?} for a {side}x{side} grid"))),
    };
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[b, c, side, side])
}

/// Stem: 3×3 conv + batch norm + GELU at full resolution, max-pooled to
/// twice the token grid. Patch tokens are a 1×1 projection of that map
/// average-pooled once more to the grid.
///
/// `image` is `[batch, 3, H, W]` with `H = W = patch * grid`.
pub fn stem(ctx: &mut Ctx, image: Var, patch: usize) -> Result<(Var, Var)> {
    let (_, c, h, w) = spatial(ctx.g, "stem", image)?;
    if c != 3 || h != w || patch < 2 || patch % 2 != 0 || h % patch != 0 {
        return Err(Error::shape(
            "stem",
            format!("image {:?} with patch size {patch}", ctx.g.dims(image)),
        ));
    }
    let x = ctx.conv("stem.conv", image, 1, 1)?;
    let x = ctx.batch_norm("stem.bn", x)?;
    let x = ctx.g.gelu(x)?;
    let local = ctx.g.max_pool2d(x, patch / 2)?;
    let pooled = ctx.g.avg_pool2d(local, 2)?;
    let emb = ctx.conv("patch_embed", pooled, 1, 0)?;
    let tokens = map_to_tokens(ctx.g, emb)?;
    Ok((local, tokens))
}

/// Bottleneck residual block: 1×1 reduce, 3×3 spatial (carrying `stride`),
/// 1×1 expand, each followed by batch norm, GELU on the first two. The
/// shortcut is the identity unless `{prefix}.shortcut.weight` exists.
pub fn conv_block(ctx: &mut Ctx, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let (_, c, _, _) = spatial(ctx.g, "conv_block", x)?;
    let w_in = ctx.param(&format!("{prefix}.reduce.weight"))?;
    if ctx.g.dims(w_in)[1] != c {
        return Err(Error::shape(
            "conv_block",
            format!("{c} input channels, block expects {}", ctx.g.dims(w_in)[1]),
        ));
    }
    let y = ctx.conv(&format!("{prefix}.reduce"), x, 1, 0)?;
    let y = ctx.batch_norm(&format!("{prefix}.reduce_bn"), y)?;
    let y = ctx.g.gelu(y)?;
    let y = ctx.conv(&format!("{prefix}.spatial"), y, stride, 1)?;
    let y = ctx.batch_norm(&format!("{prefix}.spatial_bn"), y)?;
    let y = ctx.g.gelu(y)?;
    let y = ctx.conv(&format!("{prefix}.expand"), y, 1, 0)?;
    let y = ctx.batch_norm(&format!("{prefix}.expand_bn"), y)?;
    let shortcut = if ctx.has(&format!("{prefix}.shortcut.weight")) {
        let s = ctx.conv(&format!("{prefix}.shortcut"), x, stride, 0)?;
        ctx.batch_norm(&format!("{prefix}.shortcut_bn"), s)?
    } else {
        if stride != 1 {
            return Err(Error::Config(format!("{prefix}: strided block needs a projection shortcut")));
        }
        x
    };
    if ctx.g.dims(shortcut) != ctx.g.dims(y) {
        return Err(Error::shape(
            "conv_block",
            format!("residual {:?} vs branch {:?}", ctx.g.dims(shortcut), ctx.g.dims(y)),
        ));
    }
    ctx.g.add(y, shortcut)
}

/// Pre-norm transformer block over `[batch, 1 + N, D]`.
///
/// Returns the updated sequence and the head-averaged attention
/// `[batch, 1 + N, 1 + N]`.
pub fn transformer_block(ctx: &mut Ctx, prefix: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let (b, t, d) = match *ctx.g.dims(x) {
        [b, t, d] => (b, t, d),
        ref dims => return Err(Error::shape("transformer_block", format!("expected [batch, tokens, width], got {dims:?}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let h = ctx.layer_norm(&format!("{prefix}.norm1"), x)?;
    let qkv = ctx.linear(&format!("{prefix}.attn.qkv"), h)?;
    let qkv = ctx.g.reshape(qkv, &[b, t, 3, heads, dh])?;
    let qkv = ctx.g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let p = ctx.g.slice(qkv, 0, i, i + 1)?;
        parts.push(ctx.g.reshape(p, &[b * heads, t, dh])?);
    }
    let scores = ctx.g.matmul_t(parts[0], parts[1], false, true)?;
    let scores = ctx.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = ctx.g.softmax(scores)?;
    let ctxv = ctx.g.matmul(attn, parts[2])?;
    let ctxv = ctx.g.reshape(ctxv, &[b, heads, t, dh])?;
    let ctxv = ctx.g.permute(ctxv, &[0, 2, 1, 3])?;
    let ctxv = ctx.g.reshape(ctxv, &[b, t, d])?;
    let out = ctx.linear(&format!("{prefix}.attn.proj"), ctxv)?;
    let x = ctx.g.add(x, out)?;

    let h = ctx.layer_norm(&format!("{prefix}.norm2"), x)?;
    let h = ctx.linear(&format!("{prefix}.mlp.fc1"), h)?;
    let h = ctx.g.gelu(h)?;
    let h = ctx.linear(&format!("{prefix}.mlp.fc2"), h)?;
    let x = ctx.g.add(x, h)?;

    let per_head = ctx.g.reshape(attn, &[b, heads, t, t])?;
    let mean = ctx.g.mean_axis(per_head, 1)?;
    Ok((x, mean))
}

/// CNN map to tokens: 1×1 projection, average pooling to `grid × grid`,
/// layer normalization. Output `[batch, grid², D]`.
pub fn fcu_down(ctx: &mut Ctx, prefix: &str, f: Var, grid: usize) -> Result<Var> {
    let (_, _, h, w) = spatial(ctx.g, "fcu_down", f)?;
    if h != w || h % grid != 0 {
        return Err(Error::shape("fcu_down", format!("{h}x{w} map cannot pool to a {grid}x{grid} grid")));
    }
    let y = ctx.conv(&format!("{prefix}.proj"), f, 1, 0)?;
    let y = ctx.g.avg_pool2d(y, h / grid)?;
    let y = map_to_tokens(ctx.g, y)?;
    ctx.layer_norm(&format!("{prefix}.norm"), y)
}

/// Tokens to CNN map: per-token linear projection (no bias, the batch norm
/// absorbs it), bilinear resize from
/// `grid × grid` to `out × out`, batch norm, GELU.
pub fn fcu_up(ctx: &mut Ctx, prefix: &str, tokens: Var, grid: usize, out: usize) -> Result<Var> {
    let y = ctx.linear(&format!("{prefix}.proj"), tokens)?;
    let y = tokens_to_map(ctx.g, y, grid)?;
    let y = ctx.g.resize_bilinear(y, out, out)?;
    let y = ctx.batch_norm(&format!("{prefix}.bn"), y)?;
    ctx.g.gelu(y)
}
