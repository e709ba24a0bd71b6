use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ConformerConfig;
use super::layers::{conv_block, fcu_down, fcu_up, stem, transformer_block, Bindings, Ctx, Mode};
use super::params::{trunc_normal, Initializer, ParamStore, INIT_STD};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Head-averaged attention of every transformer block, shallow first.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    /// One `(1 + N) × (1 + N)` matrix per block; row 0 is the class token.
    pub per_block: Vec<Tensor>,
}

impl AttentionStack {
    pub fn len(&self) -> usize {
        self.per_block.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_block.is_empty()
    }

    /// Sequence length `1 + N`.
    pub fn seq_len(&self) -> usize {
        self.per_block.first().map_or(0, |a| a.dims()[0])
    }
}

/// Per-image network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Final CNN feature map `[f_c, grid, grid]`.
    pub features: Tensor,
    pub attn: AttentionStack,
    pub z_conv: Tensor,
    pub z_trans: Tensor,
}

/// Batched outputs still attached to the graph that produced them.
#[derive(Debug)]
pub struct GraphOutput {
    /// `[batch, f_c, grid, grid]`.
    pub features: Var,
    /// Per block, `[batch, 1 + N, 1 + N]`.
    pub attn: Vec<Var>,
    /// `[batch, C - 1]`.
    pub z_conv: Var,
    pub z_trans: Var,
    pub bindings: Bindings,
}

/// Mini dual-branch network: trainable parameters plus batch-norm running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformer {
    config: ConformerConfig,
    params: ParamStore,
    buffers: ParamStore,
}

fn init_stores(config: &ConformerConfig, seed: u64) -> (ParamStore, ParamStore) {
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer {
        params: &mut params,
        buffers: &mut buffers,
        rng: &mut rng,
    };
    let d = config.embed_dim;
    let c0 = config.stem_channels;
    init.conv("stem.conv", c0, 3, 3, false);
    init.batch_norm("stem.bn", c0);
    init.conv("patch_embed", d, c0, 1, true);
    let mut in_ch = c0;
    for (i, &out_ch) in config.stage_channels.iter().enumerate() {
        let p = format!("blocks.{i}.conv");
        let mid = config.bottleneck_width(i);
        init.conv(&format!("{p}.reduce"), mid, in_ch, 1, false);
        init.batch_norm(&format!("{p}.reduce_bn"), mid);
        init.conv(&format!("{p}.spatial"), mid, mid, 3, false);
        init.batch_norm(&format!("{p}.spatial_bn"), mid);
        init.conv(&format!("{p}.expand"), out_ch, mid, 1, false);
        init.batch_norm(&format!("{p}.expand_bn"), out_ch);
        if in_ch != out_ch || i + 1 == config.downsample_block() {
            init.conv(&format!("{p}.shortcut"), out_ch, in_ch, 1, false);
            init.batch_norm(&format!("{p}.shortcut_bn"), out_ch);
        }
        let t = format!("blocks.{i}.trans");
        init.layer_norm(&format!("{t}.norm1"), d);
        init.linear(&format!("{t}.attn.qkv"), d, 3 * d);
        init.linear(&format!("{t}.attn.proj"), d, d);
        init.layer_norm(&format!("{t}.norm2"), d);
        init.linear(&format!("{t}.mlp.fc1"), d, config.mlp_ratio * d);
        init.linear(&format!("{t}.mlp.fc2"), config.mlp_ratio * d, d);
        init.conv(&format!("blocks.{i}.fcu_down.proj"), d, out_ch, 1, true);
        init.layer_norm(&format!("blocks.{i}.fcu_down.norm"), d);
        if i > 0 {
            let prev = config.stage_channels[i - 1];
            init.linear_no_bias(&format!("blocks.{i}.fcu_up.proj"), d, prev);
            init.batch_norm(&format!("blocks.{i}.fcu_up.bn"), prev);
        }
        in_ch = out_ch;
    }
    init.params.insert("cls_token", trunc_normal(&[1, d], INIT_STD, init.rng));
    init.conv("conv_head", config.num_fg_classes, in_ch, 1, false);
    init.layer_norm("trans_norm", d);
    init.linear("trans_head", d, config.num_fg_classes);
    (params, buffers)
}

impl Conformer {
    /// Freshly initialized network; identical seeds give identical weights.
    pub fn new(config: ConformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, buffers) = init_stores(&config, seed);
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    /// Reassembles a network from stored tensors, which must have exactly
    /// the names and extents `config` implies.
    pub fn from_parts(config: ConformerConfig, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        config.validate()?;
        let (p, b) = init_stores(&config, 0);
        if !p.same_layout(&params) || !b.same_layout(&buffers) {
            return Err(Error::Config("stored tensors do not match the network configuration".into()));
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Classifier weights of the CNN head as `[C - 1, f_c]`.
    pub fn cam_weights(&self) -> Result<Tensor> {
        let w = self.params.get("conv_head.weight")?;
        w.clone().reshape(&w.dims()[..2])
    }

    /// Records the forward pass of `images: [batch, 3, H, W]` into `g`.
    pub fn forward_graph(&self, g: &mut Graph, images: Var, mode: Mode, trainable: bool) -> Result<GraphOutput> {
        let cfg = &self.config;
        let (batch, side) = match *g.dims(images) {
            [b, 3, h, w] if h == w => (b, h),
            ref d => return Err(Error::shape("conformer", format!("expected [batch, 3, H, H], got {d:?}"))),
        };
        let grid = cfg.grid_for(side)?;
        let n = grid * grid;
        let d = cfg.embed_dim;
        let mut ctx = Ctx::new(g, &self.params, &self.buffers, mode, trainable);

        let (local, patch_tokens) = stem(&mut ctx, images, cfg.patch_size())?;
        let cls = ctx.param("cls_token")?;
        let ones = ctx.g.constant(Tensor::ones(&[batch, 1]));
        let cls = ctx.g.matmul(ones, cls)?;
        let mut cls = ctx.g.reshape(cls, &[batch, 1, d])?;

        let mut attn = Vec::with_capacity(cfg.num_blocks);
        let mut f_prev = local;
        let mut tokens = patch_tokens;
        for i in 0..cfg.num_blocks {
            let cnn_in = if i == 0 {
                local
            } else {
                let out = ctx.g.dims(f_prev)[2];
                let up = fcu_up(&mut ctx, &format!("blocks.{i}.fcu_up"), tokens, grid, out)?;
                ctx.g.add(f_prev, up)?
            };
            let stride = if i + 1 == cfg.downsample_block() { 2 } else { 1 };
            let f = conv_block(&mut ctx, &format!("blocks.{i}.conv"), cnn_in, stride)?;
            let down = fcu_down(&mut ctx, &format!("blocks.{i}.fcu_down"), f, grid)?;
            let tok_in = ctx.g.add(tokens, down)?;
            let seq = ctx.g.concat(&[cls, tok_in], 1)?;
            let (seq, a) = transformer_block(&mut ctx, &format!("blocks.{i}.trans"), seq, cfg.num_heads)?;
            cls = ctx.g.slice(seq, 1, 0, 1)?;
            tokens = ctx.g.slice(seq, 1, 1, 1 + n)?;
            attn.push(a);
            f_prev = f;
        }
        if ctx.g.dims(f_prev)[2] != grid {
            return Err(Error::shape(
                "conformer",
                format!("final feature map {:?} is not {grid}x{grid}", ctx.g.dims(f_prev)),
            ));
        }

        let cam = ctx.conv("conv_head", f_prev, 1, 0)?;
        let z_conv = ctx.g.global_avg_pool(cam)?;
        let cls = ctx.g.reshape(cls, &[batch, d])?;
        let cls = ctx.layer_norm("trans_norm", cls)?;
        let z_trans = ctx.linear("trans_head", cls)?;
        Ok(GraphOutput {
            features: f_prev,
            attn,
            z_conv,
            z_trans,
            bindings: ctx.finish(),
        })
    }

    /// Inference on `images: [batch, 3, H, W]`, split per image.
    pub fn forward_batch(&self, images: &Tensor) -> Result<Vec<ForwardOutput>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward_graph(&mut g, x, Mode::Eval, false)?;
        let batch = images.dims()[0];
        let split = |v: Var| -> Vec<Tensor> {
            let t = g.value(v);
            let inner = &t.dims()[1..];
            t.data()
                .chunks_exact(t.numel() / batch)
                .map(|c| Tensor::new(inner, c.to_vec()).expect("split extent"))
                .collect()
        };
        let features = split(out.features);
        let z_conv = split(out.z_conv);
        let z_trans = split(out.z_trans);
        let attn: Vec<Vec<Tensor>> = out.attn.iter().map(|&a| split(a)).collect();
        Ok((0..batch)
            .map(|i| ForwardOutput {
                features: features[i].clone(),
                attn: AttentionStack {
                    per_block: attn.iter().map(|blk| blk[i].clone()).collect(),
                },
                z_conv: z_conv[i].clone(),
                z_trans: z_trans[i].clone(),
            })
            .collect())
    }

    /// Inference on a single `[3, H, W]` image.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let mut dims = vec![1];
        dims.extend_from_slice(image.dims());
        let batch = image.clone().reshape(&dims)?;
        Ok(self.forward_batch(&batch)?.remove(0))
    }

    /// Exponential moving update of the running statistics, storing the
    /// unbiased variance.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (name, s) in stats {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let mean = self.buffers.get_mut(&format!("{name}.running_mean"))?;
            for (r, m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let var = self.buffers.get_mut(&format!("{name}.running_var"))?;
            for (r, v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
        Ok(())
    }
}

/// `w_conv · z_conv + w_trans · z_trans`.
pub fn combine_logits(z_conv: &Tensor, z_trans: &Tensor, w_conv: f64, w_trans: f64) -> Result<Tensor> {
    if z_conv.dims() != z_trans.dims() {
        return Err(Error::shape(
            "combine_logits",
            format!("{:?} vs {:?}", z_conv.dims(), z_trans.dims()),
        ));
    }
    z_conv.zip_map(z_trans, |a, b| w_conv * a + w_trans * b)
}

/// Graph form of [`combine_logits`].
pub fn combine_logits_graph(g: &mut Graph, z_conv: Var, z_trans: Var, w_conv: f64, w_trans: f64) -> Result<Var> {
    let a = g.scale(z_conv, w_conv)?;
    let b = g.scale(z_trans, w_trans)?;
    g.add(a, b)
}
