use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{conv_block, fcu_down, fcu_up, stem, transformer_block, BN_EPS, LN_EPS};
use super::*;
use crate::autodiff::{relative_error, Graph, Var};
use crate::error::{Error, Result};
use crate::oracle::{self, naive_conv, naive_matmul, random};
use crate::tensor::Tensor;

fn tiny_config() -> ConformerConfig {
    ConformerConfig {
        num_blocks: 2,
        embed_dim: 8,
        num_heads: 2,
        grid: 2,
        stage_channels: vec![4, 8],
        stem_channels: 4,
        num_fg_classes: 2,
        image_size: 8,
        mlp_ratio: 2,
    }
}

/// Replaces every tensor with random values; variances stay positive.
fn randomize(model: &mut Conformer, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params_mut().iter_mut() {
        *t = random(t.dims(), &mut rng).scale(0.5);
    }
    for (name, t) in model.buffers_mut().iter_mut() {
        *t = if name.ends_with("running_var") {
            Tensor::from_fn(t.dims(), |_| rng.random_range(0.5..1.5))
        } else {
            random(t.dims(), &mut rng).scale(0.3)
        };
    }
}

/// Per-channel map over a `[1, c, h, w]` tensor.
fn per_channel(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let plane = x.dims()[2] * x.dims()[3];
    let data = x.data().iter().enumerate().map(|(i, &v)| f(i / plane, v)).collect();
    Tensor::new(x.dims(), data).unwrap()
}

fn bn_eval(x: &Tensor, p: &ParamStore, b: &ParamStore, name: &str) -> Tensor {
    let gamma = p.get(&format!("{name}.gamma")).unwrap().data();
    let beta = p.get(&format!("{name}.beta")).unwrap().data();
    let mean = b.get(&format!("{name}.running_mean")).unwrap().data();
    let var = b.get(&format!("{name}.running_var")).unwrap().data();
    per_channel(x, |c, v| (v - mean[c]) / (var[c] + BN_EPS).sqrt() * gamma[c] + beta[c])
}

fn add_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    per_channel(x, |c, v| v + bias.data()[c])
}

fn gelu(x: &Tensor) -> Tensor {
    x.map(oracle::gelu)
}

fn window_pool(x: &Tensor, k: usize, max: bool) -> Tensor {
    let (c, h, w) = (x.dims()[1], x.dims()[2], x.dims()[3]);
    Tensor::from_fn(&[1, c, h / k, w / k], |i| {
        let (ch, y, xx) = (i / ((h / k) * (w / k)), (i / (w / k)) % (h / k), i % (w / k));
        let mut window = Vec::with_capacity(k * k);
        for dy in 0..k {
            for dx in 0..k {
                window.push(x.at(&[0, ch, y * k + dy, xx * k + dx]));
            }
        }
        if max {
            window.into_iter().fold(f64::NEG_INFINITY, f64::max)
        } else {
            window.iter().sum::<f64>() / (k * k) as f64
        }
    })
}

fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    window_pool(x, k, false)
}

/// `[1, c, g, g]` to `[g*g, c]`.
fn map_to_rows(x: &Tensor) -> Tensor {
    let c = x.dims()[1];
    let n = x.dims()[2] * x.dims()[3];
    Tensor::from_fn(&[n, c], |i| x.data()[(i % c) * n + i / c])
}

fn add_row_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    let n = bias.numel();
    Tensor::from_fn(x.dims(), |i| x.data()[i] + bias.data()[i % n])
}

fn with_graph<T>(
    params: &ParamStore,
    buffers: &ParamStore,
    input: &Tensor,
    f: impl FnOnce(&mut Ctx, Var) -> Result<T>,
) -> (Graph, Result<T>) {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let out = {
        let mut ctx = Ctx::new(&mut g, params, buffers, Mode::Eval, false);
        f(&mut ctx, x)
    };
    (g, out)
}

#[test]
fn stem_matches_sliding_window_oracle() {
    let mut model = Conformer::new(ConformerConfig::default(), 1).unwrap();
    randomize(&mut model, 2);
    let img = random(&[1, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(3));
    let (g, out) = with_graph(model.params(), model.buffers(), &img, |ctx, x| stem(ctx, x, 8));
    let (local, tokens) = out.unwrap();
    assert_eq!(g.dims(tokens), [1, 16, 64]);

    let (p, b) = (model.params(), model.buffers());
    let x = naive_conv(&img, p.get("stem.conv.weight").unwrap(), 1, 1);
    let x = gelu(&bn_eval(&x, p, b, "stem.bn"));
    let expect_local = window_pool(&x, 4, true);
    let emb = naive_conv(&avg_pool(&expect_local, 2), p.get("patch_embed.weight").unwrap(), 1, 0);
    let emb = add_bias(&emb, p.get("patch_embed.bias").unwrap());
    let expect_tokens = map_to_rows(&emb).reshape(&[1, 16, 64]).unwrap();
    assert!(g.value(local).max_abs_diff(&expect_local) < 1e-9);
    assert!(g.value(tokens).max_abs_diff(&expect_tokens) < 1e-9);
}

#[test]
fn stem_of_black_image_gives_zero_tokens() {
    let model = Conformer::new(ConformerConfig::default(), 1).unwrap();
    let img = Tensor::zeros(&[1, 3, 32, 32]);
    let (g, out) = with_graph(model.params(), model.buffers(), &img, |ctx, x| stem(ctx, x, 8));
    let (_, tokens) = out.unwrap();
    assert!(g.value(tokens).data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_rejects_wrong_channel_count() {
    let model = Conformer::new(ConformerConfig::default(), 1).unwrap();
    let img = Tensor::zeros(&[1, 4, 32, 32]);
    let (_, out) = with_graph(model.params(), model.buffers(), &img, |ctx, x| stem(ctx, x, 8));
    assert!(matches!(out, Err(Error::Shape { .. })));
}

fn conv_block_oracle(x: &Tensor, p: &ParamStore, b: &ParamStore, prefix: &str, stride: usize) -> Tensor {
    let w = |n: &str| p.get(&format!("{prefix}.{n}.weight")).unwrap();
    let bn = |t: &Tensor, n: &str| bn_eval(t, p, b, &format!("{prefix}.{n}"));
    let y = gelu(&bn(&naive_conv(x, w("reduce"), 1, 0), "reduce_bn"));
    let y = gelu(&bn(&naive_conv(&y, w("spatial"), stride, 1), "spatial_bn"));
    let y = bn(&naive_conv(&y, w("expand"), 1, 0), "expand_bn");
    let s = if p.contains(&format!("{prefix}.shortcut.weight")) {
        bn(&naive_conv(x, w("shortcut"), stride, 0), "shortcut_bn")
    } else {
        x.clone()
    };
    y.zip_map(&s, |a, b| a + b).unwrap()
}

#[test]
fn conv_block_matches_composed_oracle() {
    let mut model = Conformer::new(ConformerConfig::default(), 1).unwrap();
    randomize(&mut model, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (prefix, in_ch, side, stride) in [("blocks.1.conv", 16, 8, 2), ("blocks.2.conv", 32, 4, 1)] {
        let x = random(&[1, in_ch, side, side], &mut rng);
        let (g, out) = with_graph(model.params(), model.buffers(), &x, |ctx, v| conv_block(ctx, prefix, v, stride));
        let y = out.unwrap();
        let expect = conv_block_oracle(&x, model.params(), model.buffers(), prefix, stride);
        assert_eq!(g.dims(y), expect.dims());
        assert!(g.value(y).max_abs_diff(&expect) < 1e-9, "{prefix}");
    }
}

#[test]
fn conv_block_with_zero_weights_is_identity() {
    let mut model = Conformer::new(ConformerConfig::default(), 1).unwrap();
    for n in ["reduce", "spatial", "expand"] {
        let w = model.params_mut().get_mut(&format!("blocks.2.conv.{n}.weight")).unwrap();
        w.data_mut().fill(0.0);
    }
    let x = random(&[1, 32, 8, 8], &mut ChaCha8Rng::seed_from_u64(6));
    let (g, out) = with_graph(model.params(), model.buffers(), &x, |ctx, v| conv_block(ctx, "blocks.2.conv", v, 1));
    assert_eq!(g.value(out.unwrap()), &x);
}

#[test]
fn conv_block_rejects_channel_mismatch() {
    let model = Conformer::new(ConformerConfig::default(), 1).unwrap();
    let x = Tensor::zeros(&[1, 5, 8, 8]);
    let (_, out) = with_graph(model.params(), model.buffers(), &x, |ctx, v| conv_block(ctx, "blocks.2.conv", v, 1));
    assert!(matches!(out, Err(Error::Shape { .. })));
}

fn transformer_params(d: usize, mlp: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let mut put = |name: &str, dims: &[usize]| p.insert(format!("t.{name}"), random(dims, rng));
    put("norm1.gamma", &[d]);
    put("norm1.beta", &[d]);
    put("attn.qkv.weight", &[d, 3 * d]);
    put("attn.qkv.bias", &[3 * d]);
    put("attn.proj.weight", &[d, d]);
    put("attn.proj.bias", &[d]);
    put("norm2.gamma", &[d]);
    put("norm2.beta", &[d]);
    put("mlp.fc1.weight", &[d, mlp * d]);
    put("mlp.fc1.bias", &[mlp * d]);
    put("mlp.fc2.weight", &[mlp * d, d]);
    put("mlp.fc2.bias", &[d]);
    p
}

/// Explicit per-head attention for one sequence `[t, d]`.
fn transformer_oracle(x: &Tensor, p: &ParamStore, heads: usize) -> (Tensor, Tensor) {
    let get = |n: &str| p.get(&format!("t.{n}")).unwrap();
    let (t, d) = (x.dims()[0], x.dims()[1]);
    let dh = d / heads;
    let h = Tensor::new(
        &[t, d],
        oracle::layer_norm_rows(x.data(), d, get("norm1.gamma").data(), get("norm1.beta").data(), LN_EPS),
    )
    .unwrap();
    let qkv = add_row_bias(&naive_matmul(&h, get("attn.qkv.weight")), get("attn.qkv.bias"));
    let mut avg = vec![0.0; t * t];
    let mut ctx = vec![0.0; t * d];
    for hh in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    (0..dh)
                        .map(|c| qkv.at(&[i, hh * dh + c]) * qkv.at(&[j, d + hh * dh + c]))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let a = oracle::softmax(&scores);
            for j in 0..t {
                avg[i * t + j] += a[j] / heads as f64;
                for c in 0..dh {
                    ctx[i * d + hh * dh + c] += a[j] * qkv.at(&[j, 2 * d + hh * dh + c]);
                }
            }
        }
    }
    let ctx = Tensor::new(&[t, d], ctx).unwrap();
    let o = add_row_bias(&naive_matmul(&ctx, get("attn.proj.weight")), get("attn.proj.bias"));
    let x1 = x.zip_map(&o, |a, b| a + b).unwrap();
    let h2 = Tensor::new(
        &[t, d],
        oracle::layer_norm_rows(x1.data(), d, get("norm2.gamma").data(), get("norm2.beta").data(), LN_EPS),
    )
    .unwrap();
    let m = gelu(&add_row_bias(&naive_matmul(&h2, get("mlp.fc1.weight")), get("mlp.fc1.bias")));
    let m = add_row_bias(&naive_matmul(&m, get("mlp.fc2.weight")), get("mlp.fc2.bias"));
    (x1.zip_map(&m, |a, b| a + b).unwrap(), Tensor::new(&[t, t], avg).unwrap())
}

#[test]
fn transformer_block_matches_per_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t, d) = (5, 8);
    for heads in [1, 2] {
        let p = transformer_params(d, 4, &mut rng);
        let x = random(&[2, t, d], &mut rng);
        let (g, out) = with_graph(&p, &ParamStore::new(), &x, |ctx, v| transformer_block(ctx, "t", v, heads));
        let (y, a) = out.unwrap();
        assert_eq!(g.dims(a), [2, t, t]);
        for s in 0..2 {
            let xs = Tensor::new(&[t, d], x.data()[s * t * d..(s + 1) * t * d].to_vec()).unwrap();
            let (ey, ea) = transformer_oracle(&xs, &p, heads);
            let ys = &g.value(y).data()[s * t * d..(s + 1) * t * d];
            let as_ = &g.value(a).data()[s * t * t..(s + 1) * t * t];
            assert!(ys.iter().zip(ey.data()).all(|(u, v)| (u - v).abs() < 1e-9), "heads {heads}");
            assert!(as_.iter().zip(ea.data()).all(|(u, v)| (u - v).abs() < 1e-9), "heads {heads}");
        }
    }
}

#[test]
fn zero_query_key_projection_gives_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, d) = (5, 8);
    let mut p = transformer_params(d, 4, &mut rng);
    let w = p.get_mut("t.attn.qkv.weight").unwrap();
    for r in 0..d {
        w.data_mut()[r * 3 * d..r * 3 * d + 2 * d].fill(0.0);
    }
    p.get_mut("t.attn.qkv.bias").unwrap().data_mut()[..2 * d].fill(0.0);
    let x = random(&[1, t, d], &mut rng);
    let (g, out) = with_graph(&p, &ParamStore::new(), &x, |ctx, v| transformer_block(ctx, "t", v, 2));
    let (_, a) = out.unwrap();
    assert!(g.value(a).data().iter().all(|v| (v - 1.0 / t as f64).abs() < 1e-15));
}

#[test]
fn transformer_block_rejects_indivisible_heads() {
    let p = transformer_params(8, 4, &mut ChaCha8Rng::seed_from_u64(9));
    let x = Tensor::zeros(&[1, 5, 8]);
    let (_, out) = with_graph(&p, &ParamStore::new(), &x, |ctx, v| transformer_block(ctx, "t", v, 3));
    assert!(matches!(out, Err(Error::Config(_))));
}

fn fcu_stores(d: usize, c: usize, rng: &mut ChaCha8Rng) -> (ParamStore, ParamStore) {
    let mut p = ParamStore::new();
    p.insert("d.proj.weight", random(&[d, c, 1, 1], rng));
    p.insert("d.proj.bias", random(&[d], rng));
    p.insert("d.norm.gamma", random(&[d], rng));
    p.insert("d.norm.beta", random(&[d], rng));
    p.insert("u.proj.weight", random(&[d, c], rng));
    p.insert("u.bn.gamma", random(&[c], rng));
    p.insert("u.bn.beta", random(&[c], rng));
    let mut b = ParamStore::new();
    b.insert("u.bn.running_mean", random(&[c], rng));
    b.insert("u.bn.running_var", Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)));
    (p, b)
}

#[test]
fn fcu_down_with_identity_projection_only_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 6;
    let (mut p, b) = fcu_stores(d, d, &mut rng);
    p.insert("d.proj.weight", Tensor::identity(d).reshape(&[d, d, 1, 1]).unwrap());
    p.insert("d.proj.bias", Tensor::zeros(&[d]));
    let f = random(&[1, d, 4, 4], &mut rng);
    let (g, out) = with_graph(&p, &b, &f, |ctx, v| fcu_down(ctx, "d", v, 4));
    let rows = map_to_rows(&f);
    let expect = oracle::layer_norm_rows(
        rows.data(),
        d,
        p.get("d.norm.gamma").unwrap().data(),
        p.get("d.norm.beta").unwrap().data(),
        LN_EPS,
    );
    let got = g.value(out.unwrap());
    assert_eq!(got.dims(), [1, 16, d]);
    assert!(got.data().iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn fcu_up_of_zero_tokens_is_normalization_shift_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, c) = (8, 6);
    let (p, b) = fcu_stores(d, c, &mut rng);
    let tokens = Tensor::zeros(&[1, 16, d]);
    let (g, out) = with_graph(&p, &b, &tokens, |ctx, v| fcu_up(ctx, "u", v, 4, 8));
    let expect = gelu(&bn_eval(&Tensor::zeros(&[1, c, 8, 8]), &p, &b, "u.bn"));
    assert!(g.value(out.unwrap()).max_abs_diff(&expect) < 1e-12);
}

#[test]
fn fcu_round_trip_preserves_extent_and_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, c) = (8, 6);
    let (p, b) = fcu_stores(d, c, &mut rng);
    let f = random(&[1, c, 8, 8], &mut rng);
    let (g, out) = with_graph(&p, &b, &f, |ctx, v| {
        let t = fcu_down(ctx, "d", v, 4)?;
        fcu_up(ctx, "u", t, 4, 8)
    });
    let back = g.value(out.unwrap()).clone();
    assert_eq!(back.dims(), f.dims());
    assert!(back.max_abs_diff(&f) > 1e-3);

    let y = add_bias(&naive_conv(&f, p.get("d.proj.weight").unwrap(), 1, 0), p.get("d.proj.bias").unwrap());
    let rows = map_to_rows(&avg_pool(&y, 2));
    let tokens = Tensor::new(
        &[16, d],
        oracle::layer_norm_rows(
            rows.data(),
            d,
            p.get("d.norm.gamma").unwrap().data(),
            p.get("d.norm.beta").unwrap().data(),
            LN_EPS,
        ),
    )
    .unwrap();
    let proj = naive_matmul(&tokens, p.get("u.proj.weight").unwrap());
    let grid_map = Tensor::from_fn(&[1, c, 4, 4], |i| proj.at(&[i % 16, i / 16]));
    let up = grid_map.resize_bilinear(8, 8).unwrap();
    let expect = gelu(&bn_eval(&up, &p, &b, "u.bn"));
    assert!(back.max_abs_diff(&expect) < 1e-9);
}

#[test]
fn fcu_down_rejects_non_square_map() {
    let (p, b) = fcu_stores(8, 6, &mut ChaCha8Rng::seed_from_u64(13));
    let f = Tensor::zeros(&[1, 6, 8, 4]);
    let (_, out) = with_graph(&p, &b, &f, |ctx, v| fcu_down(ctx, "d", v, 4));
    assert!(matches!(out, Err(Error::Shape { .. })));
}

#[test]
fn default_forward_has_documented_extents() {
    let model = Conformer::new(ConformerConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (side, grid) in [(64, 8), (32, 4), (96, 12)] {
        let img = random(&[3, side, side], &mut rng);
        let out = model.forward(&img).unwrap();
        assert_eq!(out.z_conv.dims(), [3]);
        assert_eq!(out.z_trans.dims(), [3]);
        assert_eq!(out.features.dims(), [64, grid, grid]);
        assert_eq!(out.attn.len(), 4);
        let t = 1 + grid * grid;
        for a in &out.attn.per_block {
            assert_eq!(a.dims(), [t, t]);
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for row in a.data().chunks(t) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn batched_forward_equals_per_image_forward() {
    let model = Conformer::new(tiny_config(), 3).unwrap();
    let imgs = random(&[3, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(15));
    let batch = model.forward_batch(&imgs).unwrap();
    for (i, out) in batch.iter().enumerate() {
        let img = Tensor::new(&[3, 8, 8], imgs.data()[i * 192..(i + 1) * 192].to_vec()).unwrap();
        let single = model.forward(&img).unwrap();
        assert!(single.z_conv.max_abs_diff(&out.z_conv) < 1e-12);
        assert!(single.z_trans.max_abs_diff(&out.z_trans) < 1e-12);
        assert!(single.features.max_abs_diff(&out.features) < 1e-12);
    }
}

#[test]
fn cnn_logits_are_pooled_class_maps() {
    let model = Conformer::new(ConformerConfig::default(), 0).unwrap();
    let img = random(&[3, 64, 64], &mut ChaCha8Rng::seed_from_u64(16));
    let out = model.forward(&img).unwrap();
    let theta = model.cam_weights().unwrap();
    let f = out.features.clone().reshape(&[64, 64]).unwrap();
    let maps = naive_matmul(&theta, &f);
    for c in 0..3 {
        let mean = (0..64).map(|i| maps.at(&[c, i])).sum::<f64>() / 64.0;
        assert!((mean - out.z_conv.data()[c]).abs() < 1e-12);
    }
}

fn parameter_count_formula(c: &ConformerConfig) -> usize {
    let d = c.embed_dim;
    let hidden = c.mlp_ratio * d;
    let mut total = 27 * c.stem_channels + 2 * c.stem_channels;
    total += d * c.stem_channels + d;
    let mut prev = c.stem_channels;
    for (i, &out) in c.stage_channels.iter().enumerate() {
        let mid = (out / 4).max(4);
        total += prev * mid + 9 * mid * mid + mid * out + 4 * mid + 2 * out;
        if prev != out || i + 1 == c.num_blocks / 2 {
            total += prev * out + 2 * out;
        }
        total += 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * d * hidden + hidden + d;
        total += d * out + 3 * d;
        if i > 0 {
            total += d * prev + 2 * prev;
        }
        prev = out;
    }
    total + d + c.num_fg_classes * prev + 2 * d + d * c.num_fg_classes + c.num_fg_classes
}

#[test]
fn parameter_count_is_stable() {
    let cfg = ConformerConfig::default();
    let model = Conformer::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.num_parameters(), parameter_count_formula(&cfg));
    assert_eq!(model.num_parameters(), 226_675);
    let tiny = Conformer::new(tiny_config(), 0).unwrap();
    assert_eq!(tiny.num_parameters(), parameter_count_formula(&tiny_config()));
}

#[test]
fn initialization_is_seeded() {
    let a = Conformer::new(tiny_config(), 5).unwrap();
    let b = Conformer::new(tiny_config(), 5).unwrap();
    let c = Conformer::new(tiny_config(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn from_parts_checks_layout() {
    let a = Conformer::new(tiny_config(), 5).unwrap();
    let ok = Conformer::from_parts(tiny_config(), a.params().clone(), a.buffers().clone()).unwrap();
    assert_eq!(ok, a);
    let other = ConformerConfig {
        embed_dim: 16,
        ..tiny_config()
    };
    assert!(Conformer::from_parts(other, a.params().clone(), a.buffers().clone()).is_err());
}

#[test]
fn running_stats_use_unbiased_variance() {
    let mut model = Conformer::new(tiny_config(), 0).unwrap();
    let stats = crate::autodiff::BatchStats {
        mean: vec![1.0; 4],
        var: vec![3.0; 4],
        count: 4,
    };
    model.update_running_stats(&[("stem.bn".to_string(), stats)], 0.1).unwrap();
    let m = model.buffers().get("stem.bn.running_mean").unwrap();
    let v = model.buffers().get("stem.bn.running_var").unwrap();
    assert!(m.data().iter().all(|x| (x - 0.1).abs() < 1e-15));
    assert!(v.data().iter().all(|x| (x - 1.3).abs() < 1e-15));
}

#[test]
fn combine_logits_examples() {
    let z = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
    assert_eq!(combine_logits(&z, &z, 0.5, 0.5).unwrap(), z);
    let zt = Tensor::new(&[3], vec![9.0, 9.0, 9.0]).unwrap();
    assert_eq!(combine_logits(&z, &zt, 1.0, 0.0).unwrap(), z);
    let a = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
    assert_eq!(combine_logits(&a, &b, 0.3, 0.7).unwrap().data(), [0.3, 0.7]);
    assert!(matches!(combine_logits(&a, &z, 0.5, 0.5), Err(Error::Shape { .. })));
}

fn probe_loss(g: &mut Graph, out: &GraphOutput) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut terms = vec![out.z_conv, out.z_trans, out.features];
    terms.extend(&out.attn);
    let mut total: Option<Var> = None;
    for v in terms {
        let w = g.constant(random(g.dims(v), &mut rng));
        let p = g.mul(v, w)?;
        let s = g.sum(p)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap())
}

#[test]
fn forward_gradients_match_finite_differences() {
    let mut model = Conformer::new(tiny_config(), 1).unwrap();
    randomize(&mut model, 21);
    let imgs = random(&[2, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(22));
    let eval = |m: &Conformer| -> f64 {
        let mut g = Graph::new();
        let x = g.constant(imgs.clone());
        let out = m.forward_graph(&mut g, x, Mode::Train, false).unwrap();
        let l = probe_loss(&mut g, &out).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let x = g.constant(imgs.clone());
    let out = model.forward_graph(&mut g, x, Mode::Train, true).unwrap();
    let l = probe_loss(&mut g, &out).unwrap();
    g.backward(l).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for name in names {
        let var = out.bindings.params[&name];
        let grad = g.grad(var).unwrap();
        // Key biases get an identically zero gradient; see the train module.
        let skip = if name.ends_with("attn.qkv.bias") { grad.numel() / 3 } else { 0 };
        for _ in 0..2 {
            let mut i = rng.random_range(0..grad.numel() - skip);
            if skip > 0 && i >= skip {
                i += skip;
            }
            let orig = model.params().get(&name).unwrap().data()[i];
            model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let plus = eval(&model);
            model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let minus = eval(&model);
            model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], fd);
            assert!(err < 1e-4, "{name}[{i}]: ad {} fd {fd}", grad.data()[i]);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4);
}
