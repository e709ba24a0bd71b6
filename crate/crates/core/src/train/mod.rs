//! Training, evaluation, threshold sweeps and ablations.

mod ablation;
mod loss;
mod metrics;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_csv, ablation_runner, AblationItem, AblationRow};
pub use loss::{soft_margin_loss, soft_margin_loss_graph};
pub use metrics::{evaluate_miou, miou_at, tau_grid, tau_sweep, Confusion, MiouReport, TauPoint, TauSweep};
pub use optim::{adamw_step, AdamWConfig, AdamWState};

use crate::autodiff::{relative_error, Graph};
use crate::cam::{coupled_cam, multiscale_fuse, suppress_absent, BlockRange, ClassActivationMap, Coupling};
use crate::conformer::{combine_logits, combine_logits_graph, Conformer, ConformerConfig, ForwardOutput, Mode};
use crate::data::{augment, shuffled_indices, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

/// Everything that determines a training run and its evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ConformerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub w_conv: f64,
    pub w_trans: f64,
    pub tau_grid: Vec<f64>,
    /// Threshold used for the per-epoch mIoU column.
    pub eval_tau: f64,
    /// Inference scales relative to the dataset image size.
    pub scales: Vec<f64>,
    pub range: BlockRange,
    pub coupling: Coupling,
    /// Zero the maps of classes absent from the image-level label before
    /// pseudo labelling.
    pub gate_labels: bool,
    pub augment: AugmentConfig,
    /// Write measured wall time into the metrics; off keeps the metrics
    /// file a pure function of the configuration.
    pub record_wall_time: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ConformerConfig::default(),
            epochs: 30,
            batch_size: 8,
            lr: 2e-4,
            weight_decay: 5e-4,
            w_conv: 0.5,
            w_trans: 0.5,
            tau_grid: tau_grid(0.05),
            eval_tau: 0.4,
            scales: vec![0.5, 1.0, 1.5],
            range: BlockRange::All,
            coupling: Coupling::TransCam,
            gate_labels: true,
            augment: AugmentConfig::default(),
            record_wall_time: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail(format!("invalid learning rate {} / weight decay {}", self.lr, self.weight_decay));
        }
        if !(self.w_conv >= 0.0 && self.w_trans >= 0.0) {
            return fail(format!("logit weights must be >= 0, got ({}, {})", self.w_conv, self.w_trans));
        }
        if self.tau_grid.is_empty() || self.tau_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return fail("threshold grid must be a non-empty subset of [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval_tau) {
            return fail(format!("threshold {} outside [0, 1]", self.eval_tau));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0)) {
            return fail("scales must be positive and non-empty".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig::new(self.lr, self.weight_decay)
    }
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    /// Background first; `None` for classes absent from prediction and truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub seconds: f64,
}

/// CSV with header `epoch,loss,acc,iou_<class>...,miou,seconds`. Classes
/// absent from both prediction and truth leave their IoU cell empty and
/// are excluded from `miou`.
pub fn metrics_csv(rows: &[MetricsRow], fg_classes: &[String]) -> String {
    let mut out = String::from("epoch,loss,acc,iou_background");
    for c in fg_classes {
        let _ = write!(out, ",iou_{c}");
    }
    out.push_str(",miou,seconds\n");
    for r in rows {
        let _ = write!(out, "{},{:.6},{:.6}", r.epoch, r.loss, r.acc);
        for v in &r.iou {
            match v {
                Some(x) => {
                    let _ = write!(out, ",{x:.6}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{:.6},{:.3}", r.miou, r.seconds);
    }
    out
}

/// Maps `[0, 1]` pixels to the network's input range.
pub fn network_input(image: &Tensor) -> Tensor {
    image.map(|v| (v - 0.5) / 0.25)
}

/// Input side for `scale`, rounded to a whole number of patches.
pub fn scaled_side(side: usize, scale: f64, patch: usize) -> usize {
    (((side as f64 * scale) / patch as f64).round() as usize).max(1) * patch
}

fn stack_inputs(images: &[&Tensor], side: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * side * side);
    for img in images {
        let x = if img.dims()[1] == side && img.dims()[2] == side {
            (*img).clone()
        } else {
            img.resize_bilinear(side, side)?
        };
        data.extend(network_input(&x).into_data());
    }
    Tensor::new(&[images.len(), 3, side, side], data)
}

const EVAL_CHUNK: usize = 16;

static MAX_WORKERS: AtomicUsize = AtomicUsize::new(0);

/// Caps the threads used for batched inference; 0 restores the default of
/// one per available core.
pub fn set_max_workers(n: usize) {
    MAX_WORKERS.store(n, Ordering::Relaxed);
}

fn max_workers() -> usize {
    match MAX_WORKERS.load(Ordering::Relaxed) {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

/// Eval-mode outputs of every image at every scale: `result[image][scale]`.
/// Chunks of images are spread over worker threads; the result does not
/// depend on the worker count.
pub fn infer_scales(model: &Conformer, images: &[&Tensor], scales: &[f64]) -> Result<Vec<Vec<ForwardOutput>>> {
    let patch = model.config().patch_size();
    let jobs: Vec<(f64, usize)> = scales
        .iter()
        .flat_map(|&s| (0..images.len().div_ceil(EVAL_CHUNK)).map(move |c| (s, c)))
        .collect();
    let run = |&(s, c): &(f64, usize)| -> Result<Vec<ForwardOutput>> {
        let chunk = &images[c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(images.len())];
        let side = scaled_side(chunk[0].dims()[1], s, patch);
        model.forward_batch(&stack_inputs(chunk, side)?)
    };
    let workers = max_workers().min(jobs.len()).max(1);
    let results: Vec<Result<Vec<ForwardOutput>>> = if workers == 1 {
        jobs.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<ForwardOutput>>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    let run = &run;
                    scope.spawn(move || {
                        (w..jobs.len())
                            .step_by(workers)
                            .map(|j| (j, run(&jobs[j])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (j, r) in h.join().expect("inference worker panicked") {
                    slots[j] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    };
    let mut out: Vec<Vec<ForwardOutput>> = images.iter().map(|_| Vec::with_capacity(scales.len())).collect();
    for ((_, c), r) in jobs.iter().zip(results) {
        for (i, o) in r?.into_iter().enumerate() {
            out[c * EVAL_CHUNK + i].push(o);
        }
    }
    Ok(out)
}

/// Multi-scale fused, normalized class maps at `height × width`.
pub fn fused_cam(
    outputs: &[ForwardOutput],
    head_weights: &Tensor,
    coupling: Coupling,
    range: BlockRange,
    height: usize,
    width: usize,
) -> Result<ClassActivationMap> {
    let maps = outputs
        .iter()
        .map(|o| coupled_cam(o, head_weights, coupling, range))
        .collect::<Result<Vec<_>>>()?;
    multiscale_fuse(&maps, height, width)
}

/// Cached network outputs for an evaluation set.
pub struct EvalCache<'a> {
    pub samples: &'a [Sample],
    pub outputs: Vec<Vec<ForwardOutput>>,
    /// Combined logits at the native scale.
    pub logits: Vec<Tensor>,
    head: Tensor,
}

impl<'a> EvalCache<'a> {
    pub fn build(model: &Conformer, samples: &'a [Sample], cfg: &RunConfig) -> Result<Self> {
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let outputs = infer_scales(model, &images, &cfg.scales)?;
        let native = cfg.scales.iter().position(|&s| s == 1.0);
        let logits = match native {
            Some(i) => outputs
                .iter()
                .map(|o| combine_logits(&o[i].z_conv, &o[i].z_trans, cfg.w_conv, cfg.w_trans))
                .collect::<Result<Vec<_>>>()?,
            None => infer_scales(model, &images, &[1.0])?
                .iter()
                .map(|o| combine_logits(&o[0].z_conv, &o[0].z_trans, cfg.w_conv, cfg.w_trans))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            samples,
            outputs,
            logits,
            head: model.cam_weights()?.transpose()?,
        })
    }

    /// Fraction of correct per-class presence decisions (`z' > 0`).
    pub fn accuracy(&self) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (z, s) in self.logits.iter().zip(self.samples) {
            for (&zc, &yc) in z.data().iter().zip(&s.labels) {
                correct += ((zc > 0.0) == yc) as usize;
                total += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Image-sized normalized maps, gated by image labels when `gate`.
    pub fn cams(&self, coupling: Coupling, range: BlockRange, gate: bool) -> Result<Vec<ClassActivationMap>> {
        self.outputs
            .iter()
            .zip(self.samples)
            .map(|(o, s)| {
                let m = fused_cam(o, &self.head, coupling, range, s.height(), s.width())?;
                if gate {
                    suppress_absent(&m, &s.labels)
                } else {
                    Ok(m)
                }
            })
            .collect()
    }

    pub fn masks(&self) -> Result<Vec<&[u8]>> {
        self.samples
            .iter()
            .map(|s| {
                s.mask
                    .as_deref()
                    .ok_or_else(|| Error::Config(format!("sample `{}` has no mask", s.stem)))
            })
            .collect()
    }

    pub fn sweep(&self, coupling: Coupling, range: BlockRange, gate: bool, grid: &[f64]) -> Result<TauSweep> {
        tau_sweep(&self.cams(coupling, range, gate)?, &self.masks()?, grid)
    }
}

fn labels_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let k = samples[0].labels.len();
    let data = samples
        .iter()
        .flat_map(|s| s.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(&[samples.len(), k], data)
}

/// One optimization step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut Conformer,
    batch: &[&Sample],
    cfg: &RunConfig,
    state: &mut AdamWState,
) -> Result<f64> {
    let side = batch[0].height();
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let x = stack_inputs(&images, side)?;
    let y = labels_tensor(batch)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = model.forward_graph(&mut g, xv, Mode::Train, true)?;
    let z = combine_logits_graph(&mut g, out.z_conv, out.z_trans, cfg.w_conv, cfg.w_trans)?;
    let loss = soft_margin_loss_graph(&mut g, z, &y)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let grads: BTreeMap<String, Tensor> = out
        .bindings
        .params
        .iter()
        .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t)))
        .collect();
    adamw_step(model.params_mut(), &grads, state, &cfg.adamw())?;
    model.update_running_stats(&out.bindings.bn_stats, BN_MOMENTUM)?;
    Ok(value)
}

pub struct TrainOutcome {
    pub model: Conformer,
    pub metrics: Vec<MetricsRow>,
}

/// Trains from a fresh initialization keyed by `cfg.seed`, evaluating on
/// `eval` after every epoch. `on_epoch` sees each metrics row as it is
/// produced.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sample],
    eval: &[Sample],
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let k = cfg.model.num_fg_classes;
    if let Some(s) = train_set.iter().chain(eval).find(|s| s.labels.len() != k) {
        return Err(Error::Config(format!(
            "sample `{}` has {} classes, model expects {k}",
            s.stem,
            s.labels.len()
        )));
    }
    let mut model = Conformer::new(cfg.model.clone(), cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut state = AdamWState::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(train_set.len(), &mut order_rng);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = idx
                .iter()
                .map(|&i| augment(&train_set[i], &cfg.augment, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = batch.iter().collect();
            let loss = train_step(&mut model, &refs, cfg, &mut state)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss is {loss} at epoch {epoch}, step {}", step + 1)));
            }
            total += loss * idx.len() as f64;
        }
        let (acc, report) = if eval.is_empty() {
            (0.0, MiouReport { per_class: vec![None; k + 1], miou: 0.0 })
        } else {
            let cache = EvalCache::build(&model, eval, cfg)?;
            let cams = cache.cams(cfg.coupling, cfg.range, cfg.gate_labels)?;
            (cache.accuracy(), miou_at(&cams, &cache.masks()?, cfg.eval_tau)?)
        };
        let row = MetricsRow {
            epoch,
            loss: total / train_set.len() as f64,
            acc,
            iou: report.per_class,
            miou: report.miou,
            seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} miou {:.3} ({:.1}s)",
            row.loss,
            row.acc,
            row.miou,
            start.elapsed().as_secs_f64()
        );
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome { model, metrics })
}

/// Outcome of comparing the model's reverse-mode gradient with central
/// differences on sampled parameter coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

/// Finite-difference check of `loss ∘ forward` for a freshly initialized
/// model on one random image with random labels. Batch norm runs in
/// training mode; `per_tensor` coordinates of every parameter tensor are
/// perturbed by `±step`.
pub fn model_gradient_check(config: &ConformerConfig, seed: u64, per_tensor: usize, step: f64) -> Result<ModelGradReport> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut model = Conformer::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let s = config.image_size;
    let image = Tensor::from_fn(&[3, s, s], |_| rng.random_range(0.0..1.0));
    let x = network_input(&image).reshape(&[1, 3, s, s])?;
    let labels: Vec<f64> = (0..config.num_fg_classes)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let y = Tensor::new(&[1, config.num_fg_classes], labels)?;

    let loss_of = |m: &Conformer, trainable: bool| -> Result<(Graph, crate::autodiff::Var, crate::conformer::GraphOutput)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = m.forward_graph(&mut g, xv, Mode::Train, trainable)?;
        let z = combine_logits_graph(&mut g, out.z_conv, out.z_trans, 0.5, 0.5)?;
        let l = soft_margin_loss_graph(&mut g, z, &y)?;
        Ok((g, l, out))
    };
    let (mut g, l, out) = loss_of(&model, true)?;
    g.backward(l)?;

    let mut report = ModelGradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for name in names {
        let grad = g
            .grad(out.bindings.params[&name])
            .unwrap_or_else(|| Tensor::zeros(model.params().get(&name).expect("bound").dims()));
        // Key biases shift all scores of a query row equally and the softmax
        // cancels them: their gradient is identically zero, so a finite
        // difference there measures roundoff only.
        let skip = if name.ends_with("attn.qkv.bias") { grad.numel() / 3 } else { 0 };
        for _ in 0..per_tensor {
            let mut i = rng.random_range(0..grad.numel() - skip);
            if skip > 0 && i >= skip {
                i += skip;
            }
            let orig = model.params().get(&name)?.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                model.params_mut().get_mut(&name)?.data_mut()[i] = v;
                let (g, l, _) = loss_of(&model, false)?;
                g.value(l).item()
            };
            let plus = eval_at(orig + step)?;
            let minus = eval_at(orig - step)?;
            model.params_mut().get_mut(&name)?.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], fd);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
