use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use transcam::cam::{pseudo_label, suppress_absent, BlockRange, Coupling};
use transcam::checkpoint;
use transcam::conformer::combine_logits;
use transcam::data::{generate_dataset, load_image, save_mask, Dataset, GenerationSpec, EVAL, TRAIN};
use transcam::train::{
    ablation_csv, ablation_runner, infer_scales, metrics_csv, model_gradient_check, tau_grid, train, AblationItem,
    EvalCache, RunConfig,
};
use transcam::{Error, Tensor};

use crate::heatmap::{reference_row, render, save_png, stage_maps, stage_name, write_class_maps};
use crate::{config, AblateArgs, CliError, CliResult, Command, ExportArgs, GenDataArgs, GradCheckArgs, GroupArg, InferArgs, SweepArgs, TrainArgs};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepTau(a) => sweep_tau(a),
        Command::ExportHeatmaps(a) => export(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(Error::io(path, e)))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn require_image(image: &Tensor, side: usize) -> CliResult<()> {
    let d = image.dims();
    if d[1] != d[2] || d[1] % side != 0 {
        return Err(CliError::Usage(format!(
            "image is {}x{}; expected a square side divisible by the patch size {side}",
            d[1], d[2]
        )));
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut spec = GenerationSpec {
        num_train: a.n,
        num_eval: a.n_eval,
        size: a.size,
        seed: a.seed,
        ..Default::default()
    };
    if let Some(c) = a.classes {
        spec.classes = c;
    }
    spec.validate()?;
    let manifest = generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} samples ({} classes) to {}",
        manifest.stems.len(),
        manifest.classes.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let cfg = config::resolve(&a.run)?;
    if a.print_config {
        println!("{}", config::to_json(&cfg));
        return Ok(());
    }
    let (data, out) = match (a.data, a.out) {
        (Some(d), Some(o)) => (d, o),
        _ => return Err(CliError::Usage("train needs --data and --out".into())),
    };
    let ds = Dataset::open(&data)?;
    let mut cfg = cfg;
    cfg.model.num_fg_classes = ds.manifest.classes.len();
    let train_set = ds.load_split(TRAIN)?;
    let eval = ds.load_split(EVAL)?;
    create_dir(&out)?;
    write_text(&out.join("config.json"), &config::to_json(&cfg))?;
    let outcome = train(&cfg, &train_set, &eval, |r| {
        eprintln!("epoch {:>3}  loss {:.4}  acc {:.3}  miou {:.3}", r.epoch, r.loss, r.acc, r.miou)
    })?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&outcome.metrics, &ds.manifest.classes))?;
    checkpoint::save(&outcome.model, &out.join("checkpoint.tcam"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn infer(a: InferArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(CliError::Usage(format!("--tau {} outside [0, 1]", a.tau)));
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    require_image(&image, model.config().patch_size())?;
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let coupling: Coupling = a.mode.into();
    let range: BlockRange = a.range.into();
    let mut maps = stage_maps(&model, &image, &[coupling], range, &a.scales)?;
    let (_, mut map) = maps.remove(0);
    let native = infer_scales(&model, &[&image], &[1.0])?.remove(0).remove(0);
    let z = combine_logits(&native.z_conv, &native.z_trans, 0.5, 0.5)?;
    let present: Vec<bool> = z.data().iter().map(|&v| v > 0.0).collect();
    if !a.no_gate {
        map = suppress_absent(&map, &present)?;
    }
    let labels = pseudo_label(&map, a.tau, h, w)?;
    create_dir(&a.out)?;
    save_mask(&a.out.join("labels.png"), &labels.labels, h, w)?;
    write_class_maps(&map, stage_name(coupling), &image, a.alpha, &a.out)?;
    println!("{}", json!({ "present": present, "logits": z.data() }));
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let mut cfg = config::resolve(&a.run)?;
    cfg.model = model.config().clone();
    let ds = Dataset::open(&a.data)?;
    let train_set = ds.load_split(TRAIN)?;
    let eval = ds.load_split(EVAL)?;
    let items: Vec<AblationItem> = AblationItem::full_suite()
        .into_iter()
        .filter(|i| {
            let g = match i {
                AblationItem::Coupling(_) => GroupArg::Coupling,
                AblationItem::Range(_) => GroupArg::Range,
                AblationItem::Weights { .. } => GroupArg::Weights,
            };
            a.groups.contains(&g)
        })
        .collect();
    let rows = ablation_runner(&model, &cfg, &train_set, &eval, &items, a.sweep_epochs, |r| {
        eprintln!("{} {} {}: best tau {:.2}, mIoU {:.4}", r.group, r.variant, r.range.label(), r.best_tau, r.miou)
    })?;
    emit(a.out.as_deref(), &ablation_csv(&rows))
}

fn sweep_tau(a: SweepArgs) -> CliResult<()> {
    if !(a.step > 0.0 && a.step <= 1.0) {
        return Err(CliError::Usage(format!("--step {} outside (0, 1]", a.step)));
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let cfg = RunConfig {
        model: model.config().clone(),
        scales: a.scales.clone(),
        ..Default::default()
    };
    cfg.validate()?;
    let ds = Dataset::open(&a.data)?;
    let eval = ds.load_split(EVAL)?;
    let cache = EvalCache::build(&model, &eval, &cfg)?;
    let coupling: Coupling = a.mode.into();
    let range: BlockRange = a.range.into();
    let sweep = cache.sweep(coupling, range, !a.no_gate, &tau_grid(a.step))?;
    let report = json!({
        "mode": coupling.label(),
        "range": range.label(),
        "gated": !a.no_gate,
        "best_tau": sweep.best_tau,
        "best_miou": sweep.best_miou,
        "curve": sweep.curve,
    });
    emit(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")))
}

fn export(a: ExportArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    require_image(&image, model.config().patch_size())?;
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let reference = match a.reference.as_deref() {
        Some(&[y, x]) if y < h && x < w => Some((y, x)),
        Some(v) => {
            return Err(CliError::Usage(format!("reference pixel {v:?} outside the {h}x{w} image")));
        }
        None => None,
    };
    create_dir(&a.out)?;
    let stages: Vec<Coupling> = a.modes.iter().map(|&m| m.into()).collect();
    let mut written: Vec<PathBuf> = Vec::new();
    for (c, map) in stage_maps(&model, &image, &stages, a.range.into(), &a.scales)? {
        written.extend(write_class_maps(&map, stage_name(c), &image, a.alpha, &a.out)?);
    }
    if let Some(pixel) = reference {
        for range in BlockRange::ALL {
            let row = reference_row(&model, &image, pixel, range)?;
            let path = a.out.join(format!("attn_{}.png", range.label()));
            save_png(&render(row.data(), h, w, Some(&image), a.alpha)?, &path)?;
            written.push(path);
        }
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CliResult<()> {
    let model_cfg = match &a.config {
        Some(p) => config::load_file(p)?.model,
        None => RunConfig::default().model,
    };
    let report = model_gradient_check(&model_cfg, a.seed, a.per_tensor, a.step)?;
    println!(
        "{}",
        json!({
            "seed": a.seed,
            "checked": report.checked,
            "max_rel_error": report.max_rel_error,
            "worst": report.worst,
        })
    );
    if report.max_rel_error >= a.tolerance {
        return Err(CliError::Runtime(Error::Numeric(format!(
            "max relative error {:.3e} at {} is not below {:.0e}",
            report.max_rel_error, report.worst, a.tolerance
        ))));
    }
    Ok(())
}
