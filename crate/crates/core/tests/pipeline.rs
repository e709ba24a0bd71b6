use transcam::cam::{BlockRange, Coupling};
use transcam::checkpoint;
use transcam::conformer::ConformerConfig;
use transcam::data::{self, AugmentConfig, Dataset, GenerationSpec};
use transcam::train::{self, EvalCache, RunConfig};

fn tiny_config() -> RunConfig {
    RunConfig {
        model: ConformerConfig {
            num_blocks: 2,
            embed_dim: 8,
            num_heads: 2,
            grid: 2,
            stage_channels: vec![4, 8],
            stem_channels: 4,
            num_fg_classes: 3,
            image_size: 16,
            mlp_ratio: 2,
        },
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        scales: vec![1.0],
        augment: AugmentConfig {
            crop: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn generate_train_checkpoint_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenerationSpec {
        num_train: 12,
        num_eval: 4,
        size: 16,
        seed: 3,
        ..Default::default()
    };
    data::generate_dataset(&spec, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let train_set = ds.load_split(data::TRAIN).unwrap();
    let eval_set = ds.load_split(data::EVAL).unwrap();
    assert_eq!((train_set.len(), eval_set.len()), (12, 4));

    let cfg = tiny_config();
    let mut seen = 0;
    let out = train::train(&cfg, &train_set, &eval_set, |_| seen += 1).unwrap();
    assert_eq!(seen, cfg.epochs);
    assert_eq!(out.metrics.len(), cfg.epochs);
    assert!(out.metrics.iter().all(|r| r.loss.is_finite()));

    let path = dir.path().join("model.bin");
    checkpoint::save(&out.model, &path).unwrap();
    let reloaded = checkpoint::load(&path).unwrap();
    let expected = checkpoint::stored_precision(&out.model);

    let a = EvalCache::build(&reloaded, &eval_set, &cfg).unwrap();
    let b = EvalCache::build(&expected, &eval_set, &cfg).unwrap();
    assert_eq!(a.accuracy(), b.accuracy());
    for coupling in [Coupling::None, Coupling::TransCam] {
        let sa = a.sweep(coupling, BlockRange::All, true, &cfg.tau_grid).unwrap();
        let sb = b.sweep(coupling, BlockRange::All, true, &cfg.tau_grid).unwrap();
        assert_eq!(sa.best_miou, sb.best_miou);
        assert!((0.0..=1.0).contains(&sa.best_miou));
        assert_eq!(sa.curve.len(), cfg.tau_grid.len());
    }
}
