use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcam"))
        .args(args)
        .env_remove("TCAM_THREADS")
        .output()
        .expect("spawn tcam")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

const TINY_CONFIG: &str = r#"{
  "model": {
    "num_blocks": 2, "embed_dim": 8, "num_heads": 2, "grid": 2,
    "stage_channels": [4, 8], "stem_channels": 4, "num_fg_classes": 3,
    "image_size": 16, "mlp_ratio": 2
  },
  "epochs": 2,
  "batch_size": 4,
  "lr": 0.001,
  "scales": [1.0, 2.0],
  "augment": { "crop": 16 }
}"#;

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let o = tcam(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = tcam(&["gen-data", "--out", "x", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&tcam(&[])), 1);
    let o = tcam(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("grad-check"));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = tcam(&["gen-data", "--out", p(out), "--n", "10", "--n-eval", "2", "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ta, tb, tc) = (tree(&a), tree(&b), tree(&c));
    assert_eq!(ta.len(), 2 * 12 + 1);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn gen_data_rejects_unknown_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = tcam(&["gen-data", "--out", p(dir.path()), "--classes", "hexagon"]);
    assert_eq!(code(&o), 1);
}

fn resolved(args: &[&str]) -> Value {
    let mut full = vec!["train", "--print-config"];
    full.extend_from_slice(args);
    let o = tcam(&full);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn flag_beats_file_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    fs::write(&file, r#"{"lr": 0.125, "epochs": 7, "seed": 11, "w_conv": 0.25, "range": "AS"}"#).unwrap();
    let f = p(&file);
    // (field, file value, flag, flag value, default)
    let cases: [(&str, Value, &str, &str, Value); 5] = [
        ("lr", 0.125.into(), "--lr", "0.5", 2e-4.into()),
        ("epochs", 7.into(), "--epochs", "3", 30.into()),
        ("seed", 11.into(), "--seed", "4", 0.into()),
        ("w_conv", 0.25.into(), "--w-conv", "0.75", 0.5.into()),
        ("range", "AS".into(), "--range", "ad", "AA".into()),
    ];
    for (field, in_file, flag, flag_value, default) in cases {
        assert_eq!(resolved(&[])[field], default, "{field}: default");
        assert_eq!(resolved(&["--config", f])[field], in_file, "{field}: file");
        let from_flag = resolved(&[flag, flag_value])[field].clone();
        let both = resolved(&["--config", f, flag, flag_value])[field].clone();
        assert_eq!(from_flag, both, "{field}: flag over file");
        assert_ne!(both, in_file, "{field}");
        assert_ne!(from_flag, default, "{field}");
    }
    let untouched = resolved(&["--config", f]);
    assert_eq!(untouched["batch_size"], 8);
    assert_eq!(untouched["w_trans"], 0.5);
}

#[test]
fn invalid_config_values_are_usage_errors() {
    assert_eq!(code(&tcam(&["train", "--print-config", "--lr", "-1"])), 1);
    assert_eq!(code(&tcam(&["train", "--print-config", "--w-conv", "-0.5"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    fs::write(&file, "{ not json").unwrap();
    assert_eq!(code(&tcam(&["train", "--print-config", "--config", p(&file)])), 1);
    assert_eq!(code(&tcam(&["train", "--data", "nowhere"])), 1);
}

#[test]
fn thread_cap_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_tcam"))
        .args(["train", "--print-config"])
        .env("TCAM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_tcam"))
        .args(["train", "--print-config"])
        .env("TCAM_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn grad_check_reports_and_fails_above_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let o = tcam(&["grad-check", "--seed", "3", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(report["checked"].as_u64().unwrap() > 0);
    let o = tcam(&["grad-check", "--seed", "3", "--config", p(&cfg), "--tolerance", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pipeline_from_data_to_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let run = root.join("run");
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let o = tcam(&["gen-data", "--out", p(&data), "--n", "8", "--n-eval", "4", "--size", "16", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = tcam(&["train", "--data", p(&data), "--out", p(&run), "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("checkpoint.tcam");
    assert!(ckpt.exists());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,loss,acc,iou_background,iou_disk,iou_rectangle,iou_triangle,miou,seconds\n"));

    let again = root.join("again");
    let o = tcam(&["train", "--data", p(&data), "--out", p(&again), "--config", p(&cfg)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join("checkpoint.tcam")).unwrap());

    let image = data.join("images").join("eval_0000.png");
    let inf = root.join("infer");
    let o = tcam(&[
        "infer", "--checkpoint", p(&ckpt), "--image", p(&image), "--tau", "0.5", "--mode", "transcam", "--out", p(&inf),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels = image::open(inf.join("labels.png")).unwrap();
    assert_eq!((labels.width(), labels.height()), (16, 16));
    for c in 1..=3 {
        assert!(inf.join(format!("transcam_{c}.png")).exists());
    }

    let exp = root.join("export");
    let o = tcam(&[
        "export-heatmaps", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&exp), "--reference", "3,12",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for stage in ["cam", "clsattn", "attnagg", "transcam"] {
        for c in 1..=3 {
            assert!(exp.join(format!("{stage}_{c}.png")).exists(), "{stage}_{c}");
        }
    }
    for r in ["AS", "AD", "AA"] {
        let img = image::open(exp.join(format!("attn_{r}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16));
    }
    let o = tcam(&[
        "export-heatmaps", "--checkpoint", p(&ckpt), "--image", p(&image), "--out", p(&exp), "--reference", "16,0",
    ]);
    assert_eq!(code(&o), 1);

    let o = tcam(&["sweep-tau", "--checkpoint", p(&ckpt), "--data", p(&data), "--step", "0.25", "--scales", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["curve"].as_array().unwrap().len(), 5);
    let best = report["best_miou"].as_f64().unwrap();
    assert!(report["curve"].as_array().unwrap().iter().all(|pt| pt["miou"].as_f64().unwrap() <= best));

    let o = tcam(&[
        "ablate", "--checkpoint", p(&ckpt), "--data", p(&data), "--config", p(&cfg), "--groups", "coupling,range",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 1 + 4 + 3);
    assert!(csv.contains("coupling,baseline,AA"));

    let bad = root.join("bad.tcam");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&bad, bytes).unwrap();
    let o = tcam(&["infer", "--checkpoint", p(&bad), "--image", p(&image), "--out", p(&inf)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checksum"));
}
