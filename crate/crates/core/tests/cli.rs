use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixseg::data::synthetic::{blobs, write_pairs};
use mixseg::data::{ingest, load_mask};
use mixseg::train::Checkpoint;
use mixseg::Tensor;

fn mixseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixseg"))
        .args(args)
        .env("MIXSEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn write_config(root: &Path, body: &str) -> PathBuf {
    let path = root.join("run.cfg");
    let text = format!(
        "[run]\nseed = 5\ndata_dir = {}\noutput_dir = {}\n{body}",
        root.join("data").display(),
        root.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

const SKIN: &str = "regime = skin\n\
[arch]\nvariant = attunet\nmix = true\ndepth = 2\nbase_width = 4\nkernel_sizes = 1,3\n\
[data]\npreprocess = resize:32x32\nsplit = 0.5,0.25,0.25\n\
[train]\nepochs = 2\nbatch_size = 2\naugment = true\n";

#[test]
fn whole_image_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_pairs(&root.join("data"), &blobs(8, 40, 36, 1)).unwrap();
    let cfg = write_config(root, SKIN);
    let cfg = cfg.to_str().unwrap();

    let prepared = ok(mixseg(&["prepare", "--config", cfg]));
    assert!(prepared.contains("train 4 / val 2 / test 2"), "{prepared}");
    let trained = ok(mixseg(&["train", "--config", cfg]));
    assert!(trained.contains("epoch 2/2"), "{trained}");
    let out = root.join("out");
    for f in ["history.csv", "last.ckpt", "best.ckpt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_loss,lr,val_AC"));

    let table = ok(mixseg(&["eval", "--config", cfg]));
    assert!(table.contains("Dataset: Skin"), "{table}");
    assert!(table.contains("MixAttU-Net"), "{table}");
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.starts_with("dataset,method,AC,SE,SP,PC,F1,JS\nSkin,MixAttU-Net,"), "{results}");

    // Predictions are valid masks: pairing them with their images ingests cleanly.
    let predicted = ok(mixseg(&["predict", "--config", cfg, "--input", root.join("data").to_str().unwrap()]));
    assert_eq!(predicted.lines().count(), 8);
    let pairs = root.join("pairs");
    std::fs::create_dir_all(&pairs).unwrap();
    for entry in std::fs::read_dir(out.join("predictions")).unwrap() {
        let path = entry.unwrap().path();
        let stem = path.file_stem().unwrap().to_str().unwrap().trim_end_matches("_pred").to_string();
        let mask = load_mask(&path).unwrap();
        assert_eq!(mask.shape(), &[32, 32, 1]);
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        std::fs::copy(&path, pairs.join(format!("{stem}_mask.png"))).unwrap();
        let image = image::open(root.join("data").join(format!("{stem}.png"))).unwrap();
        image.resize_exact(32, 32, image::imageops::FilterType::Triangle).save(pairs.join(format!("{stem}.png"))).unwrap();
    }
    let back = ingest(&pairs).unwrap();
    assert_eq!(back.len(), 8);
}

#[test]
fn resumed_training_matches_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_pairs(&root.join("data"), &blobs(6, 32, 32, 2)).unwrap();
    let cfg = write_config(root, SKIN);
    let cfg = cfg.to_str().unwrap();
    ok(mixseg(&["prepare", "--config", cfg]));
    ok(mixseg(&["train", "--config", cfg, "--epochs", "1"]));
    let resumed = ok(mixseg(&["train", "--config", cfg, "--resume", "true"]));
    assert!(resumed.contains("resuming from"), "{resumed}");
    let split = std::fs::read(root.join("out/history.csv")).unwrap();

    ok(mixseg(&["train", "--config", cfg, "--output-dir", root.join("once").to_str().unwrap(), "--cache-dir", root.join("out/prepared").to_str().unwrap()]));
    assert_eq!(split, std::fs::read(root.join("once/history.csv")).unwrap());
    assert_eq!(std::fs::read(root.join("out/last.ckpt")).unwrap(), std::fs::read(root.join("once/last.ckpt")).unwrap());
}

#[test]
fn patch_regime_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_pairs(&root.join("data"), &blobs(4, 60, 70, 3)).unwrap();
    let body = "regime = drive\n\
        [arch]\nvariant = r2unet\nmix = true\ndepth = 2\nbase_width = 4\nkernel_sizes = 1,3\nrecurrence_steps = 1\n\
        [data]\npreprocess = crop_pad:64\npatch_size = 16\npatch_count = 40\n\
        [train]\nepochs = 1\nbatch_size = 8\n[eval]\nstride = 8\n";
    let cfg = write_config(root, body);
    let cfg = cfg.to_str().unwrap();
    let prepared = ok(mixseg(&["prepare", "--config", cfg]));
    assert!(prepared.contains("patches: 36 training, 4 validation (16×16)"), "{prepared}");
    ok(mixseg(&["train", "--config", cfg]));
    let table = ok(mixseg(&["eval", "--config", cfg]));
    assert!(table.contains("Dataset: DRIVE") && table.contains("MixR2U-Net"), "{table}");
    ok(mixseg(&["predict", "--config", cfg, "--input", root.join("data/blob_0000.png").to_str().unwrap()]));
    let mask = load_mask(&root.join("out/predictions/blob_0000_pred.png")).unwrap();
    assert_eq!(mask.shape(), &[64, 64, 1]);
}

#[test]
fn constant_half_predictor_marks_everything_foreground() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_pairs(&root.join("data"), &blobs(6, 32, 32, 4)).unwrap();
    let cfg = write_config(root, SKIN);
    let cfg = cfg.to_str().unwrap();
    ok(mixseg(&["prepare", "--config", cfg]));
    ok(mixseg(&["train", "--config", cfg, "--epochs", "1"]));

    let mut ckpt = Checkpoint::load(&root.join("out/last.ckpt")).unwrap();
    for p in ckpt.store.params_mut().iter_mut().filter(|p| p.name.starts_with("head.")) {
        p.value = Tensor::zeros(p.value.shape());
    }
    let zeroed = root.join("zeroed.ckpt");
    ckpt.save(&zeroed).unwrap();
    ok(mixseg(&["eval", "--config", cfg, "--checkpoint", zeroed.to_str().unwrap(), "--threshold", "0.5"]));
    let results = std::fs::read_to_string(root.join("out/results.csv")).unwrap();
    let fields: Vec<f64> = results.lines().nth(1).unwrap().split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields[1], 1.0, "SE");
    assert_eq!(fields[2], 0.0, "SP");
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, SKIN);
    let cfg = cfg.to_str().unwrap();

    assert_eq!(mixseg(&["train", "--config", cfg, "--no-such-key", "1"]).status.code(), Some(1));
    assert_eq!(mixseg(&["train", "--config", cfg, "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(mixseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mixseg(&["prepare", "--config", cfg]).status.code(), Some(2), "missing data directory");
    assert_eq!(mixseg(&["eval", "--config", cfg]).status.code(), Some(2), "nothing prepared");

    let faulty = mixseg(&["gradcheck", "--seeds", "2", "--skip-architectures", "--fault", "relu"]);
    assert_eq!(faulty.status.code(), Some(3));
    assert!(stdout(&faulty).contains("FAIL"));
    let clean = ok(mixseg(&["gradcheck", "--seeds", "2", "--skip-architectures"]));
    assert!(!clean.contains("FAIL"), "{clean}");
    assert_eq!(mixseg(&["--help"]).status.code(), Some(0));
}
