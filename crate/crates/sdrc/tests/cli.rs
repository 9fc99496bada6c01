use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "layers=2",
    "dim=16",
    "episodes=20",
    "eval_episodes=3",
    "finetune_steps=5",
    "source.classes=4",
    "source.samples_per_class=4",
    "target.classes=3",
    "target.samples_per_class=4",
    "cka_images=6",
];

fn sdrc(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdrc"));
    cmd.arg("--out").arg(out);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = sdrc(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let o = Command::new(env!("CARGO_BIN_EXE_sdrc")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["train", "--nope"], &["--set", "bogus=1", "train"], &["--set", "lr=0", "train"]] {
        let o = sdrc(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let o = Command::new(env!("CARGO_BIN_EXE_sdrc")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn pipeline_is_deterministic() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path();
            ok(d, &["--seed", "3", "gen-data"]);
            ok(d, &["--seed", "3", "train"]);
            ok(d, &["--seed", "3", "finetune-eval"]);
            let eval = std::fs::read_to_string(d.join("eval.json")).unwrap();
            let ckpt = std::fs::read(d.join("model.sdrc")).unwrap();
            let data = std::fs::read(d.join("target.epds")).unwrap();
            (dir, eval, ckpt, data)
        })
        .collect();
    assert_eq!(runs[0].1, runs[1].1);
    assert_eq!(runs[0].2, runs[1].2);
    assert_eq!(runs[0].3, runs[1].3);

    let d = runs[0].0.path();
    let eval = json(&d.join("eval.json"));
    assert_eq!(eval["command"], "finetune-eval");
    assert_eq!(eval["seed"], 3);
    assert_eq!(eval["config"]["layers"], "2");
    assert_eq!(eval["per_episode"].as_array().unwrap().len(), 3);
    let m = eval["mean_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert!(csv.starts_with("episode,class_id,miou,iou_fg,iou_bg,skipped\n"));
    assert_eq!(csv.lines().count(), 4);
    let log = std::fs::read_to_string(d.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 21);

    // rerun from the results JSON alone, into a fresh directory
    let again = tempfile::tempdir().unwrap();
    let a = again.path();
    let cfg = d.join("eval.json");
    for cmd in ["gen-data", "train", "finetune-eval"] {
        let o = Command::new(env!("CARGO_BIN_EXE_sdrc"))
            .arg("--out")
            .arg(a)
            .arg("--config")
            .arg(&cfg)
            .arg(cmd)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read_to_string(a.join("eval.json")).unwrap(), runs[0].1);
}

#[test]
fn analysis_commands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data"]);
    ok(d, &["train"]);
    let src = d.join("source.epds");
    ok(d, &["analyze-cka", "--target", src.to_str().unwrap()]);

    let csv = std::fs::read_to_string(d.join("cka_matrix.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "source_layer,target_0,target_1");
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], i.to_string());
        let diag: f64 = cells[1 + i].parse().unwrap();
        assert!((diag - 1.0).abs() < 1e-9, "row {i}: {diag}");
    }
    let cka = json(&d.join("cka.json"));
    assert_eq!(cka["dims"], serde_json::json!([2, 2]));
    assert!((cka["aggregates"]["layerwise_avg"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    ok(d, &["decompose", "--index", "2"]);
    let csv = std::fs::read_to_string(d.join("decompose.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    let dec = json(&d.join("decompose.json"));
    assert!(dec["reconstruction_max_abs_error"].as_f64().unwrap() < 1e-4);

    ok(d, &["export-heatmap", "--episode", "1"]);
    let scores = std::fs::read_to_string(d.join("scores.csv")).unwrap();
    // 2 components, 4 pairs, 2 classes, 8 rows each
    assert_eq!(scores.lines().count(), 1 + 4 * 2 * 8);
    let afw = std::fs::read_to_string(d.join("afw.csv")).unwrap();
    let rows: Vec<&str> = afw.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1].split(',').count(), 1 + 4);
    let pred = std::fs::read_to_string(d.join("prediction.csv")).unwrap();
    assert_eq!(pred.lines().count(), 1 + 32 * 32);

    // the exported episode matches the one finetune-eval scores at that index
    ok(d, &["finetune-eval"]);
    let eval = json(&d.join("eval.json"));
    let heat = json(&d.join("heatmap.json"));
    assert_eq!(heat["class_id"], eval["per_episode"][1]["class_id"]);
    assert_eq!(heat["miou"], eval["per_episode"][1]["miou"]);
}

#[test]
fn corrupt_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--domain", "target"]);
    assert!(!d.join("source.epds").exists());

    std::fs::write(d.join("model.sdrc"), b"SDRC\x01\x00").unwrap();
    let o = sdrc(d, &["finetune-eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));

    let mut bytes = std::fs::read(d.join("target.epds")).unwrap();
    bytes[0] = b'X';
    std::fs::write(d.join("source.epds"), &bytes).unwrap();
    let o = sdrc(d, &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    let o = sdrc(d, &["train", "--data", d.join("missing.epds").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
