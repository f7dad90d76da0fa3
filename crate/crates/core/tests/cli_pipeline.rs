use std::path::Path;
use std::process::{Command, Output};

use weakseg::pnm;

fn weakseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = weakseg(args);
    assert!(
        out.status.success(),
        "weakseg {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn tiny_data(dir: &Path) {
    ok(&[
        "gen-data", "--out", s(dir), "--labels", "3", "--train", "4", "--val", "2", "--test", "2", "--size", "16",
        "--blob-passes", "2", "--seed", "5",
    ]);
}

#[test]
fn exit_codes() {
    assert_eq!(weakseg(&[]).status.code(), Some(2));
    assert_eq!(weakseg(&["no-such-verb"]).status.code(), Some(2));
    assert_eq!(weakseg(&["--help"]).status.code(), Some(0));
    let missing = weakseg(&["gen-data"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--out"));
    let dir = tempfile::tempdir().unwrap();
    let bad = weakseg(&["train-classifier", "--data", s(&dir.path().join("absent")), "--out", s(dir.path())]);
    assert_eq!(bad.status.code(), Some(1));
    let empty = weakseg(&["report", "--run", s(dir.path())]);
    assert_eq!(empty.status.code(), Some(1));
}

#[test]
fn gen_data_is_reproducible_from_its_stamp() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    tiny_data(&a);
    ok(&["gen-data", "--config", s(&a.join("stamp.json")), "--out", s(&b)]);
    for f in ["manifest.json", "images/train/0_0.pgm", "masks/test/2_1.pgm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let stamp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["verb"], "gen-data");
    assert_eq!(stamp["seed"], 5);
}

#[test]
fn classifier_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let run = dir.path().join("clf");
    ok(&[
        "train-classifier", "--data", s(&data), "--c", "2", "--d", "1", "--epochs", "2", "--batch", "4", "--out",
        s(&run),
    ]);
    for f in ["model.wsm", "metrics.csv", "predictions.csv", "confusion.csv", "summary.json", "stamp.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    // Two test samples per label: every confusion row sums to two.
    let confusion = rows(&run.join("confusion.csv"));
    assert_eq!(confusion.len(), 3);
    for r in &confusion {
        assert_eq!(r.iter().map(|v| v.parse::<usize>().unwrap()).sum::<usize>(), 2);
    }

    ok(&["report", "--run", s(&run)]);
    let reported = rows(&run.join("report/confusion.csv"));
    assert_eq!(reported, confusion);
}

#[test]
fn segmenter_run_overlay_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let run = dir.path().join("seg");
    ok(&[
        "train-seg", "--data", s(&data), "--hypothesis", "linear", "--c", "2", "--d", "1", "--epochs", "2", "--batch",
        "4", "--out", s(&run),
    ]);
    let per_label = rows(&run.join("per_label.csv"));
    assert_eq!(per_label.len(), 1 + 3);

    let image = data.join("images/test/1_0.pgm");
    let overlay = dir.path().join("overlay.ppm");
    ok(&["overlay", "--model", s(&run.join("model.wsm")), "--image", s(&image), "--out", s(&overlay)]);
    let bytes = std::fs::read(&overlay).unwrap();
    let header = b"P6\n16 16\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 16 * 16 * 3);

    ok(&["report", "--run", s(&run)]);
    // One regression row per sample, each split and label present.
    let regression = rows(&run.join("report/regression.csv"));
    assert_eq!(regression[0], ["split", "label", "prediction"]);
    assert_eq!(regression.len() - 1, 3 * (4 + 2 + 2));
    for r in &regression[1..] {
        let p: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn overlay_rejects_a_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let run = dir.path().join("clf");
    ok(&[
        "train-classifier", "--data", s(&data), "--c", "2", "--d", "1", "--epochs", "1", "--out", s(&run),
    ]);
    let image = data.join("images/val/0_0.pgm");
    let out = weakseg(&[
        "overlay", "--model", s(&run.join("model.wsm")), "--image", s(&image), "--out", s(&dir.path().join("o.ppm")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(pnm::read_pgm(&image).is_ok());
}

#[test]
fn grid_search_writes_ranked_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let out = dir.path().join("grid");
    ok(&[
        "grid-search", "--data", s(&data), "--task", "seg", "--hypothesis", "linear", "--grid",
        r#"{"c": [2], "d": [1], "lr": [0.0, 0.01]}"#, "--epochs", "2", "--batch", "4", "--out", s(&out),
    ]);
    let table = rows(&out.join("grid.csv"));
    assert_eq!(table[0], ["rank", "cell", "c", "d", "n", "bn", "lr", "status", "metric", "param_count"]);
    assert_eq!(table.len(), 3);
    for r in &table[1..] {
        assert_eq!(r[7], "ok");
        let stamp = out.join("cells").join(&r[1]).join("stamp.json");
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stamp).unwrap()).unwrap();
        assert_eq!(v["verb"], "train-seg");
    }
    let m1: f64 = table[1][8].parse().unwrap();
    let m2: f64 = table[2][8].parse().unwrap();
    assert!(m1 <= m2);
}

#[test]
fn eval_hypotheses_ranks_every_entry() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_data(&data);
    let out = dir.path().join("hyp");
    ok(&[
        "eval-hypotheses", "--data", s(&data), "--hypotheses", "linear,constant:0.5,table:0/1/0", "--c", "2", "--d",
        "1", "--epochs", "2", "--batch", "4", "--out", s(&out),
    ]);
    let mse = rows(&out.join("hypothesis_mse.csv"));
    assert_eq!(mse.len(), 1 + 3 * 3);
    let labels = rows(&out.join("hypothesis_labels.csv"));
    assert_eq!(labels.len(), 1 + 3 * 3);
    let ranking: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("hypothesis_ranking.json")).unwrap()).unwrap();
    let vals: Vec<f64> = ranking["ranking"].as_array().unwrap().iter().map(|e| e["val_mse"].as_f64().unwrap()).collect();
    assert_eq!(vals.len(), 3);
    assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    let constant = ranking["ranking"].as_array().unwrap().iter().find(|e| e["hypothesis"] == "constant:0.5").unwrap();
    assert_eq!(constant["constant"], true);
}
