use std::path::Path;
use std::process::{Command, Output};

use glam_core::attention::{Checkpoint, GlamParameters};
use glam_core::pattern::parse_heatmap_csv;
use glam_core::synthdata::Dataset;
use serde_json::Value;

fn glam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glam"))
        .args(args)
        .env("GLAM_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_data(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "gen-data",
        "--categories",
        "2",
        "--pairs",
        "10",
        "--test-pairs",
        "4",
        "--n-keypoints",
        "5",
        "--feat-dim",
        "8",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    let o = glam(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const TINY_NET: [&str; 6] = ["--layers", "1", "--heads", "2", "--dim", "8"];

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(&TINY_NET);
    args.extend_from_slice(extra);
    glam(&args)
}

#[test]
fn gen_data_writes_requested_pairs() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let train = Dataset::load(&dir.path().join("train.txt")).unwrap();
    assert_eq!(train.samples.len(), 20);
    assert_eq!(train.categories.len(), 2);
    assert_eq!(
        Dataset::load(&dir.path().join("test.txt"))
            .unwrap()
            .samples
            .len(),
        8
    );
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["flags"]["pairs"], 10);
    assert_eq!(
        manifest["resolved"]["train_generator"]["pairs_per_category"],
        10
    );
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_data(a.path(), &["--seed", "7", "--dropout", "0.2"]);
    small_data(b.path(), &["--seed", "7", "--dropout", "0.2"]);
    for f in ["train.txt", "test.txt"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
}

#[test]
fn gen_data_without_out_is_a_usage_error() {
    assert_eq!(code(&glam(&["gen-data", "--pairs", "3"])), 2);
    assert_eq!(
        code(&glam(&[
            "gen-data",
            "--dropout",
            "1.5",
            "--out",
            "/tmp/never"
        ])),
        2
    );
}

#[test]
fn zero_epochs_keeps_initialization() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let out = dir.path().join("run");
    let o = train_tiny(dir.path(), &out, &["--epochs", "0", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!(ck.params, GlamParameters::init(&ck.config, 3).unwrap());
    for f in ["report.csv", "timing.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn disabling_both_attentions_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let o = train_tiny(
        dir.path(),
        &dir.path().join("run"),
        &["--no-sal", "--no-cal"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let out = dir.path().join("run");
    let o = glam(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dim",
        "16",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--dim 8"), "{}", stderr(&o));
}

#[test]
fn training_is_reproducible_and_eval_matches() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &["--noise", "0.1"]);
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for r in [&r1, &r2] {
        let o = train_tiny(dir.path(), r, &["--epochs", "3", "--lr", "0.01"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["checkpoint.json", "report.csv"] {
        let x = std::fs::read(r1.join(f)).unwrap();
        assert!(
            x == std::fs::read(r2.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    let report = std::fs::read_to_string(r1.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    assert!(report.starts_with("epoch,loss,accuracy\n"));
}

#[test]
fn overfit_one_pair_then_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = glam(&[
        "gen-data",
        "--categories",
        "1",
        "--pairs",
        "1",
        "--test-pairs",
        "1",
        "--n-keypoints",
        "5",
        "--feat-dim",
        "8",
        "--noise",
        "0.1",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0);
    let run = dir.path().join("run");
    let o = train_tiny(dir.path(), &run, &["--epochs", "50", "--lr", "0.01"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ev = dir.path().join("eval");
    let o = glam(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--data",
        dir.path().join("train.txt").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(
        metrics.lines().last().unwrap().starts_with("mean,1,1.0"),
        "{metrics}"
    );
}

#[test]
fn eval_ignores_sample_order() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let run = dir.path().join("run");
    assert_eq!(code(&train_tiny(dir.path(), &run, &["--epochs", "1"])), 0);
    let mut data = Dataset::load(&dir.path().join("test.txt")).unwrap();
    data.samples.reverse();
    let reversed = dir.path().join("reversed.txt");
    data.save(&reversed).unwrap();
    let mut means = Vec::new();
    for (i, d) in [dir.path().join("test.txt"), reversed].iter().enumerate() {
        let ev = dir.path().join(format!("eval{i}"));
        let o = glam(&[
            "eval",
            "--checkpoint",
            run.join("checkpoint.json").to_str().unwrap(),
            "--data",
            d.to_str().unwrap(),
            "--out",
            ev.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
        means.push(m.lines().last().unwrap().to_string());
    }
    assert_eq!(means[0], means[1]);
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let data = dir.path().join("test.txt");
    let missing = glam(&[
        "eval",
        "--checkpoint",
        dir.path().join("nope.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 1);

    let run = dir.path().join("run");
    assert_eq!(code(&train_tiny(dir.path(), &run, &["--epochs", "0"])), 0);
    let path = run.join("checkpoint.json");
    let mut ck: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let entry = ck["params"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|p| p["name"] == "layer0.cal.mixer")
        .unwrap();
    entry["shape"] = serde_json::json!([1, 1]);
    entry["values"] = serde_json::json!([0.0]);
    std::fs::write(&path, ck.to_string()).unwrap();
    let o = glam(&[
        "eval",
        "--checkpoint",
        path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("layer0.cal.mixer"), "{}", stderr(&o));
}

#[test]
fn extract_pattern_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let run = dir.path().join("run");
    assert_eq!(code(&train_tiny(dir.path(), &run, &["--epochs", "1"])), 0);
    let pat = dir.path().join("pattern");
    let o = glam(&[
        "extract-pattern",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--data",
        dir.path().join("train.txt").to_str().unwrap(),
        "--out",
        pat.to_str().unwrap(),
        "--keep-fraction",
        "1.0",
        "--null-trials",
        "50",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for c in ["cat0", "cat1"] {
        assert!(stdout.contains(c), "{stdout}");
        let raw = std::fs::read_to_string(pat.join(format!("{c}_raw.csv"))).unwrap();
        let kept = std::fs::read_to_string(pat.join(format!("{c}.csv"))).unwrap();
        assert_eq!(raw, kept, "keep fraction 1 must not filter");
        let (labels, m) = parse_heatmap_csv(&raw, "raw").unwrap();
        assert_eq!(labels.len(), 5);
        for i in 0..5 {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        }
        assert!(pat.join(format!("{c}.pgm")).exists());
    }
    let recovery = std::fs::read_to_string(pat.join("recovery.csv")).unwrap();
    assert_eq!(recovery.lines().count(), 3);
    assert!(recovery.starts_with("category,pairs,recovery_score,null_p95,above_null"));
}

#[test]
fn extract_pattern_needs_self_attention() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), &[]);
    let run = dir.path().join("run");
    assert_eq!(
        code(&train_tiny(
            dir.path(),
            &run,
            &["--epochs", "0", "--no-sal"]
        )),
        0
    );
    let o = glam(&[
        "extract-pattern",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--data",
        dir.path().join("train.txt").to_str().unwrap(),
        "--out",
        dir.path().join("p").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_by_default() {
    let o = glam(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(stdout.contains("encoder") && stdout.contains("layer0.sal") && stdout.contains("PASS"));
    assert_eq!(
        stdout,
        String::from_utf8_lossy(&glam(&["gradcheck"]).stdout)
    );
}

#[test]
fn gradcheck_impossible_tolerance_fails() {
    let o = glam(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("gradient mismatch"), "{}", stderr(&o));
}
