use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_advstereo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

fn set(key: &str, value: impl AsRef<str>) -> String {
    format!("{key}={}", value.as_ref())
}

fn synth(root: &Path, count: usize) -> PathBuf {
    let data = root.join("data");
    let n = set("synth.count", count.to_string());
    ok(&["synth", "--out", p(&data), "--set", &n, "--set", "synth.height=32", "--set", "synth.width=32"]);
    data
}

fn quick_train(data: &Path, out: &Path, epochs: usize) {
    let d = set("data.dir", p(data));
    let e = set("train.epochs", epochs.to_string());
    ok(&["train", "--out", p(out), "--set", &d, "--set", &e, "--set", "train.warmup_epochs=1"]);
}

fn metrics_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "config.txt" {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ground_truth_confidence_reaches_optimal_auc() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 3);
    let out = tmp.path().join("eval");
    // WTA disparities and ground truth are integers, so Q* at rho 0.9 marks
    // exactly the pixels within a sub-pixel threshold
    let d = set("data.dir", p(&data));
    ok(&[
        "eval", "--out", p(&out), "--set", &d, "--set", "pred.source=wta",
        "--set", "pred.confidence=ground_truth", "--set", "eval.threshold_px=0.5",
    ]);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("image,AUC,optimal_AUC,MSE,BMP1,BMP3,BMP1_refined,BMP3_refined\n"));
    let rows = metrics_rows(&csv);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3][0], "mean");
    for r in &rows {
        let (auc, best): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!((auc - best).abs() <= 1e-12, "{r:?}");
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0, "Q* matches itself");
    }
    for name in ["0000.csv", "0000_optimal.csv", "0000.png"] {
        assert!(out.join("curves").join(name).exists(), "{name}");
    }
    assert!(out.join("summary.txt").exists());
}

#[test]
fn inference_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 2);
    let run_dir = tmp.path().join("run");
    quick_train(&data, &run_dir, 2);
    let d = set("data.dir", p(&data));
    let m = set("model.checkpoint", p(&run_dir));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["infer", "--out", p(out), "--set", &d, "--set", &m]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(n, _)| n.ends_with("disparity.pfm")));
    assert!(fa.iter().any(|(n, _)| n.ends_with("weight_img.pfm")));
    assert_eq!(fa, fb);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 2);
    let (straight, resumed) = (tmp.path().join("straight"), tmp.path().join("resumed"));
    quick_train(&data, &straight, 3);
    quick_train(&data, &resumed, 2);
    quick_train(&data, &resumed, 3);
    assert_eq!(files(&straight), files(&resumed));
    let epochs = fs::read_to_string(straight.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 4);
}

#[test]
fn effective_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--out", p(&a), "--seed", "11", "--set", "synth.count=2", "--set", "synth.layers=1"]);
    let cfg = a.join("config.txt");
    let text = fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("seed=11\n"));
    assert!(text.contains("synth.layers=1\n"));
    ok(&["synth", "--out", p(&b), "--config", p(&cfg)]);
    assert_eq!(fs::read_to_string(b.join("config.txt")).unwrap(), text);
    assert_eq!(files(&a), files(&b));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["synth", "--out", p(tmp.path()), "--set", "synth.colour=red"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth.colour"));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "# comment\nseed=1\n\nsynth.bogus=2\n").unwrap();
    let o = run(&["synth", "--out", p(tmp.path()), "--config", p(&cfg)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.cfg:4") && err.contains("synth.bogus"), "{err}");

    let o = run(&["synth", "--out", p(tmp.path()), "--set", "synth.count=-1"]);
    assert!(!o.status.success());
}

#[test]
fn failures_leave_a_marker_that_success_clears() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let missing = set("data.dir", p(&tmp.path().join("missing")));
    let o = run(&["eval", "--out", p(&out), "--set", &missing]);
    assert!(!o.status.success());
    assert!(out.join("FAILED").exists());
    ok(&["synth", "--out", p(&out), "--set", "synth.count=1"]);
    assert!(!out.join("FAILED").exists());
}

#[test]
fn gradcheck_passes() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(&["gradcheck", "--out", p(tmp.path())]);
    assert!(stdout.contains(" 0 failed"), "{stdout}");
    assert!(!stdout.contains("FAIL "));
    assert!(tmp.path().join("gradcheck.txt").exists());
}

#[test]
fn refine_writes_maps() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 1);
    let out = tmp.path().join("ref");
    let d = set("data.dir", p(&data));
    ok(&[
        "refine", "--out", p(&out), "--set", &d, "--set", "pred.source=wta",
        "--set", "pred.confidence=ground_truth",
    ]);
    for f in ["refined.pfm", "gcp.png", "cg.txt"] {
        assert!(out.join("0000").join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(out.join("0000/cg.txt")).unwrap().contains("converged=true"));
}

#[test]
fn learned_confidence_requires_a_source_that_has_one() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 1);
    let d = set("data.dir", p(&data));
    let o = run(&["eval", "--out", p(&tmp.path().join("e")), "--set", &d, "--set", "pred.source=wta"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("pred.confidence"));
}
