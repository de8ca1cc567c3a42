//! Runs the built binary against tiny IDX datasets in a temp directory.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reactnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reactnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    let prefix = format!("{key}=");
    text.split_whitespace()
        .filter_map(|w| w.strip_prefix(&prefix))
        .last()
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

/// Writes an MNIST-format split where class k is a bright 6x6 square at a
/// class-specific position.
fn write_split(dir: &Path, prefix: &str, n: usize) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let k = i % 10;
        let (py, px) = ((k / 4) * 9 + 1, (k % 4) * 6 + 2);
        labels.push(k as u8);
        for y in 0..28 {
            for x in 0..28 {
                let inside = (py..py + 6).contains(&y) && (px..px + 6).contains(&x);
                images.push(if inside { 230 } else { ((x * 7 + y * 3 + i) % 40) as u8 });
            }
        }
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn tiny_mnist(dir: &Path) {
    write_split(dir, "train", 40);
    write_split(dir, "t10k", 20);
}

#[test]
fn missing_dataset_path_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = reactnet(&["train", "--steps", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let missing = tmp.path().join("nowhere");
    let o = reactnet(&["train", "--data-dir", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn bad_settings_are_usage_errors() {
    for args in [
        &["train", "--variant", "reactnet-z", "--data-dir", "."][..],
        &["train", "--set", "steps", "--data-dir", "."][..],
        &["train", "--loss", "hinge", "--data-dir", "."][..],
        &["count-ops", "--variant", "nope"][..],
        &["count-ops", "--scale", "huge"][..],
        &["frobnicate"][..],
    ] {
        assert_eq!(reactnet(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn unreadable_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path());
    let bogus = tmp.path().join("bogus.rakt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = reactnet(&["eval", "--checkpoint", bogus.to_str().unwrap(), "--data-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path());
    let out = tmp.path().join("run");
    let o = reactnet(&[
        "train",
        "--data-dir",
        tmp.path().to_str().unwrap(),
        "--steps",
        "0",
        "--loss",
        "ce",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint.rakt").is_file());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,lr,loss,eval_acc");
}

#[test]
fn distillation_run_trains_teacher_then_student_and_logs_monotone_steps() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path());
    let out = tmp.path().join("run");
    let o = reactnet(&[
        "train",
        "--data-dir",
        tmp.path().to_str().unwrap(),
        "--steps",
        "4",
        "--batch-size",
        "8",
        "--set",
        "log_every=1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.rakt", "metrics.csv", "teacher.rakt", "teacher_metrics.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let steps: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=8).collect::<Vec<_>>());
}

#[test]
fn eval_reports_full_accuracy_on_a_memorized_subset() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path());
    let data = tmp.path().to_str().unwrap();
    let out = tmp.path().join("run");
    let o = reactnet(&[
        "train",
        "--data-dir",
        data,
        "--steps",
        "150",
        "--batch-size",
        "10",
        "--lr",
        "5e-3",
        "--loss",
        "ce",
        "--set",
        "train_limit=20",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("checkpoint.rakt");
    let o = reactnet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data-dir", data, "--split", "train", "--limit", "20"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(&stdout(&o), "accuracy"), 1.0);
}

#[test]
fn count_ops_prints_imagenet_scale_totals() {
    let a = stdout(&reactnet(&["count-ops", "--variant", "reactnet-a"]));
    assert_eq!(field(&a, "BOPS"), 4816896000.0);
    assert!((field(&a, "OPS") - 0.87e8).abs() <= 0.03 * 0.87e8);
    let c = stdout(&reactnet(&["count-ops", "--variant", "reactnet-c"]));
    assert!((field(&c, "FLOPS") - 1.40e8).abs() <= 0.03 * 1.40e8);
    assert!((field(&c, "OPS") - 2.14e8).abs() <= 0.03 * 2.14e8);
}

#[test]
fn measured_counts_equal_analytic_counts() {
    let o = stdout(&reactnet(&["count-ops", "--variant", "reactnet-a", "--scale", "desk", "--measure"]));
    let analytic = o.lines().find(|l| l.starts_with("BOPS=")).unwrap();
    let measured = o.lines().find(|l| l.starts_with("MEASURED ")).unwrap();
    assert_eq!(analytic, measured.trim_start_matches("MEASURED "));
}

#[test]
fn grad_check_passes() {
    let o = reactnet(&["grad-check", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.contains("PASS")).count() >= 10, "{text}");
    assert!(!text.lines().any(|l| l.ends_with("FAIL")));
}

#[test]
fn inspect_shows_initial_coefficients_and_writes_histograms() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_mnist(tmp.path());
    let out = tmp.path().join("run");
    let o = reactnet(&[
        "train",
        "--data-dir",
        tmp.path().to_str().unwrap(),
        "--steps",
        "0",
        "--loss",
        "ce",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let hist = tmp.path().join("h.csv");
    let o = reactnet(&[
        "inspect",
        "--checkpoint",
        out.join("checkpoint.rakt").to_str().unwrap(),
        "--histograms",
        hist.to_str().unwrap(),
        "--data-dir",
        tmp.path().to_str().unwrap(),
        "--samples",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("beta"), "{text}");
    let csv = fs::read_to_string(&hist).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("unit,bin_lo,bin_hi,count"));
    assert!(lines.map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum::<u64>() > 0);
}
