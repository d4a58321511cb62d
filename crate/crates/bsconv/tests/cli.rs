//! End-to-end tests of the `bsconv` binary: exit codes, file outputs, and
//! the loop from training to weight analysis.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bsconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsconv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn verify_small_passes() {
    let out = bsconv(&["verify", "--trials", "25", "--sizes", "12,12,5,8"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS"));
}

#[test]
fn verify_zero_trials_is_usage_error() {
    let out = bsconv(&["verify", "--trials", "0"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn verify_zero_tolerance_fails_numerically() {
    let out = bsconv(&["verify", "--trials", "5", "--sizes", "8,8,3,6", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = bsconv(&["verify", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn complexity_reports_headline_triple() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{"input":[128,32,32],"layers":[{"kind":"standard_conv","in_channels":128,"out_channels":128,"kernel":3}]}"#,
    )
    .unwrap();
    let out = bsconv(&["complexity", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("147456"), "{text}");
    assert!(text.contains("17536"), "{text}");
    assert!(text.contains("6784"), "{text}");
}

#[test]
fn complexity_empty_layer_list_totals_zero() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(&model, r#"{"input":[3,8,8],"layers":[]}"#).unwrap();
    let out = bsconv(&["complexity", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let line = stdout(&out)
        .lines()
        .find(|l| l.trim_start().starts_with("total"))
        .expect("totals row")
        .to_string();
    let fields: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(fields[1], "0");
    assert_eq!(fields[2], "0");
}

#[test]
fn complexity_invalid_spec_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{"input":[3,8,8],"layers":[{"kind":"standard_conv","out_channels":4,"kernel":3}]}"#,
    )
    .unwrap();
    let out = bsconv(&["complexity", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("in_channels"), "{}", stderr(&out));
}

#[test]
fn complexity_totals_equal_row_sums() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{"input":[3,16,16],"layers":[
            {"kind":"standard_conv","in_channels":3,"out_channels":8,"kernel":3},
            {"kind":"relu"},
            {"kind":"bsconv_u","in_channels":8,"out_channels":12,"kernel":3},
            {"kind":"global_avg_pool"},
            {"kind":"linear","in_channels":12,"out_channels":4}
        ]}"#,
    )
    .unwrap();
    let out = bsconv(&["--out-dir", dir.path().to_str().unwrap(), "complexity", model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("complexity.csv")).unwrap();
    let mut params_sum = 0u64;
    let mut macs_sum = 0u64;
    let mut total_row = None;
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells[0] == "total" {
            total_row = Some((cells[5].parse::<u64>().unwrap(), cells[6].parse::<u64>().unwrap()));
        } else {
            params_sum += cells[5].parse::<u64>().unwrap();
            macs_sum += cells[6].parse::<u64>().unwrap();
        }
    }
    assert_eq!(total_row, Some((params_sum, macs_sum)));
}

fn train_tiny_epochs(dir: &Path, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "--seed",
        "5",
        "--out-dir",
        dir.to_str().unwrap(),
        "train",
        "--per-class",
        "8",
        "--image-size",
        "8",
        "--width",
        "8",
        "--epochs",
        epochs,
    ];
    args.extend_from_slice(extra);
    bsconv(&args)
}

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    train_tiny_epochs(dir, "2", extra)
}

#[test]
fn train_writes_metrics_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--block", "bsconv-u"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,lr,train_loss,train_acc,test_acc,ortho_residual"));
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(dir.path().join("weights.bswt").exists());
}

#[test]
fn train_zero_epochs_writes_init_weights_no_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny_epochs(dir.path(), "0", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "header only: {metrics}");
    assert!(dir.path().join("weights.bswt").exists());
}

#[test]
fn train_runs_are_reproducible() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    assert_eq!(train_tiny(d1.path(), &[]).status.code(), Some(0));
    assert_eq!(train_tiny(d2.path(), &[]).status.code(), Some(0));
    let m1 = fs::read(d1.path().join("metrics.csv")).unwrap();
    let m2 = fs::read(d2.path().join("metrics.csv")).unwrap();
    assert_eq!(m1, m2);
    let w1 = fs::read(d1.path().join("weights.bswt")).unwrap();
    let w2 = fs::read(d2.path().join("weights.bswt")).unwrap();
    assert_eq!(w1, w2);
}

#[test]
fn train_bad_block_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--block", "winograd"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_closes_the_loop_on_trained_blueprint_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--block", "bsconv-u"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let weights = dir.path().join("weights.bswt");
    // layer 2 is the blueprint mixing block; its materialized kernels are
    // rank one per filter, so the mean PC1 ratio is 1 up to float noise
    let out = bsconv(&[
        "analyze",
        weights.to_str().unwrap(),
        "--entry",
        "layer2.materialized",
        "--bins",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let mean: f64 = text
        .lines()
        .find(|l| l.starts_with("summary:"))
        .and_then(|l| l.split("mean_pc1=").nth(1))
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(mean >= 0.9999, "mean PC1 {mean}: {text}");
    assert!(text.contains("bin_lo,bin_hi,count,group"));
}

#[test]
fn analyze_missing_entry_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_tiny(dir.path(), &[]).status.code(), Some(0));
    let weights = dir.path().join("weights.bswt");
    let out = bsconv(&["analyze", weights.to_str().unwrap(), "--entry", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not found"));
}

#[test]
fn analyze_truncated_file_exits_2_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_tiny(dir.path(), &[]).status.code(), Some(0));
    let weights = dir.path().join("weights.bswt");
    let bytes = fs::read(&weights).unwrap();
    let cut = dir.path().join("cut.bswt");
    fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let out = bsconv(&["analyze", cut.to_str().unwrap(), "--entry", "layer0.kernels"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("offset"), "{}", stderr(&out));
}

#[test]
fn bench_smoke_reports_mac_ratio() {
    let out = bsconv(&["bench", "--sizes", "8x8x3x8", "--repeats", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("mac_ratio"));
    // bsconv_u vs standard at 8x8x3x8: (8*8*64 + 8*9*64) / (8*8*9*64)
    let expect = (8.0 * 8.0 + 8.0 * 9.0) / (8.0 * 8.0 * 9.0);
    assert!(text.contains(&format!("{expect:.4}")), "{text}");
}

#[test]
fn bench_zero_repeats_is_usage_error() {
    let out = bsconv(&["bench", "--repeats", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dtype_f64_training_works() {
    let dir = tempfile::tempdir().unwrap();
    let out = bsconv(&[
        "--dtype",
        "f64",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "train",
        "--per-class",
        "4",
        "--image-size",
        "8",
        "--width",
        "6",
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn bad_dtype_is_usage_error() {
    let out = bsconv(&["--dtype", "f16", "verify", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(2));
}
