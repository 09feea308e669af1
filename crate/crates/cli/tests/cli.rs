use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dinecap::capest::EstimateReport;
use dinecap::io::{read_curve_csv, read_json, read_trajectory_csv, write_trajectory_csv};
use dinecap::nn::RngStream;
use dinecap::nn::Tensor;

const TINY_TRAIN: &str = r#"
[train]
batch_size = 8
seq_len = 8
iterations = 4
warmup_steps = 3
dine_steps_per_ndt = 1
eval_samples = 100000
eval_chunk = 4096
dine_learning_rate = 0.003
ndt_learning_rate = 0.003
dine_arch = { hidden = 4, dense = 4 }
ndt_arch = { hidden = 4, dense = 4 }
"#;

fn columns(rows: usize, mut draw: impl FnMut() -> f64) -> (Tensor, Tensor) {
    let x = Tensor::from_shape_fn((rows, 1), |_| draw());
    let y = Tensor::from_shape_fn((rows, 1), |_| draw());
    (x, y)
}

fn dinecap(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dinecap"))
        .args(args)
        .env("DINECAP_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn baseline_json(args: &[&str]) -> serde_json::Value {
    let dir = tempfile::tempdir().unwrap();
    let mut full = vec!["baseline"];
    full.extend_from_slice(args);
    let out = dinecap(&full, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(&stdout(&out)).unwrap()
}

#[test]
fn baseline_prints_expected_json() {
    let v = baseline_json(&["--family", "awgn", "--power", "1"]);
    assert!((v["capacity_nats"].as_f64().unwrap() - 0.5 * 2f64.ln()).abs() < 1e-12);
    assert!((v["capacity_bits"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(v["family"], "awgn");
    let v = baseline_json(&["--family", "awgn", "--power", "3"]);
    assert!((v["capacity_nats"].as_f64().unwrap() - 2f64.ln()).abs() < 1e-12);
    let flat = baseline_json(&["--family", "ma1", "--alpha", "0", "--power", "1"]);
    assert!((flat["capacity_nats"].as_f64().unwrap() - 0.5 * 2f64.ln()).abs() < 1e-8);
    let fb = baseline_json(&["--family", "ma1", "--alpha", "-0.5", "--power", "1", "--feedback"]);
    assert_eq!(fb["diagnostics"]["gate_trusted"], true);
    assert!(fb["capacity_nats"].as_f64().unwrap() > fb["diagnostics"]["feed_forward_nats"].as_f64().unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 6] = [
        &["capacity", "--family", "awgn"],
        &["capacity", "--family", "ma1", "--power", "1"],
        &["capacity", "--family", "awgn", "--noise-var", "0", "--power", "1"],
        &["grad-check", "bogus"],
        &["sweep", "--family", "awgn"],
        &["baseline", "--power", "1"],
    ];
    for args in cases {
        let out = dinecap(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn config_with_unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nbatch_sise = 3\n");
    let out = dinecap(&["--config", cfg.to_str().unwrap(), "baseline", "--family", "awgn", "--power", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_exit_status_follows_result() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dinecap(&["grad-check", "nn"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("all checks passed"));
    let fail = dinecap(&["grad-check", "nn", "--tolerance", "0"], dir.path());
    assert_eq!(fail.status.code(), Some(1));
}

#[test]
fn empty_or_malformed_csv_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = dinecap(&["di-estimate", empty.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x0,y0\n1,2\n3,x\n").unwrap();
    let out = dinecap(&["di-estimate", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 3"));
}

#[test]
fn simulate_writes_a_readable_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ma1.csv");
    let out = dinecap(
        &["simulate", "--family", "ma1", "--alpha", "0.5", "--power", "1", "--rows", "500", "--seed", "3", "--output", path.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success());
    let (x, y) = read_trajectory_csv(&path).unwrap();
    assert_eq!((x.nrows(), x.ncols(), y.ncols()), (500, 1, 1));
}

#[test]
fn di_estimate_on_independent_columns_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(12);
    let rows = 40_000;
    let (x, y) = columns(rows, || rng.normal());
    let path = dir.path().join("independent.csv");
    write_trajectory_csv(&path, &x, &y).unwrap();
    let cfg = write_config(
        dir.path(),
        "[dine]\nbatch_size = 32\nseq_len = 16\niterations = 400\nlearning_rate = 0.003\narch = { hidden = 8, dense = 8 }\n",
    );
    let out = dinecap(&["--config", cfg.to_str().unwrap(), "di-estimate", path.to_str().unwrap(), "--seed", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = read_json(&dir.path().join("independent.dine.json")).unwrap();
    let est = summary["estimate_nats"].as_f64().unwrap();
    assert!(est.abs() <= 0.02, "estimate {est}");
    assert_eq!(read_curve_csv(&dir.path().join("independent.dine.curve.csv")).unwrap().len(), 400);
}

#[test]
fn di_estimate_rejects_too_short_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngStream::new(1);
    let (x, y) = columns(100, || rng.normal());
    let path = dir.path().join("short.csv");
    write_trajectory_csv(&path, &x, &y).unwrap();
    let out = dinecap(&["di-estimate", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn capacity_writes_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_TRAIN);
    let args = ["--config", cfg.to_str().unwrap(), "capacity", "--family", "ma1", "--alpha", "0.5", "--power", "1", "--feedback", "--seed", "5"];
    let first = dinecap(&args, dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("capacity_nats"));
    let stem = "ma1_a0.5_p1_fb_seed5";
    let report_path = dir.path().join(format!("{stem}.report.json"));
    let a: EstimateReport = read_json(&report_path).unwrap();
    assert!(dir.path().join(format!("{stem}.ndt.bin")).exists());
    let ndt = dinecap::io::load_ndt(&dir.path().join(format!("{stem}.ndt.bin"))).unwrap();
    assert!(ndt.feedback);
    assert_eq!(read_curve_csv(&dir.path().join(format!("{stem}.curve.csv"))).unwrap(), a.curve);

    let second = dinecap(&args, dir.path());
    assert!(second.status.success());
    let b: EstimateReport = read_json(&report_path).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    assert!(a.config.feedback && a.config.seed == 5);
}

#[test]
fn sweep_rows_match_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_TRAIN);
    let c = cfg.to_str().unwrap();
    let out = dinecap(&["--config", c, "sweep", "--family", "awgn", "--powers", "0.5,2", "--seed", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("awgn_ff_seed2_sweep.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(table.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "0.5");

    let single_dir = tempfile::tempdir().unwrap();
    let single = dinecap(&["--config", c, "capacity", "--family", "awgn", "--power", "2", "--seed", "2"], single_dir.path());
    assert!(single.status.success());
    let r: EstimateReport = read_json(&single_dir.path().join("awgn_n1_p2_ff_seed2.report.json")).unwrap();
    let swept: f64 = rows[1][1].parse().unwrap();
    assert_eq!(swept, r.capacity_nats);
}
