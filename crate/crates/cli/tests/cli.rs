use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ppcreg::io::{load_volume, read_pose, SAMPLES_HEADER, SUMMARY_HEADER};
use tempfile::tempdir;

fn ppcreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppcreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = ppcreg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SPHERE_PAIR: &str = "matcher = \"oracle\"\n[phantom]\npreset = \"sphere_pair\"\n";

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn summary_row(path: &Path, row: usize) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().nth(row).unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn phantom_presets() {
    let dir = tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["phantom", "--preset", "sphere", "--out", out]);
    let v = load_volume(&dir.path().join("phantom.json")).unwrap();
    assert_eq!(v.dims(), [64; 3]);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["phantom", "--preset", "vertebra", "--seed", "7", "--out", d.to_str().unwrap()]);
    }
    for f in ["phantom.json", "phantom.raw"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }

    let bad = ppcreg(&["phantom", "--preset", "teapot", "--out", out]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("teapot"));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(ppcreg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ppcreg(&["eval-update", "--matcher", "psychic"]).status.code(), Some(2));
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "[sampling]\nmtre_range = [5.0, 1.0]\n");
    assert_eq!(ppcreg(&["sample-poses", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "unknown_key = 3\n");
    assert_eq!(ppcreg(&["sample-poses", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(ppcreg(&["sample-poses", "--config", "/nonexistent/config.toml"]).status.code(), Some(2));
}

#[test]
fn render_writes_drr_and_preview() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SPHERE_PAIR);
    let out = dir.path().join("render");
    ok(&["render", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let pgm = fs::read(out.join("drr.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5 256 256 65535\n"));
    let img = ppcreg::io::load_image(&out.join("drr.json")).unwrap();
    assert!(img.data().iter().any(|&x| x > 0.0));
    read_pose(&out.join("pose.json")).unwrap();
}

#[test]
fn register_oracle_converges() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SPHERE_PAIR);
    let out = dir.path().join("reg");
    ok(&["register", "--config", &cfg, "--out", out.to_str().unwrap(), "--initial-mtre", "20", "--overlay"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    let trace: Vec<f64> = report["mtre_trace"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((trace[0] - 20.0).abs() < 0.1);
    assert!(*trace.last().unwrap() < 0.1, "{trace:?}");
    read_pose(&out.join("final_pose.json")).unwrap();
    assert!(fs::read(out.join("overlay.pgm")).unwrap().starts_with(b"P5 256 256 65535\n"));

    let one = dir.path().join("one");
    ok(&["register", "--config", &cfg, "--out", one.to_str().unwrap(), "--max-iterations", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(one.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["diagnostics"].as_array().unwrap().len(), 1);
    assert_eq!(report["poses"].as_array().unwrap().len(), 2);
}

#[test]
fn register_from_files_with_image_matcher() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "[phantom]\npreset = \"sphere_pair\"\n");
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    ok(&["phantom", "--config", &cfg, "--out", &d("vol")]);
    ok(&["render", "--config", &cfg, "--out", &d("flr")]);
    ok(&["register", "--config", &cfg, "--out", &d("init"), "--max-iterations", "1", "--initial-mtre", "5"]);
    ok(&[
        "register",
        "--config",
        &cfg,
        "--out",
        &d("reg"),
        "--volume",
        &d("vol/phantom.json"),
        "--fluoro",
        &d("flr/drr.json"),
        "--t-init",
        &d("init/initial_pose.json"),
        "--max-iterations",
        "3",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("reg/report.json")).unwrap()).unwrap();
    // Without a ground truth the report carries no error trace.
    assert!(report["mtre_trace"].as_array().unwrap().is_empty());
    assert!(!report["diagnostics"].as_array().unwrap().is_empty());

    let oracle = ppcreg(&["register", "--config", &cfg, "--out", &d("x"), "--fluoro", &d("flr/drr.json"), "--matcher", "oracle", "--t-init", &d("init/initial_pose.json")]);
    assert_eq!(oracle.status.code(), Some(2));
}

#[test]
fn missing_volume_is_a_runtime_error() {
    let dir = tempdir().unwrap();
    let out = ppcreg(&["register", "--volume", "/nonexistent/vol.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/vol.json"));
}

#[test]
fn sample_poses_records() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), SPHERE_PAIR);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["sample-poses", "--config", &cfg, "--count", "10", "--seed", "1", "--out", d.to_str().unwrap()]);
    }
    let text = fs::read_to_string(a.join("poses.jsonl")).unwrap();
    assert_eq!(text, fs::read_to_string(b.join("poses.jsonl")).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["sample_id"], i);
        let (target, achieved) = (v["target_mtre"].as_f64().unwrap(), v["initial_mtre"].as_f64().unwrap());
        assert!((0.0..45.0).contains(&target));
        assert!((target - achieved).abs() <= 0.1);
        ppcreg::io::pose_from_value(&v["t_init"], Path::new(line)).unwrap();
    }

    let empty = dir.path().join("empty");
    ok(&["sample-poses", "--config", &cfg, "--count", "0", "--out", empty.to_str().unwrap()]);
    assert_eq!(fs::read(empty.join("poses.jsonl")).unwrap().len(), 0);
}

#[test]
fn eval_update_oracle_and_image() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "[phantom]\npreset = \"vertebra\"\n");
    let oracle = dir.path().join("oracle");
    ok(&["eval-update", "--config", &cfg, "--matcher", "oracle", "--count", "100", "--out", oracle.to_str().unwrap()]);
    let text = fs::read_to_string(oracle.join("summary.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), SUMMARY_HEADER);
    let row = summary_row(&oracle.join("summary.csv"), 2);
    assert_eq!(row[0], "ppc_oracle");
    assert!(row[6].parse::<f64>().unwrap() >= 0.5, "{row:?}");
    let samples = fs::read_to_string(oracle.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().next().unwrap(), SAMPLES_HEADER);
    let ids = csv_column(&oracle.join("samples.csv"), "sample_id");
    assert_eq!(ids, (0..100).map(f64::from).collect::<Vec<_>>());

    let cfg = write_config(dir.path(), "[phantom]\npreset = \"sphere_pair\"\n");
    let image = dir.path().join("image");
    ok(&["eval-update", "--config", &cfg, "--matcher", "image", "--count", "100", "--out", image.to_str().unwrap()]);
    let row = summary_row(&image.join("summary.csv"), 2);
    assert_eq!(row[0], "ppc_image");
    assert!(row[6].parse::<f64>().unwrap() > 0.0, "{row:?}");
}

#[test]
fn initial_errors_are_uniform() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "matcher = \"oracle\"\n[phantom]\npreset = \"sphere\"\n[sampling]\ncount = 1000\nseed = 11\n");
    let out = dir.path().join("ks");
    ok(&["eval-update", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let mut before = csv_column(&out.join("samples.csv"), "mtre_before");
    before.sort_by(f64::total_cmp);
    let n = before.len() as f64;
    let ks = before
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = (x / 45.0).clamp(0.0, 1.0);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.1, "KS statistic {ks}");
}
