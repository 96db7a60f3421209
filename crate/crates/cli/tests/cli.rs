use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssni(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssni"))
        .args(args)
        .current_dir(dir)
        .env_remove("SSNI_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const CONFIG: &str = r#"{
    "grid_w": 32, "grid_h": 32, "pixel_pitch": 2.5, "corr_radius_r": 5.0,
    "n_detected": 1000, "n_detected_binning": 4, "eta_d_probe": 0.81,
    "mask": {"kind": "uniform", "alpha": 0.01},
    "n_frames": 20, "global_seed": 5, "k_list": [1, 2, 4, 8]
}"#;

#[test]
fn bounds_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssni(&["bounds", "--alpha", "0.01", "--n", "1000", "--eta", "0.81", "--eta-d", "0.81"], dir.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("u_coh = 0.031464"), "{out}");
    assert!(out.contains("u_uql = 0.003146"), "{out}");
    for name in ["ratio", "subtraction", "optimized", "direct"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{name} missing: {out}");
    }
    // Ratio variance 9.9e-6/0.81 + 2 * 0.99^2 * 0.19 / 1000.
    assert!(out.contains("3.8466e-4"), "{out}");

    let j = ssni(
        &["bounds", "--alpha", "0.01", "--n", "1000", "--eta", "0.81", "--eta-d", "0.81", "--json"],
        dir.path(),
    );
    let doc: serde_json::Value = serde_json::from_slice(&j.stdout).unwrap();
    assert!((doc["u_coh"].as_f64().unwrap() - 0.0314643).abs() < 1e-6);
}

#[test]
fn simulate_is_deterministic_and_records_its_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    for out in ["a.ssni", "b.ssni"] {
        let o = ssni(&["simulate", "--config", "run.json", "-o", out], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a.ssni")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.ssni")).unwrap());
    assert_eq!(&a[..4], b"SSNI");

    let sidecar: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a.ssni.json")).unwrap()).unwrap();
    assert_eq!(sidecar["global_seed"], 5);
    assert_eq!(sidecar["n_frames"], 20);

    // Under a different thread count the bytes do not change.
    let o = Command::new(env!("CARGO_BIN_EXE_ssni"))
        .args(["simulate", "--config", "run.json", "-o", "c.ssni"])
        .current_dir(dir.path())
        .env("SSNI_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(a, fs::read(dir.path().join("c.ssni")).unwrap());
}

#[test]
fn calibrate_estimate_and_sweep_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.json"), CONFIG).unwrap();
    assert_eq!(code(&ssni(&["simulate", "--config", "run.json", "-o", "sample.ssni"], d)), 0);
    assert_eq!(
        code(&ssni(&["simulate", "--config", "run.json", "--no-sample", "--seed", "6", "-o", "cal.ssni"], d)),
        0
    );
    let o = ssni(&["calibrate", "cal.ssni", "-k", "4", "-o", "cal4.json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ssni(
        &["estimate", "sample.ssni", "--calibration", "cal4.json", "--kind", "SUB", "--filter", "3", "-o", "map"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.join("map.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(d.join("map.pgm").exists() && d.join("map.pgm.json").exists() && d.join("map.csv.json").exists());

    let o = ssni(
        &["sweep", "--calibration-stack", "cal.ssni", "--sample-stack", "sample.ssni", "--k-list", "1,2,4,8", "-o", "sw"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(d.join("sw.csv")).unwrap();
    assert!(table.starts_with("binning_k,d_object,x,nrf_measured"));
    assert_eq!(table.lines().count(), 5);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(d.join("sw.json")).unwrap()).unwrap();
    assert_eq!(doc["result"]["rows"].as_array().unwrap().len(), 4);
    assert_eq!(doc["result"]["sample_seed"], 5);
}

#[test]
fn simulate_accepts_a_mask_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.json"), CONFIG).unwrap();
    let row = vec!["0.02"; 32].join(",");
    fs::write(d.join("mask.csv"), format!("{}\n", vec![row; 32].join("\n"))).unwrap();
    let o = ssni(&["simulate", "--config", "run.json", "--mask", "mask.csv", "-o", "m.ssni"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(d.join("small.csv"), "0.1,0.2\n0.3,0.4\n").unwrap();
    let o = ssni(&["simulate", "--config", "run.json", "--mask", "small.csv", "-o", "m.ssni"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn image_writes_the_panel_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = ssni(
        &["image", "--alpha", "0.01", "--frames", "4", "--calibration-frames", "3", "--grid", "48", "--x", "1,2,3", "-o", "phi"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let phi = dir.path().join("phi");
    let maps = fs::read_dir(&phi)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("map_"))
        .count();
    assert_eq!(maps, 9);
    assert!(phi.join("mask.csv").exists());
    assert!(phi.join("demo.json").exists());
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Configuration problems.
    fs::write(d.join("bad.json"), r#"{"grid_w": 4, "unknown": 1}"#).unwrap();
    assert_eq!(code(&ssni(&["simulate", "--config", "bad.json", "-o", "x.ssni"], d)), 2);
    fs::write(d.join("eta.json"), CONFIG.replace("0.81", "1.5")).unwrap();
    assert_eq!(code(&ssni(&["simulate", "--config", "eta.json", "-o", "x.ssni"], d)), 2);
    assert_eq!(code(&ssni(&["bounds", "--alpha", "0.1"], d)), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_ssni"))
        .args(["bounds", "--alpha", "0.01", "--n", "10", "--eta", "0.5", "--eta-d", "1"])
        .env("SSNI_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    // I/O and format failures.
    assert_eq!(code(&ssni(&["simulate", "--config", "missing.json", "-o", "x.ssni"], d)), 3);
    fs::write(d.join("junk.ssni"), b"not a stack").unwrap();
    let o = ssni(&["calibrate", "junk.ssni", "-k", "1", "-o", "c.json"], d);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte offset"));

    // Numerical preconditions.
    assert_eq!(code(&ssni(&["bounds", "--alpha", "1.5", "--n", "10", "--eta", "0.5", "--eta-d", "1"], d)), 4);
    fs::write(d.join("run.json"), CONFIG).unwrap();
    assert_eq!(code(&ssni(&["simulate", "--config", "run.json", "--frames", "1", "-o", "one.ssni"], d)), 0);
    assert_eq!(code(&ssni(&["calibrate", "one.ssni", "-k", "1", "-o", "c.json"], d)), 4);
    assert_eq!(code(&ssni(&["calibrate", "one.ssni", "-k", "0", "-o", "c.json"], d)), 4);
}
