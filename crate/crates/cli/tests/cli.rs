use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

fn rsls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsls"))
        .args(args)
        .env_remove("RSLS_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn linearize_two_bus_case() {
    let o = rsls(&["linearize", fixture("cases/case2_example1.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    let a = v["a"].as_array().unwrap();
    let a10 = a[1][0].as_f64().unwrap();
    assert!((a10 + 197.7372).abs() < 1e-2, "{a10}");
    let x = &v["equilibrium"]["x_bar"];
    let delta = x[0].as_f64().unwrap() - x[2].as_f64().unwrap();
    assert!((delta - (0.15f64).asin()).abs() < 1e-9, "{delta}");
}

#[test]
fn linearize_scenario_selection() {
    let case = fixture("cases/case5.json");
    let case = case.to_str().unwrap();
    let base = json(&rsls(&["linearize", case]));
    let s1 = rsls(&["linearize", case, "--scenario", "1"]);
    assert!(s1.status.success());
    assert_eq!(json(&s1)["a"].as_array().unwrap().len(), 4);
    assert_eq!(base["a"].as_array().unwrap().len(), 4);
    assert_eq!(rsls(&["linearize", case, "--scenario", "0"]).status.code(), Some(2));
    assert_eq!(rsls(&["linearize", case, "--scenario", "99"]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_usage_code() {
    let o = rsls(&["linearize", "/no/such/case.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/case.json"));
    assert_eq!(rsls(&["powerflow", "/no/such/case.json"]).status.code(), Some(2));
    assert_eq!(rsls(&["run", "--config", "/no/such.toml"]).status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(rsls(&["bogus"]).status.code(), Some(2));
    let cfg = fixture("configs/exp_5bus_nominal.toml");
    let o = rsls(&["run", "--config", cfg.to_str().unwrap(), "--metric", "median"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn powerflow_prints_solution() {
    let o = rsls(&["powerflow", fixture("cases/case5.json").to_str().unwrap()]);
    assert!(o.status.success());
    let v = json(&o);
    assert_eq!(v["v_mag"].as_array().unwrap().len(), 5);
    assert!(v["mismatch"].as_f64().unwrap() < 1e-8);
}

#[test]
fn validate_input_verdicts() {
    let ok = rsls(&["validate-input", "--config", fixture("configs/exp_5bus_nominal.toml").to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout(&ok).trim(), "ok");
    let bad = rsls(&["validate-input", "--config", fixture("configs/dc_twins_step.toml").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("G_1(0) = 0.45 and G_2(0) = 0.45"), "{}", stdout(&bad));
    let one = rsls(&["validate-input", "--config", fixture("configs/single_mode.toml").to_str().unwrap()]);
    assert_eq!(one.status.code(), Some(0));
}

#[test]
fn run_writes_reproducible_outputs() {
    let cfg = fixture("configs/exp_5bus_noise_1sensor.toml");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = rsls(&["run", "--config", cfg.to_str().unwrap(), "--seed", "5", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let rel = "5bus-noise-1sensor-seed5";
    for f in ["trace.csv", "segments.csv", "meta.json"] {
        assert_eq!(
            fs::read(a.path().join(rel).join(f)).unwrap(),
            fs::read(b.path().join(rel).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn run_uses_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("configs/exp_5bus_nominal.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_rsls"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--metric", "l2"])
        .env("RSLS_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("5bus-nominal-seed1/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["metric"], "l2");
    assert_eq!(meta["detection_accuracy"], 1.0);
}

#[test]
fn run_refuses_rejected_probing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("configs/dc_twins_step.toml");
    let o = rsls(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn montecarlo_prints_summary() {
    let cfg = fixture("configs/exp_33bus_packet.toml");
    let o = rsls(&["montecarlo", "--config", cfg.to_str().unwrap(), "--runs", "4", "--seed", "11"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["runs"], 4);
    assert_eq!(v["overall_accuracy"], 1.0);
    assert_eq!(v["per_mode_accuracy"].as_array().unwrap().len(), 4);
}

#[test]
fn montecarlo_needs_a_run_count() {
    let cfg = fixture("configs/exp_33bus_nominal.toml");
    assert_eq!(rsls(&["montecarlo", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}
