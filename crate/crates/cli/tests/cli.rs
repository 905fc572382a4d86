use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sgi_core::constants::M_RB87;
use sgi_core::interferometer::{build_timeline, run, PulseDurations, Scheme};
use sgi_core::magnetics::FieldModel;
use sgi_core::spinsys::SpinState;
use sgi_core::wavepacket::GaussianState;

fn sgi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgi")).args(args).current_dir(dir).output().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

const HALF_LOOP: &str = r#"
name = "fringe"
experiment = "scan"

[field]
kind = "calibrated"
acceleration = "481m/s^2"

[initial]
kind = "coherence_length"
l_z = "0.5um"

[timeline]
scheme = "half_loop"
T1 = "5.4us"
T2 = "5.4us"
Td1 = "100us"

[scan]
variable = "phi"
from = "0rad"
to = "6.2rad"
points = 63
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_unit_exits_2_with_located_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &HALF_LOOP.replace("T1 = \"5.4us\"", "T1 = 5.4"));
    let out = sgi(&["scan", "--config", &cfg, "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let e = &stderr_json(&out)["error"];
    assert_eq!(e["kind"], "missing_unit");
    assert_eq!(e["key"], "timeline.T1");
    assert_eq!(e["line"], 15);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn experiment_must_match_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", HALF_LOOP);
    let out = sgi(&["optimize", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["key"], "experiment");
}

#[test]
fn non_finite_fit_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "d.csv", "phi_rad,P1\n0,0.5\n1,nan\n2,0.4\n3,0.5\n4,0.6\n");
    let out = sgi(&["fit", "--input", "d.csv", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"]["kind"], "domain");
}

#[test]
fn emitted_fringe_fits_back_to_simulated_contrast() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", HALF_LOOP);
    let out = sgi(&["scan", "--config", &cfg, "--out", "scan", "--quiet"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let csv = fs::read_to_string(tmp.path().join("scan/fringe.csv")).unwrap();
    assert!(csv.starts_with("phi_rad,P1\n"));
    assert_eq!(csv.lines().count(), 64);

    let out = sgi(&["fit", "--input", "scan/fringe.csv", "--out", "fit", "--model", "sine"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = read_json(&tmp.path().join("fit/fit.json"));
    let c = fit["params"].as_array().unwrap().iter().find(|p| p["name"] == "C").unwrap()["value"].as_f64().unwrap();

    let d = PulseDurations { t1: 5.4e-6, t2: 5.4e-6, td1: 100e-6, ..Default::default() };
    let tl = build_timeline(Scheme::HalfLoop, d, FieldModel::calibrated(481.0)).unwrap();
    let init = GaussianState::with_coherence_length(M_RB87, 0.5e-6);
    let truth = run(&tl, &init, &SpinState::one()).unwrap().final_contrast;
    assert!(truth < 0.99);
    assert!((c - truth).abs() / truth < 1e-6, "C {c} vs {truth}");
}

#[test]
fn json_format_switches_series_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", HALF_LOOP);
    let out = sgi(&["scan", "--config", &cfg, "--out", "o", "--format", "json"], tmp.path());
    assert!(out.status.success());
    let doc = read_json(&tmp.path().join("o/fringe.json"));
    assert_eq!(doc["columns"], serde_json::json!(["phi_rad", "P1"]));
    assert_eq!(doc["rows"].as_array().unwrap().len(), 63);
}

#[test]
fn half_vs_full_writes_two_delay_series() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/half_vs_full.toml");
    let tmp = tempfile::tempdir().unwrap();
    let out = sgi(&["simulate", "--config", root.to_str().unwrap(), "--out", "o"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["half_loop.csv", "full_loop.csv"] {
        let text = fs::read_to_string(tmp.path().join("o").join(name)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("Td_s,contrast,phase_rad,P1"));
        assert_eq!(lines.count(), 161);
    }
    let fit = read_json(&tmp.path().join("o/half_loop_fit.json"));
    let (tau, predicted) = (fit["tau_s"].as_f64().unwrap(), fit["tau_predicted_s"].as_f64().unwrap());
    assert!((tau - predicted).abs() / predicted < 0.1);
}

#[test]
fn feasibility_defaults_reproduce_reference_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sgi(&["feasibility", "--out", "o", "--quiet"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&tmp.path().join("o/feasibility.json"));
    let close = |k: &str, v: f64, tol: f64| {
        let x = r[k].as_f64().unwrap();
        assert!((x - v).abs() / v < tol, "{k} = {x}");
    };
    close("gradient", 8.7e4, 0.1);
    close("acceleration", 81.0, 0.02);
    close("radius", 11.1e-9, 0.05);
    close("coherence_length", 1.03e-10, 0.02);
    let dz = r["splittings"][0]["dz"].as_f64().unwrap();
    assert!((dz - 5.06e-6).abs() / 5.06e-6 < 0.01);
    assert!(!r["warnings"].as_array().unwrap().is_empty());

    // the scenario file with the same numbers gives the same report
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/feasibility.toml");
    let out = sgi(&["feasibility", "--config", cfg.to_str().unwrap(), "--out", "p", "--quiet"], tmp.path());
    assert!(out.status.success());
    assert_eq!(fs::read(tmp.path().join("o/feasibility.json")).unwrap(), fs::read(tmp.path().join("p/feasibility.json")).unwrap());
}

#[test]
fn seeded_runs_are_reproducible() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/jitter.toml");
    let cfg = cfg.to_str().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run_into = |dir: &str, seed: &str| {
        let out = sgi(&["simulate", "--config", cfg, "--out", dir, "--seed", seed, "--quiet"], tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let read = |f: &str| fs::read(tmp.path().join(dir).join(f)).unwrap();
        let mut manifest: Value = serde_json::from_slice(&read("manifest.json")).unwrap();
        let obj = manifest.as_object_mut().unwrap();
        assert!(obj.remove("started_unix_s").is_some());
        assert!(obj.remove("wall_time_s").is_some());
        (read("jitter.csv"), read("jitter.json"), manifest)
    };
    let first = run_into("a", "3");
    let again = run_into("a", "3");
    assert_eq!(first.0, again.0);
    assert_eq!(first.1, again.1);
    // only the timestamp fields may change
    assert_eq!(first.2, again.2);
    assert_eq!(first.2["seed"], 3);
    assert_ne!(first.0, run_into("c", "4").0);
}

#[test]
fn fit_scenario_resolves_input_next_to_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", HALF_LOOP);
    assert!(sgi(&["scan", "--config", &cfg, "--out", "cfg/data", "--quiet"], tmp.path()).status.success());
    let fit_cfg = write(
        &tmp.path().join("cfg"),
        "fit.toml",
        "name = \"refit\"\nexperiment = \"fit\"\n\n[fit]\ninput = \"data/fringe.csv\"\nmodel = \"sine\"\n",
    );
    let elsewhere = tempfile::tempdir().unwrap();
    let out = sgi(&["fit", "--config", &fit_cfg, "--out", "o", "--quiet"], elsewhere.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elsewhere.path().join("o/fit.json").exists());
}

#[test]
fn shipped_scenarios_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            sgi_cli::scenario::load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert_eq!(n, 7);
}
