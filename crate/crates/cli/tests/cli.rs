use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use formset_cli::report::{DemoReport, FormationReport, GainsReport, SimulationReport, UbReport};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn formset(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formset"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("FORMSET_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// A short-horizon copy of the default scenario.
fn small_default() -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(scenario("default.json")).unwrap()).unwrap();
    v["simulation"]["horizon"] = 4.0.into();
    v["simulation"]["seeds"] = 2.into();
    v["simulation"]["csv_every"] = 20.into();
    v
}

fn round_trip<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(path: &Path) -> T {
    let text = fs::read_to_string(path).unwrap();
    let typed: T = serde_json::from_str(&text).unwrap();
    let again: T = serde_json::from_str(&serde_json::to_string(&typed).unwrap()).unwrap();
    assert_eq!(typed, again, "{}", path.display());
    let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(raw, serde_json::to_value(&typed).unwrap(), "{}", path.display());
    typed
}

#[test]
fn ub_example_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = formset(&["ub", "--deterministic"], &scenario("lti_example.json"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: UbReport = round_trip(&dir.path().join("ub.json"));
    assert_eq!(r.eigenvalues, vec![-1.0, -2.0]);
    assert!(r.all_passed);
    assert_eq!(r.runs.len(), 5);
    let exact = r.volume_exact.unwrap();
    assert!((exact - 0.48).abs() < 1e-12);
    assert!((r.volume_ratio.unwrap() - r.volume_formula / exact).abs() < 1e-15);
    let svg = fs::read_to_string(dir.path().join("ub.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 5);
    assert!(!svg.contains("unix time"));
}

#[test]
fn ub_zero_disturbance_is_a_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "schema": "formset/1",
        "lti": {"a": [[0, -2], [1, -3]], "disturbance": {"lo": [0, 0], "hi": [0, 0]}}
    });
    let out = formset(&["ub"], &write_config(dir.path(), &cfg), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: UbReport = round_trip(&dir.path().join("ub.json"));
    assert_eq!(r.volume_formula, 0.0);
    assert_eq!(r.volume_exact, Some(0.0));
    assert_eq!(r.volume_ratio, None);
    assert!(r.bound.iter().all(|b| *b == 0.0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unstable = serde_json::json!({
        "schema": "formset/1",
        "lti": {"a": [[0, 1], [1, 0]], "disturbance": {"lo": [-1, -1], "hi": [1, 1]}}
    });
    let out = formset(&["ub"], &write_config(dir.path(), &unstable), dir.path());
    assert_eq!(out.status.code(), Some(3));

    let out = formset(&["ub"], &dir.path().join("missing.json"), dir.path());
    assert_eq!(out.status.code(), Some(2));
    let bad_schema = serde_json::json!({"schema": "formset/2"});
    let out = formset(&["gains"], &write_config(dir.path(), &bad_schema), dir.path());
    assert_eq!(out.status.code(), Some(2));

    // the second anchor sits inside the first obstacle
    let mut v = small_default();
    v["formation"]["anchors"] = serde_json::json!([[10, 20], [24, 20]]);
    let out = formset(&["formation"], &write_config(dir.path(), &v), dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("anchor 2"));
    assert!(dir.path().join("formation_1.json").exists());
    assert!(!dir.path().join("formation_2.json").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_formset"))
        .args(["gains", "--config"])
        .arg(scenario("default.json"))
        .arg("--out")
        .arg(dir.path())
        .env("FORMSET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_world_collapses_to_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let out = formset(&["formation"], &scenario("empty_world.json"), dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: FormationReport = round_trip(&dir.path().join("formation_1.json"));
    assert!(r.verification.passed);
    assert_eq!(r.verification.obstacle_margin, None);
    // every edge sits exactly at its threshold plus the strictness margin
    let margin = r.verification.edge_margin.unwrap();
    assert!((margin - 1e-3).abs() < 1e-7, "{margin}");
    for (z, t) in r.displacements.iter().zip(&r.thresholds) {
        let slack = z.iter().zip(t).map(|(z, t)| z.abs() - t).fold(f64::NEG_INFINITY, f64::max);
        assert!((slack - 1e-3).abs() < 1e-7);
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .filter(|(name, _)| name != "config.json")
        .collect();
    v.sort();
    v
}

#[test]
fn demo_is_deterministic_and_round_trips() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let config = write_config(cfg_dir.path(), &small_default());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let out = formset(&["demo", "--deterministic", "--seed", "7"], &config, d);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "demo.json",
        "formation.svg",
        "formation_1.json",
        "formation_2.json",
        "formation_3.json",
        "gains.json",
        "simulation.json",
        "trajectory_a1_uniform_s7.csv",
    ] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    let demo: DemoReport = round_trip(&a.path().join("demo.json"));
    let gains: GainsReport = round_trip(&a.path().join("gains.json"));
    let sim: SimulationReport = round_trip(&a.path().join("simulation.json"));
    assert_eq!(demo.gains, gains);
    assert_eq!(demo.simulation, sim);
    assert_eq!(demo.formations.len(), 3);
    for k in 1..=3 {
        let f: FormationReport = round_trip(&a.path().join(format!("formation_{k}.json")));
        assert_eq!(f, demo.formations[k - 1]);
        assert!(f.verification.passed);
    }
    assert!(sim.all_contained);
    assert_eq!(sim.anchors[0].runs.len(), 4);
    assert_eq!(sim.anchors[0].runs[0].seed, 7);

    let svg = fs::read_to_string(a.path().join("formation.svg")).unwrap();
    assert_eq!(svg.matches("stroke-dasharray").count(), 3);
    assert_eq!(svg.matches("marker-end").count(), 15);

    // without --deterministic the figures carry a timestamp
    let c = tempfile::tempdir().unwrap();
    let out = formset(&["formation"], &config, c.path());
    assert!(out.status.success());
    assert!(fs::read_to_string(c.path().join("formation.svg")).unwrap().contains("unix time"));
    assert_eq!(
        fs::read(c.path().join("formation_2.json")).unwrap(),
        fs::read(a.path().join("formation_2.json")).unwrap()
    );
}

#[test]
fn csv_has_metadata_and_header() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let mut v = small_default();
    v["formation"]["anchors"] = serde_json::json!([[60, -15]]);
    v["simulation"]["policies"] = serde_json::json!(["vertex"]);
    v["simulation"]["seeds"] = 1.into();
    let config = write_config(cfg_dir.path(), &v);
    let out = formset(&["simulate"], &config, cfg_dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(cfg_dir.path().join("trajectory_a1_vertex_s0.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# n_agents=4 dim=2 dt=0.001 seed=0 policy=vertex"));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 33);
    assert_eq!(header[1], "p_1_1");
    assert_eq!(header[32], "e_v_4_2");
    // 4 s at dt 1e-3, every 20th step
    assert_eq!(lines.count(), 201);
}
