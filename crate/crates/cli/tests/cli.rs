use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn preset(name: &str) -> PathBuf {
    root().join("scenarios").join(format!("{name}.json"))
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_torquefuse")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn missing_scenario_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = cli(&["run", "--scenario", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn divergent_gains_abort_with_exit_2_and_time() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["run", "--scenario", s(&fixture("absurd_gains.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("aborted at t = "), "{err}");
    // the partial log is still written
    assert!(dir.path().join("absurd-gains_ukf.csv").exists());
}

#[test]
fn zero_duration_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["run", "compare"] {
        let o = cli(&[cmd, "--scenario", s(&fixture("quiet_hold.json")), "--out", s(dir.path()), "--duration", "0"]);
        assert_eq!(o.status.code(), Some(1), "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains("duration"), "{}", stderr(&o));
    }
}

#[test]
fn scenario_without_duration_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("quiet_hold.json")).unwrap().replace("\"duration\": 3.0,", "");
    let model = root().join("models/leg_torso.json").canonicalize().unwrap();
    let text = text.replace("../../../../models/leg_torso.json", s(&model));
    let path = dir.path().join("no_duration.json");
    fs::write(&path, text).unwrap();
    let o = cli(&["compare", "--scenario", s(&path), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn preset_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["run", "--scenario", s(&preset("zero-torque-push")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for est in ["ukf", "rnea"] {
        for suffix in [".csv", "_summary.txt", "_summary.json"] {
            let p = dir.path().join(format!("zero-torque-push_{est}{suffix}"));
            assert!(p.exists(), "{}", p.display());
        }
        let csv = fs::read_to_string(dir.path().join(format!("zero-torque-push_{est}.csv"))).unwrap();
        // header plus one row per millisecond of the 7 s preset
        assert_eq!(csv.lines().count(), 1 + 7_000);
    }
}

#[test]
fn rerun_overwrites_with_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = fixture("quiet_hold.json");
    let args = ["run", "--scenario", s(&scenario), "--out", s(dir.path()), "--duration", "1.5"];
    assert_eq!(cli(&args).status.code(), Some(0));
    let first = read_dir_sorted(dir.path());
    assert_eq!(cli(&args).status.code(), Some(0));
    assert_eq!(first, read_dir_sorted(dir.path()));
}

#[test]
fn seed_and_estimator_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &Path| {
        let o = cli(&[
            "run", "--scenario", s(&fixture("quiet_hold.json")), "--out", s(out), "--duration", "0.2", "--seed", seed, "--estimator", "ukf",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(!out.join("quiet-hold_rnea.csv").exists());
        fs::read(out.join("quiet-hold_ukf.csv")).unwrap()
    };
    let a = run("1", &dir.path().join("a"));
    let b = run("2", &dir.path().join("b"));
    assert_ne!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 200);
}

#[test]
fn batch_isolates_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&[
        "run", "--scenario", s(&fixture("quiet_hold.json")), "--batch", s(&fixture("absurd_gains.json")), "--out", s(dir.path()), "--duration", "0.3",
    ]);
    // one aborted scenario makes the batch exit 2
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(dir.path().join("00_quiet_hold/quiet-hold_ukf.csv").exists());
    assert!(dir.path().join("00_quiet_hold/quiet-hold_rnea.csv").exists());
    assert!(dir.path().join("01_absurd_gains/absurd-gains_ukf.csv").exists());
}

fn compare_rows(path: &Path) -> Vec<(String, Vec<f64>)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<_> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "joint");
    assert_eq!(header.len(), 7);
    lines
        .map(|l| {
            let mut f = l.split(',');
            let name = f.next().unwrap().to_string();
            (name, f.map(|v| v.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn compare_without_contact_keeps_both_small() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["compare", "--scenario", s(&fixture("quiet_hold.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("quiet-hold_compare.txt").exists());
    let rows = compare_rows(&dir.path().join("quiet-hold_compare.csv"));
    assert_eq!(rows.len(), 7);
    let (mut ukf, mut rnea) = (0.0, 0.0);
    for (joint, v) in &rows {
        // [ukf_track, rnea_track, ratio, ukf_est, rnea_est, ratio]
        assert!((v[2] - v[0] / v[1]).abs() < 1e-9 * v[2].abs().max(1.0), "{joint}");
        for x in [v[0], v[1], v[3], v[4]] {
            assert!(x < 1.0, "{joint}: RMSE {x} Nm");
        }
        ukf += v[3] * v[3];
        rnea += v[4] * v[4];
    }
    let ratio = (ukf / rnea).sqrt();
    assert!(ratio < 2.0, "aggregate UKF/RNEA estimation ratio {ratio}");
}

#[test]
fn compare_on_unmeasured_push_favours_the_ukf() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["compare", "--scenario", s(&preset("zero-torque-push")), "--out", s(dir.path()), "--duration", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = compare_rows(&dir.path().join("zero-torque-push_compare.csv"));
    let hip = &rows.iter().find(|(j, _)| j == "hip_pitch").unwrap().1;
    assert!(hip[0] < hip[1], "tracking {hip:?}");
    assert!(hip[3] < hip[4], "estimation {hip:?}");
}

fn friction_csv(dir: &Path, k: (f64, f64, f64), speeds: &[f64]) -> PathBuf {
    let mut text = String::from("s_dot,residual_torque\n");
    for &v in speeds {
        for sign in [-1.0, 1.0] {
            let v = sign * v;
            text.push_str(&format!("{v},{}\n", k.0 * (k.1 * v).tanh() + k.2 * v));
        }
    }
    let p = dir.join("samples.csv");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn identify_friction_writes_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let speeds: Vec<f64> = (1..=40).map(|i| 0.05 * i as f64).collect();
    let data = friction_csv(dir.path(), (2.3, 2.7, 0.1), &speeds);
    let out = dir.path().join("fit");
    let o = cli(&["identify-friction", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let params: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("friction.json")).unwrap()).unwrap();
    for (key, want) in [("k0", 2.3), ("k1", 2.7), ("k2", 0.1)] {
        let got = params[key].as_f64().unwrap();
        assert!((got - want).abs() < 1e-6, "{key}: {got}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("rmse"));
}

#[test]
fn one_sided_friction_data_explains_itself() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("s_dot,residual_torque\n");
    for i in 1..=20 {
        text.push_str(&format!("{},{}\n", 0.1 * i as f64, 1.0));
    }
    let data = dir.path().join("one_sided.csv");
    fs::write(&data, text).unwrap();
    let o = cli(&["identify-friction", "--data", s(&data), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("both velocity signs") && err.contains("hint"), "{err}");
}

#[test]
fn tune_without_scenarios_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["tune", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no datasets"), "{}", stderr(&o));
}

#[test]
fn tune_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let search = dir.path().join("search.json");
    fs::write(&search, r#"{"kind": "grid", "axes": [{"param": "process_tau_m", "values": [0.001, 0.1]}]}"#).unwrap();
    let run = |out: &Path| {
        let o = cli(&[
            "tune", "--scenario", s(&fixture("quiet_hold.json")), "--search", s(&search), "--duration", "0.3", "--out", s(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        read_dir_sorted(out)
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b);
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["noise.json", "tune_report.json", "tune_scores.csv"]);
    let scores = String::from_utf8(a[2].1.clone()).unwrap();
    assert_eq!(scores.lines().count(), 3);
}

#[test]
fn validate_model_reports_submodels() {
    let o = cli(&["validate-model", "--model", s(&root().join("models/leg_torso.json"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("3 submodels"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"links\": []}").unwrap();
    let o = cli(&["validate-model", "--model", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&bad)));
}
