use std::io::{BufRead, BufReader};
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_halo");

fn halo(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(halo(&["--help"]).status.code(), Some(0));
    assert_eq!(halo(&["--version"]).status.code(), Some(0));
    assert_eq!(halo(&["compare", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let o = halo(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(halo(&["horizon", "--lambda", "0.1"]).status.code(), Some(1));
    assert_eq!(halo(&["simulate", "--format", "xml"]).status.code(), Some(1));
}

#[test]
fn horizon_prints_critical_length_and_crossing() {
    let o = halo(&["horizon", "--lambda", "0.0953", "--sigma2", "0.01", "--psi", "0.2727"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let n: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("N* = "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((n - 10.0).abs() < 0.05, "{n}");
    assert!(text.contains("first step at or above psi: 10"), "{text}");
}

#[test]
fn horizon_rejects_bad_parameters() {
    let o = halo(&["horizon", "--lambda", "0.1", "--sigma2", "-1", "--psi", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn compare_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = halo(&["compare", "--n-seeds", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["runs.csv", "aggregates.csv", "open_vs_halo.csv", "result.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let runs = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    // header plus one row per seed and arm
    assert_eq!(runs.lines().count(), 1 + 2 * 20);
    assert!(stdout(&o).contains("open_loop"));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut bodies = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "4")] {
        let out = dir.path().join(name);
        let o = halo(&["compare", "--n-seeds", "70", "--seed", "7", "--jobs", jobs, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        bodies.push(std::fs::read(out.join("runs.csv")).unwrap());
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn missing_field_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"version": 1, "scenario": "open_loop", "seed": 1, "system": {"d": 4}}"#).unwrap();
    let o = halo(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("system") && err.contains("sigma2"), "{err}");
}

#[test]
fn invalid_value_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let mut cfg: serde_json::Value = serde_json::from_str(include_str!("../../../configs/default.json")).unwrap();
    cfg["controller"]["epsilon"] = serde_json::json!(-0.5);
    std::fs::write(&path, cfg.to_string()).unwrap();
    let o = halo(&["halo", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("controller.epsilon"), "{}", stderr(&o));
}

#[test]
fn json_format_goes_to_stdout() {
    let o = halo(&["simulate", "--n-seeds", "5", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["scenario"], "open_loop");
    assert_eq!(v["records"].as_array().unwrap().len(), 5);
}

#[test]
fn spawned_stub_round_trip() {
    let o = halo(&[
        "halo",
        "--timeout",
        "10",
        "--spawn",
        BIN,
        "serve-adapter-stub",
        "--entropies",
        "1,1,1,4,4,4,1,1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("status finished"), "{text}");
    assert!(text.contains("executed 8"), "{text}");
    assert!(text.contains("resets 1"), "{text}");
}

#[test]
fn tcp_stub_round_trip() {
    let mut server = Command::new(BIN)
        .args(["serve-adapter-stub", "--listen", "127.0.0.1:0", "--entropies", "2,2,2"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let o = halo(&["halo", "--timeout", "10", "--connect", &addr]);
    assert!(server.wait().unwrap().success());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("executed 3"));
}

#[test]
fn version_mismatch_is_a_runtime_failure() {
    let o = halo(&[
        "halo",
        "--timeout",
        "10",
        "--spawn",
        BIN,
        "serve-adapter-stub",
        "--entropies",
        "1,1",
        "--protocol-version",
        "9",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("terminated_transport"));
}

#[test]
fn shipped_configs_validate() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let o = halo(&["simulate", "--n-seeds", "2", "--config", path.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), stderr(&o));
            seen += 1;
        }
    }
    assert!(seen >= 1);
}
