use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn udufact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udufact")).args(args).env("UDUFACT_THREADS", "2").output().unwrap()
}

fn write_spec(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{
  "kind": "sweep",
  "seed": 3,
  "sweep": {"base": "completion", "axis": "eta", "values": [0.05, 0.01]},
  "problem": {"d": 8, "r_true": 2, "n": 40},
  "solver": {"iters": 300, "init_scale": 0.01, "log_every": 50}
}"#;

#[test]
fn validate_reports_every_error_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "bad.json",
        r#"{"kind":"completion","problem":{"d":4,"r_true":1,"n":8},"solver":{"etta":0.1,"eta":-1,"iters":5}}"#,
    );
    let out = udufact(&["validate", &spec]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    let msgs: Vec<&str> = err["messages"].as_array().unwrap().iter().map(|m| m.as_str().unwrap()).collect();
    assert!(msgs.contains(&"eta must be > 0"), "{msgs:?}");
    assert!(msgs.iter().any(|m| m.contains("\"etta\"")), "{msgs:?}");
}

#[test]
fn validate_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "ok.json", r#"{"kind":"completion","problem":{"d":4,"r_true":1,"n":8},"solver":{"eta":0.1,"iters":5}}"#);
    let out = udufact(&["validate", &spec]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["solver"]["alpha"], 1.0);
    assert_eq!(v["solver"]["log_every"], 1000);
    assert_eq!(v["solver"]["d0"], Value::Null);
}

#[test]
fn run_rejects_invalid_spec_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "bad.json", "{not json");
    let out = udufact(&["run", &spec, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_spec");
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn sweep_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "sweep.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let out = udufact(&["run", &spec, "--out", o.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), 1 + 2 * 8);
    assert!(ta.iter().any(|(n, _)| n.ends_with("eta=5e-2/udu_trace.csv")));
    assert_eq!(ta, tb);

    let s: Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["spec_hash"].as_str().unwrap().len(), 64);
    assert_eq!(s["points"].as_array().unwrap().len(), 2);
}

#[test]
fn overrides_and_spectrum_command() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "c.json", r#"{"kind":"completion","problem":{"d":6,"r_true":1,"n":30},"solver":{"eta":0.05,"iters":5000,"solvers":["udu"]}}"#);
    let o = dir.path().join("o");
    let out = udufact(&["run", &spec, "--out", o.to_str().unwrap(), "--seed", "9", "--iters", "0"]);
    assert_eq!(out.status.code(), Some(0));
    let s: Value = serde_json::from_slice(&std::fs::read(o.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["seed"], 9);
    assert_eq!(s["runs"][0]["iters_run"], 0);

    let out = udufact(&["spectrum", o.join("udu_state.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let saved = std::fs::read_to_string(o.join("udu_spectrum.csv")).unwrap();
    assert_eq!(text, saved);
    assert_eq!(text.lines().count(), 1 + 6);
}

#[test]
fn divergence_exits_zero_and_non_finite_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // A huge step on an unscaled BM run blows up to infinity.
    let spec = write_spec(
        dir.path(),
        "blow.json",
        r#"{"kind":"completion","problem":{"d":6,"r_true":2,"n":30},
            "solver":{"eta":50,"iters":2000,"init_scale":1,"solvers":["bm"],"measurement_scaling":"none","log_every":1}}"#,
    );
    let o = dir.path().join("o");
    let out = udufact(&["run", &spec, "--out", o.to_str().unwrap()]);
    let s: Value = serde_json::from_slice(&std::fs::read(o.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["runs"][0]["diverged"], true);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(s["runs"][0]["status"]["status"], "non_finite");
    assert!(s["runs"][0]["status"]["iter"].is_u64());

    // UDU stays inside the ball, so the same step only oscillates.
    let spec = write_spec(dir.path(), "udu.json", &std::fs::read_to_string(&spec).unwrap().replace("\"bm\"", "\"udu\""));
    let out = udufact(&["run", &spec, "--out", dir.path().join("u").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
}
