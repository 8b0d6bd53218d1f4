use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskstruct"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn taskstruct")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

const DEMO_GRAPH: &str = r#"{"T": 10, "L": 2, "M": 1, "incidence": [[2, 1], [4, 1]], "disconnected_boundaries": [1]}"#;

#[test]
fn gen_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let args = ["gen", "-T", "8", "-L", "2", "-M", "2", "--seed", "11", "-n", "200"];
    ok(dir.path(), &[&args[..], &["--data", "a.csv", "--meta", "a.json"]].concat());
    ok(dir.path(), &[&args[..], &["--data", "b.csv", "--meta", "b.json"]].concat());
    assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(fs::read(dir.path().join("a.json")).unwrap(), fs::read(dir.path().join("b.json")).unwrap());
}

#[test]
fn gen_writes_requested_rows() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["gen", "-T", "6", "-L", "2", "-M", "1", "--seed", "0", "-n", "10000"]);
    let text = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(text.lines().count(), 10_001);
}

#[test]
fn unit_segments_are_rejected() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["gen", "-T", "10", "-L", "1", "-M", "2", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("L must be >= 2"), "{}", stderr(&o));
}

#[test]
fn oracle_recovers_demo_incidence() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("g.json"), DEMO_GRAPH).unwrap();
    let out = ok(dir.path(), &["discover", "--backend", "graph-oracle", "--graph", "g.json"]);
    assert!(out.contains("accuracy 1.0000"), "{out}");
    let res: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(res["incidence_est"]["matrix"], serde_json::json!([[false], [true], [false], [true], [false]]));
}

#[test]
fn missing_task_columns_are_named() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["gen", "-T", "8", "-L", "2", "-M", "1", "--seed", "2", "-n", "300"]);
    let text = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    let trimmed: String = text
        .lines()
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            cols[..cols.len() - 1].join(",") + "\n"
        })
        .collect();
    fs::write(dir.path().join("data.csv"), trimmed).unwrap();
    let o = run(dir.path(), &["discover", "--data", "data.csv", "--meta", "meta.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing variables: g[1]"), "{}", stderr(&o));
}

#[test]
fn malformed_supports_exit_two() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["ident", "--d-s", "3", "--supports", "1,2;x", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad support index"));
    let o = run(dir.path(), &["ident", "--d-s", "2", "--supports", "1;3", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gen_discover_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["gen", "-T", "10", "-L", "2", "-M", "2", "--seed", "5", "-n", "2000"]);
    let found = ok(dir.path(), &["discover", "--backend", "analytic-corr", "--meta", "meta.json"]);
    let scored = ok(dir.path(), &["eval", "--result", "result.json", "--meta", "meta.json"]);
    let line = |s: &str| s.lines().find(|l| l.starts_with("accuracy")).unwrap().to_owned();
    assert_eq!(line(&found), line(&scored));
    ok(dir.path(), &["discover", "--data", "data.csv", "--meta", "meta.json", "--out", "fz.json"]);
    ok(dir.path(), &["eval", "--result", "fz.json", "--meta", "meta.json"]);
}

#[test]
fn rotation_demo_disentangles() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["ident", "--rotation-demo", "--eval-samples", "2000"]);
    assert!(out.contains("verdict: disentangled"), "{out}");
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ident.json")).unwrap()).unwrap();
    assert_eq!(rep["success"], true);
}

#[test]
fn band_query_follows_incidence() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("g.json"), DEMO_GRAPH).unwrap();
    let dep = ok(dir.path(), &["ci", "--backend", "graph-oracle", "--graph", "g.json", "--band", "2,4,1"]);
    assert!(dep.contains("verdict dependent"), "{dep}");
    let ind = ok(dir.path(), &["ci", "--backend", "graph-oracle", "--graph", "g.json", "--band", "1,4,1"]);
    assert!(ind.contains("verdict independent"), "{ind}");
    let o = run(dir.path(), &["ci", "--backend", "graph-oracle", "--graph", "g.json", "--band", "1,4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_table_has_one_row_per_cell_and_seed() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["sweep", "--backend", "graph-oracle", "--grid", "8:2,10:2", "--runs", "3"]);
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,T,L,M,seed,n,accuracy,mcc,runtime_s"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn zero_threads_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["--threads", "0", "sweep", "--backend", "graph-oracle", "--runs", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
