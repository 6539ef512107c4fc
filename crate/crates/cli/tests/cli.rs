use std::path::Path;
use std::process::{Command, Output};

fn cloudmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudmpc")).args(args).env_remove("CLOUDMPC_OUT_DIR").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_artifacts(dir: &Path) {
    for file in ["metrics.csv", "actions.jsonl", "events.jsonl", "monitors.json"] {
        assert!(dir.join(file).is_file(), "missing {file}");
    }
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = cloudmpc(&["run", "empty", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_artifacts(&out);
}

#[test]
fn run_honors_out_dir_variable() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cloudmpc"))
        .args(["run", "empty"])
        .env("CLOUDMPC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_artifacts(dir.path());
}

#[test]
fn bad_scenario_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "schema = \"cloudmpc-scenario/1\"\nname = \"bad\"\nduration = -\n").unwrap();
    let o = cloudmpc(&["run", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = cloudmpc(&["run", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unexpected_monitor_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = cloudmpc::harness::BUNDLED.iter().find(|(n, _)| *n == "fallback_drop").unwrap().1;
    let stripped: String = text.lines().filter(|l| !l.starts_with("expect")).map(|l| format!("{l}\n")).collect();
    let path = dir.path().join("drop.toml");
    std::fs::write(&path, stripped).unwrap();
    let o = cloudmpc(&["run", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("monitor fallback fired (FAILED)"));

    let o = cloudmpc(&["run", "fallback_drop", "--out", dir.path().join("p").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("(expected)"));
}

#[test]
fn verify_flags_corrupted_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = cloudmpc(&["run", "empty", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let metrics = dir.path().join("metrics.csv");

    let o = cloudmpc(&["verify", "empty", "--metrics", metrics.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS ")));

    let text = std::fs::read_to_string(&metrics).unwrap();
    std::fs::write(&metrics, text.replacen('\n', "\n1,2,x\n", 1)).unwrap();
    let o = cloudmpc(&["verify", "empty", "--metrics", metrics.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL metrics_schema"), "{}", stdout(&o));

    let o = cloudmpc(&["verify", "empty", "--json"]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["scenario"], "empty");
}

#[test]
fn sweep_cpu_prints_a_table() {
    let o = cloudmpc(&["sweep-cpu", "--points", "0,0.6,0.9", "--seconds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "utilization,tau_p,tau_rrt,in_band,deadline_ok");
    assert_eq!(rows.len(), 4);
    let tau_p: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(tau_p.windows(2).all(|w| w[0] <= w[1]));

    let o = cloudmpc(&["sweep-cpu", "--points", "0.5,1.2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("1.2"));
}

#[test]
fn solve_once_prints_a_solution() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("problem.json");
    let problem = r#"{
        "solver": { "max_inner_iterations": 30 },
        "agents": [
            { "position": [0.0, 0.0, 2.0], "target": [1.0, 0.0, 2.0] },
            { "position": [0.0, 2.0, 2.0], "target": [1.0, 2.0, 2.0] }
        ]
    }"#;
    std::fs::write(&path, problem).unwrap();
    let o = cloudmpc(&["solve-once", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let solution: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(solution["inputs"].as_array().unwrap().len(), 2);

    std::fs::write(&path, r#"{ "agents": [] }"#).unwrap();
    assert_eq!(cloudmpc(&["solve-once", path.to_str().unwrap()]).status.code(), Some(2));
}
