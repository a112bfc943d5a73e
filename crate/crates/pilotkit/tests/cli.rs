use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use pilotkit::report::Report;
use serde_json::{json, Value};

fn pilotkit() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pilotkit"));
    c.env_remove("PILOTKIT_CONFIG_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    pilotkit().args(args).output().expect("pilotkit runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_workload(dir: &Path, name: &str, body: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(body).unwrap()).unwrap();
    p
}

fn units_workload(resource: &str, cores: u32, units: Value) -> Value {
    json!({
        "mode": "UNITS",
        "pilot": {"resource": resource, "cores": cores, "runtime": 10},
        "units": units,
    })
}

fn run_workload(dir: &Path, workload: &Path, session: &str, extra: &[&str]) -> (Output, PathBuf) {
    let s = dir.join(session);
    let mut args = vec!["run", workload.to_str().unwrap(), "--session", s.to_str().unwrap()];
    args.extend_from_slice(extra);
    (run(&args), s)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_peak(csv: &str) -> u64 {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .max()
        .unwrap_or(0)
}

#[test]
fn flagship_run_and_profile() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "flagship.json",
        &units_workload(
            "sim-3072",
            3072,
            json!([{"executable": "/bin/sleep", "arguments": ["2"], "cores": 24, "mpi": true, "count": 128}]),
        ),
    );
    let (o, s) = run_workload(d.path(), &w, "flag", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = Report::read(&s.join("report.json")).unwrap();
    assert_eq!(report.counts["UNIT"]["DONE"], 128);
    assert_eq!(report.units.len(), 128);
    assert!(report.success);

    let o = run(&["profile", "--session", s.to_str().unwrap(), "concurrency", "EXECUTING"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("time,EXECUTING\n"));
    assert_eq!(csv_peak(&csv), 128);

    let o = run(&[
        "profile",
        "--session",
        s.to_str().unwrap(),
        "concurrency",
        "EXECUTING",
        "--cores",
    ]);
    assert!(csv_peak(&stdout(&o)) <= 3072);

    let o = run(&["profile", "--session", s.to_str().unwrap(), "utilization", "pilot.0000"]);
    let u: Value = serde_json::from_slice(&o.stdout).unwrap();
    let f = u["fraction"].as_f64().unwrap();
    assert!(f > 0.0 && f < 1.0, "{f}");
}

#[test]
fn empty_units_list_succeeds_without_a_pilot() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(d.path(), "empty.json", &units_workload("local", 4, json!([])));
    let (o, s) = run_workload(d.path(), &w, "empty", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = Report::read(&s.join("report.json")).unwrap();
    assert!(r.units.is_empty() && r.pilots.is_empty() && r.success);
}

#[test]
fn failing_unit_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "fail.json",
        &units_workload(
            "local",
            4,
            json!([{"executable": "/bin/true"}, {"executable": "/bin/false"}]),
        ),
    );
    let (o, s) = run_workload(d.path(), &w, "fail", &["--in-process"]);
    assert_eq!(code(&o), 1);
    let r = Report::read(&s.join("report.json")).unwrap();
    assert!(!r.success);
    assert_eq!(r.counts["UNIT"]["DONE"], 1);
    assert_eq!(r.counts["UNIT"]["FAILED"], 1);
    assert!(r.units.values().any(|u| u.exit_code == Some(1)));
}

#[test]
fn ensemble_fail_fast_stops_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "ens.json",
        &json!({
            "mode": "ENSEMBLE",
            "resource_desc": {"resource": "local", "walltime": 5, "cpus": 4},
            "pipelines": [{"uid": "p", "stages": [
                {"tasks": [{"executable": "/bin/true"}, {"executable": "/bin/false"}]},
                {"tasks": [{"executable": "/bin/true"}]}
            ]}],
            "options": {"failure_policy": "fail_fast"}
        }),
    );
    let (o, s) = run_workload(d.path(), &w, "ens", &[]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let r = Report::read(&s.join("report.json")).unwrap();
    assert_eq!(r.pipelines["p"], "STOPPED");
    assert_eq!(r.tasks["p.s0.task.0001"], "FAILED");
    assert!(!r.tasks.get("p.s1.task.0000").is_some_and(|t| t == "DONE"));
}

#[test]
fn status_reads_a_live_session() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "long.json",
        &units_workload(
            "local",
            4,
            json!([{"executable": "/bin/sleep", "arguments": ["2"], "count": 4}]),
        ),
    );
    let s = d.path().join("live");
    let mut child = pilotkit()
        .args(["run", w.to_str().unwrap(), "--session", s.to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut seen = false;
    while Instant::now() < deadline && !seen {
        let o = run(&["status", "--session", s.to_str().unwrap()]);
        if code(&o) == 0 {
            let out = stdout(&o);
            seen = out.lines().any(|l| l.starts_with("UNIT:") && l.contains("EXECUTING=4"));
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    assert!(seen, "status never showed the running units");
    assert!(child.wait().unwrap().success());
    let out = stdout(&run(&["status", "--session", s.to_str().unwrap()]));
    assert!(out.contains("UNIT: DONE=4"), "{out}");
    assert!(out.contains("finished"));
}

#[test]
fn missing_session_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope");
    let o = run(&["status", "--session", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no session"));
    let o = run(&["profile", "--session", missing.to_str().unwrap(), "summary"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_input_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let broken = d.path().join("broken.json");
    fs::write(&broken, "{\"mode\": ").unwrap();
    let (o, _) = run_workload(d.path(), &broken, "a", &[]);
    assert_eq!(code(&o), 2);

    let mixed = write_workload(
        d.path(),
        "mixed.json",
        &json!({"mode": "UNITS", "pilot": {"cores": 1, "runtime": 1}, "units": [], "pipelines": []}),
    );
    let (o, _) = run_workload(d.path(), &mixed, "b", &["--resource", "local"]);
    assert_eq!(code(&o), 2);

    let invalid = write_workload(
        d.path(),
        "zero.json",
        &units_workload("local", 4, json!([{"executable": "x", "cores": 0}])),
    );
    let (o, s) = run_workload(d.path(), &invalid, "c", &[]);
    assert_eq!(code(&o), 2);
    assert!(!s.exists());

    assert_eq!(code(&run(&["run"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn resource_problems_exit_three() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "w.json",
        &units_workload("nowhere", 4, json!([{"executable": "/bin/true"}])),
    );
    let (o, s) = run_workload(d.path(), &w, "a", &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere"));
    assert!(!s.exists());

    let big = write_workload(
        d.path(),
        "big.json",
        &units_workload("local", 65, json!([{"executable": "/bin/true"}])),
    );
    let (o, s) = run_workload(d.path(), &big, "b", &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!Report::read(&s.join("report.json")).unwrap().success);
}

#[test]
fn resource_flag_and_config_dir() {
    let d = tempfile::tempdir().unwrap();
    let cfgs = d.path().join("resources");
    fs::create_dir(&cfgs).unwrap();
    fs::write(
        cfgs.join("tiny.json"),
        serde_json::to_vec(&json!({
            "name": "tiny", "nodes": 1, "cores_per_node": 2, "gpus_per_node": 0,
            "agent_launch": "IN_PROCESS",
            "launch_templates": {"DIRECT": "{EXE} {ARGS}"},
        }))
        .unwrap(),
    )
    .unwrap();
    let w = write_workload(
        d.path(),
        "w.json",
        &units_workload("", 2, json!([{"executable": "/bin/true", "count": 3}])),
    );
    let (o, _) = run_workload(d.path(), &w, "a", &[]);
    assert_eq!(code(&o), 3, "no resource anywhere");
    let s = d.path().join("b");
    let o = pilotkit()
        .env("PILOTKIT_CONFIG_DIR", &cfgs)
        .args([
            "run",
            w.to_str().unwrap(),
            "--resource",
            "tiny",
            "--session",
            s.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = Report::read(&s.join("report.json")).unwrap();
    assert_eq!(r.resource, "tiny");
    assert_eq!(r.counts["UNIT"]["DONE"], 3);
}

#[test]
fn durations_and_summary_json() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "w.json",
        &units_workload(
            "local",
            4,
            json!([{"executable": "/bin/sleep", "arguments": ["0.2"], "count": 2}]),
        ),
    );
    let (o, s) = run_workload(d.path(), &w, "s", &[]);
    assert_eq!(code(&o), 0);
    let o = run(&["profile", "--session", s.to_str().unwrap(), "durations", "unit.000000"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["entity"], "unit.000000");
    assert!(v["totals"]["EXECUTING"].as_f64().unwrap() >= 0.2);
    let last = v["states"].as_array().unwrap().last().unwrap();
    assert_eq!(last["state"], "DONE");
    assert_eq!(last["duration"], 0.0);

    let out = d.path().join("summary.json");
    let o = run(&[
        "profile",
        "--session",
        s.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "summary",
    ]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["final_states"]["UNIT"]["DONE"], 2);
    assert_eq!(v["peak_executing_units"], 2);

    let o = run(&["profile", "--session", s.to_str().unwrap(), "durations", "unit.999999"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupt_log_line_warns_and_analysis_continues() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "w.json",
        &units_workload("local", 4, json!([{"executable": "/bin/true", "count": 3}])),
    );
    let (o, s) = run_workload(d.path(), &w, "s", &[]);
    assert_eq!(code(&o), 0);
    let clean = run(&["profile", "--session", s.to_str().unwrap(), "summary"]);
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(s.join("events.jsonl"))
        .unwrap();
    f.write_all(b"{\"timestamp\": {\"mono_ns\": 12").unwrap();
    drop(f);
    let o = run(&["profile", "--session", s.to_str().unwrap(), "summary"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning: skipped corrupt record"), "{}", stderr(&o));
    assert_eq!(o.stdout, clean.stdout);
}

#[test]
fn same_seed_gives_same_report() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "w.json",
        &json!({
            "mode": "UNITS",
            "pilot": {"resource": "sim-3072", "cores": 96, "runtime": 10},
            "units": [
                {"executable": "/bin/true", "cores": 24, "mpi": true, "count": 4},
                {"executable": "/bin/false", "count": 2},
                {"executable": "/bin/true", "cores": 4, "count": 6}
            ],
        }),
    );
    let (a, sa) = run_workload(d.path(), &w, "a", &["--seed", "7"]);
    let (b, sb) = run_workload(d.path(), &w, "b", &["--seed", "7"]);
    assert_eq!((code(&a), code(&b)), (1, 1));
    let ra = Report::read(&sa.join("report.json")).unwrap();
    let rb = Report::read(&sb.join("report.json")).unwrap();
    assert_ne!(ra.session_id, rb.session_id);
    assert_eq!(ra.normalized(), rb.normalized());
}

#[test]
fn existing_session_is_not_reused() {
    let d = tempfile::tempdir().unwrap();
    let w = write_workload(
        d.path(),
        "w.json",
        &units_workload("local", 4, json!([{"executable": "/bin/true"}])),
    );
    let (o, _) = run_workload(d.path(), &w, "s", &[]);
    assert_eq!(code(&o), 0);
    let (o, _) = run_workload(d.path(), &w, "s", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("already holds a session"));
}
