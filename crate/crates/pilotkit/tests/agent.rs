use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use pilotkit::agent::{run_agent, AgentReport, StopReason};
use pilotkit::backend::Registry;
use pilotkit::bridge::{AgentConfig, InboxMsg, OutboxMsg, UnitUpdate};
use pilotkit::mesh::store;
use pilotkit_core::{validate_unit_description, Unit, UnitDescription, UnitState};

const PILOT: &str = "pilot.0000";

fn config(dir: &Path, cores: u32, runtime_secs: f64) -> AgentConfig {
    store::init_session_dir(dir).unwrap();
    AgentConfig {
        session_dir: dir.to_path_buf(),
        pilot_id: PILOT.into(),
        cores,
        gpus: 0,
        runtime_secs,
        resource: Registry::builtin().get("local").unwrap().clone(),
        executors: 2,
        stagers: 1,
        poll_ms: 5,
        output_root: dir.join("out"),
    }
}

fn unit(n: usize, cud: UnitDescription) -> Unit {
    let mut u = Unit::new(format!("unit.{n:06}"), validate_unit_description(cud).unwrap());
    u.state = UnitState::AgentStagingInput;
    u.pilot_id = Some(PILOT.into());
    u
}

fn send(dir: &Path, msg: InboxMsg) {
    store::append_shared(&store::inbox_path(dir), &[msg]).unwrap();
}

fn updates(dir: &Path) -> Vec<UnitUpdate> {
    store::replay::<OutboxMsg>(&store::outbox_path(dir), 1)
        .unwrap()
        .records
        .into_iter()
        .filter_map(|(_, m)| match m {
            OutboxMsg::Unit(u) => Some(u),
            _ => None,
        })
        .collect()
}

fn finals(dir: &Path) -> BTreeMap<String, UnitUpdate> {
    updates(dir)
        .into_iter()
        .filter(|u| matches!(u.to, UnitState::Done | UnitState::Failed | UnitState::Canceled))
        .map(|u| (u.unit_id.clone(), u))
        .collect()
}

fn wait_terminal(dir: &Path, n: usize, timeout: Duration) {
    let end = Instant::now() + timeout;
    while finals(dir).len() < n {
        assert!(Instant::now() < end, "only {} of {n} units terminal", finals(dir).len());
        thread::sleep(Duration::from_millis(10));
    }
}

fn start(cfg: AgentConfig) -> (Arc<AtomicBool>, thread::JoinHandle<AgentReport>) {
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&cancel);
    (cancel, thread::spawn(move || run_agent(&cfg, flag).unwrap()))
}

fn sh(cmd: &str) -> UnitDescription {
    UnitDescription::new("/bin/sh").args(["-c", cmd])
}

#[test]
fn outcomes_per_exit_status() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let (_c, h) = start(config(dir, 4, 60.0));
    let mut promised = sh("true");
    promised.output_staging = vec![pilotkit_core::StagingDirective::from_name("never.dat")];
    let mut writes = sh("echo hi > out.dat");
    writes.output_staging = vec![pilotkit_core::StagingDirective::from_name("out.dat")];
    let units = vec![
        unit(1, UnitDescription::new("/bin/true")),
        unit(2, UnitDescription::new("/bin/false")),
        unit(3, UnitDescription::new("/no/such/program")),
        unit(4, sh("kill -9 $$")),
        unit(5, promised),
        unit(6, writes),
        unit(7, UnitDescription::new("/bin/true").cores(5)),
        unit(8, UnitDescription::new("true")),
    ];
    send(
        dir,
        InboxMsg::Units {
            pilot: PILOT.into(),
            units: units.clone(),
        },
    );
    // Units for another pilot and duplicates are ignored.
    send(
        dir,
        InboxMsg::Units {
            pilot: "pilot.0009".into(),
            units: vec![unit(99, UnitDescription::new("/bin/true"))],
        },
    );
    send(
        dir,
        InboxMsg::Units {
            pilot: PILOT.into(),
            units: vec![units[0].clone()],
        },
    );
    wait_terminal(dir, 8, Duration::from_secs(20));
    send(dir, InboxMsg::Shutdown { pilot: PILOT.into() });
    let report = h.join().unwrap();

    let f = finals(dir);
    let st = |n: usize| f[&format!("unit.{n:06}")].clone();
    assert_eq!(st(1).to, UnitState::Done);
    assert_eq!(st(2).to, UnitState::Failed);
    assert_eq!(st(2).payload["exit_code"], "1");
    assert_eq!(st(3).to, UnitState::Failed);
    assert!(st(3).payload["reason"].starts_with("SpawnFailure"));
    assert_eq!(st(4).to, UnitState::Failed);
    assert_eq!(st(4).payload["exit_code"], "137");
    assert_eq!(st(5).to, UnitState::Failed);
    assert!(st(5).payload["reason"].contains("never.dat"));
    assert_eq!(st(6).to, UnitState::Done);
    assert_eq!(std::fs::read_to_string(dir.join("out/out.dat")).unwrap(), "hi\n");
    assert_eq!(st(7).to, UnitState::Failed);
    assert!(st(7).payload["reason"].starts_with("ImpossibleRequest"));
    assert_eq!(st(8).to, UnitState::Done);
    assert!(!f.contains_key("unit.000099"));

    assert_eq!(report.received, 8);
    assert_eq!((report.done, report.failed, report.canceled), (3, 5, 0));
    assert_eq!(report.conservation_violations, 0);
    assert_eq!(report.stop_reason, Some(StopReason::Shutdown));

    // Every unit's updates form a forward path, each `from` matching the previous `to`.
    let mut last: BTreeMap<String, UnitState> = BTreeMap::new();
    for u in updates(dir) {
        let prev = last
            .insert(u.unit_id.clone(), u.to)
            .unwrap_or(UnitState::AgentStagingInput);
        assert_eq!(u.from, prev, "{}", u.unit_id);
        pilotkit_core::transition(u.from, u.to).unwrap();
    }
    let sandbox = dir.join(PILOT).join("unit.000001");
    assert!(sandbox.join("STDOUT").exists() && sandbox.join("STDERR").exists());
}

#[test]
fn concurrent_units_overlap() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let (_c, h) = start(config(dir, 64, 60.0));
    let units: Vec<Unit> = (0..64)
        .map(|i| unit(i, UnitDescription::new("/bin/sleep").args(["1"])))
        .collect();
    send(
        dir,
        InboxMsg::Units {
            pilot: PILOT.into(),
            units,
        },
    );
    wait_terminal(dir, 64, Duration::from_secs(30));
    send(dir, InboxMsg::Shutdown { pilot: PILOT.into() });
    h.join().unwrap();
    let ups = updates(dir);
    let start = |id: &str| {
        ups.iter()
            .find(|u| u.unit_id == id && u.to == UnitState::Executing)
            .unwrap()
            .timestamp
            .mono_ns
    };
    let end = |id: &str| {
        ups.iter()
            .find(|u| u.unit_id == id && u.from == UnitState::Executing)
            .unwrap()
            .timestamp
            .mono_ns
    };
    let ids: Vec<String> = (0..64).map(|i| format!("unit.{i:06}")).collect();
    let latest_start = ids.iter().map(|i| start(i)).max().unwrap();
    let earliest_end = ids.iter().map(|i| end(i)).min().unwrap();
    assert!(
        latest_start < earliest_end,
        "all 64 EXECUTING intervals share a common instant"
    );
}

#[test]
fn walltime_cancels_running_and_waiting_units() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let (_c, h) = start(config(dir, 1, 1.0));
    let units: Vec<Unit> = (0..3)
        .map(|i| unit(i, UnitDescription::new("/bin/sleep").args(["30"])))
        .collect();
    send(
        dir,
        InboxMsg::Units {
            pilot: PILOT.into(),
            units,
        },
    );
    let t0 = Instant::now();
    let report = h.join().unwrap();
    assert!(t0.elapsed() < Duration::from_secs(10));
    assert_eq!(report.stop_reason, Some(StopReason::Walltime));
    assert_eq!(report.canceled, 3);
    let f = finals(dir);
    assert!(f
        .values()
        .all(|u| u.to == UnitState::Canceled && u.payload["reason"] == "walltime"));
    assert!(f.values().any(|u| u.from == UnitState::Executing));
}

#[test]
fn cancel_flag_stops_agent() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let (cancel, h) = start(config(dir, 2, 600.0));
    send(
        dir,
        InboxMsg::Units {
            pilot: PILOT.into(),
            units: vec![unit(1, UnitDescription::new("/bin/sleep").args(["30"]))],
        },
    );
    thread::sleep(Duration::from_millis(300));
    cancel.store(true, std::sync::atomic::Ordering::SeqCst);
    let report = h.join().unwrap();
    assert_eq!(report.stop_reason, Some(StopReason::Canceled));
    assert_eq!(finals(dir)["unit.000001"].payload["reason"], "canceled");
}

#[test]
fn linked_inputs_share_one_copy() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let shared = dir.join("shared_in");
    std::fs::create_dir_all(&shared).unwrap();
    let names = [
        "FRF.itp",
        "dynamic.mdp",
        "FF.itp",
        "martini_v2.2.itp",
        "85-20.top",
        "init85-20.gro",
    ];
    for n in names {
        std::fs::write(shared.join(n), n).unwrap();
    }
    let (_c, h) = start(config(dir, 4, 60.0));
    let units: Vec<Unit> = (0..2)
        .map(|i| {
            let mut cud = sh("cat FRF.itp dynamic.mdp FF.itp martini_v2.2.itp 85-20.top init85-20.gro");
            cud.input_staging = names
                .iter()
                .map(|n| {
                    pilotkit_core::StagingDirective::new(
                        shared.join(n).to_string_lossy(),
                        *n,
                        pilotkit_core::StagingMode::Link,
                    )
                })
                .collect();
            unit(i, cud)
        })
        .collect();
    send(
        dir,
        InboxMsg::Units {
            pilot: PILOT.into(),
            units,
        },
    );
    wait_terminal(dir, 2, Duration::from_secs(20));
    send(dir, InboxMsg::Shutdown { pilot: PILOT.into() });
    assert_eq!(h.join().unwrap().done, 2);
    for i in 0..2 {
        let sb = dir.join(PILOT).join(format!("unit.{i:06}"));
        for n in names {
            let target = std::fs::read_link(sb.join(n)).unwrap();
            assert_eq!(target, shared.join(n));
        }
        assert_eq!(std::fs::read_to_string(sb.join("STDOUT")).unwrap(), names.concat());
    }
}
