use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use pilotkit::client::SessionOptions;
use pilotkit::ensemble::{
    replay_journal, AppHandle, AppManager, EnsembleComponent, EnsembleError, EnsembleOptions, EnsembleReport, FaultPlan,
};
use pilotkit::mesh::store;
use pilotkit_core::state::{PipelineState, TaskState};
use pilotkit_core::workflow::{
    CpuReqs, FailurePolicy, Mutation, Pipeline, ProcessType, ResourceDesc, Stage, Task, WorkflowError,
};
use pilotkit_core::{EntityKind, Event};

fn options(root: &Path) -> EnsembleOptions {
    EnsembleOptions {
        session: SessionOptions {
            data_root: root.to_path_buf(),
            agent_executors: Some(2),
            shutdown_timeout: Duration::from_secs(10),
            ..SessionOptions::default()
        },
        session_root: root.join("sessions"),
        heartbeat_interval: Duration::from_millis(100),
        ..EnsembleOptions::default()
    }
}

fn local(cpus: u32) -> ResourceDesc {
    ResourceDesc {
        resource: "local".into(),
        walltime: 10,
        cpus,
        gpus: 0,
    }
}

fn sh(uid: &str, cmd: &str) -> Task {
    Task::new(uid, "/bin/sh").args(["-c", cmd])
}

/// Pipelines `p{i}` with stages `p{i}.s{j}` of tasks `p{i}.s{j}.t{k}`.
fn workflow(shape: &[Vec<usize>], cmd: impl Fn(&str) -> String) -> Vec<Pipeline> {
    shape
        .iter()
        .enumerate()
        .map(|(i, stages)| {
            let stages = stages
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    let sid = format!("p{i}.s{j}");
                    let tasks = (0..n)
                        .map(|k| {
                            let uid = format!("{sid}.t{k}");
                            sh(&uid, &cmd(&uid))
                        })
                        .collect();
                    Stage::new(sid, tasks)
                })
                .collect();
            Pipeline::new(format!("p{i}"), stages)
        })
        .collect()
}

fn app(opts: EnsembleOptions, wf: Vec<Pipeline>, res: ResourceDesc) -> AppManager {
    let mut am = AppManager::new(opts);
    am.set_workflow(wf).unwrap();
    am.set_resource_desc(res);
    am
}

fn events(r: &EnsembleReport) -> Vec<Event> {
    store::replay_events(&r.session_dir)
        .unwrap()
        .records
        .into_iter()
        .map(|(_, e)| e)
        .collect()
}

fn at(events: &[Event], kind: EntityKind, id: &str, names: &[&str]) -> Option<u64> {
    events
        .iter()
        .find(|e| e.entity_kind == kind && e.entity_id == id && names.contains(&e.event_name.as_str()))
        .map(|e| e.timestamp.mono_ns)
}

/// (start, end) of the EXECUTING interval of each task's unit.
fn executing(events: &[Event]) -> BTreeMap<String, (u64, u64)> {
    let unit_of: BTreeMap<&str, &str> = events
        .iter()
        .filter(|e| e.entity_kind == EntityKind::Task && e.event_name == "SUBMITTED")
        .filter_map(|e| Some((e.entity_id.as_str(), e.get("unit")?)))
        .collect();
    unit_of
        .iter()
        .filter_map(|(task, unit)| {
            let start = at(events, EntityKind::Unit, unit, &["EXECUTING"])?;
            let end = at(
                events,
                EntityKind::Unit,
                unit,
                &["AGENT_STAGING_OUTPUT", "FAILED", "CANCELED"],
            )?;
            Some((task.to_string(), (start, end)))
        })
        .collect()
}

/// Counts stage boundaries where a task of stage i started before the last
/// task of stage i-1 ended.
fn stage_violations(wf: &[Pipeline], events: &[Event]) -> usize {
    let mut bad = 0;
    for p in wf {
        for pair in p.stages.windows(2) {
            let prev_end = pair[0]
                .tasks
                .iter()
                .filter_map(|t| at(events, EntityKind::Task, &t.uid, &["DONE", "FAILED"]))
                .max();
            let next_start = pair[1]
                .tasks
                .iter()
                .filter_map(|t| at(events, EntityKind::Task, &t.uid, &["SCHEDULED"]))
                .min();
            if let (Some(end), Some(start)) = (prev_end, next_start) {
                if start < end {
                    bad += 1;
                }
            }
        }
    }
    bad
}

fn start_in_thread(mut am: AppManager) -> (AppHandle, thread::JoinHandle<Result<EnsembleReport, EnsembleError>>) {
    let h = am.handle();
    let j = thread::spawn(move || am.run());
    let end = Instant::now() + Duration::from_secs(10);
    while !h.is_running() {
        assert!(Instant::now() < end);
        thread::sleep(Duration::from_millis(5));
    }
    (h, j)
}

fn wait_for(h: &AppHandle, what: &str, pred: impl Fn(&pilotkit_core::workflow::AppManagerState) -> bool) {
    let end = Instant::now() + Duration::from_secs(30);
    loop {
        if pred(&h.snapshot().unwrap()) {
            return;
        }
        assert!(Instant::now() < end, "timed out waiting for {what}");
        thread::sleep(Duration::from_millis(10));
    }
}

fn state_of(s: &pilotkit_core::workflow::AppManagerState, uid: &str) -> TaskState {
    s.task(uid).unwrap().state
}

#[test]
fn listing_workflow_runs_to_completion() {
    let d = tempfile::tempdir().unwrap();
    let tasks = (0..128)
        .map(|i| {
            let mut t = Task::new(format!("t{i:03}"), "/bin/true");
            t.cpu_reqs = CpuReqs {
                processes: 24,
                process_type: ProcessType::Parallel,
            };
            t
        })
        .collect();
    let wf = vec![Pipeline::new("p", vec![Stage::new("s", tasks)])];
    let res = ResourceDesc {
        resource: "sim-3072".into(),
        walltime: 120,
        cpus: 3072,
        gpus: 0,
    };
    let mut am = app(options(d.path()), wf, res);
    let r = am.run().unwrap();
    assert_eq!(r.count(TaskState::Done), 128);
    assert_eq!(r.pipelines["p"], PipelineState::Done);
    assert!(r.is_success());
    let ev = events(&r);
    let cores: BTreeSet<&str> = ev
        .iter()
        .filter(|e| e.entity_kind == EntityKind::Unit && e.event_name == "EXECUTING")
        .filter_map(|e| e.get("cores"))
        .collect();
    assert_eq!(cores, BTreeSet::from(["24"]));
}

#[test]
fn invalid_workflows_rejected() {
    let mut am = AppManager::new(EnsembleOptions::default());
    assert_eq!(
        am.set_workflow(vec![Pipeline::new("p", vec![])]),
        Err(WorkflowError::EmptyPipeline("p".into()))
    );
    let shared = Task::new("t", "/bin/true");
    let dup = vec![
        Pipeline::new("a", vec![Stage::new("a.s", vec![shared.clone()])]),
        Pipeline::new("b", vec![Stage::new("b.s", vec![shared])]),
    ];
    assert_eq!(am.set_workflow(dup), Err(WorkflowError::DuplicateUid("t".into())));
    assert!(matches!(am.run(), Err(EnsembleError::NoWorkflow)));
}

#[test]
fn each_run_uses_a_fresh_session() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![2, 1]], |_| "true".into());
    let mut am = app(options(d.path()), wf, local(4));
    let a = am.run().unwrap();
    let b = am.run().unwrap();
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(a.tasks, b.tasks);
    assert!(a.is_success() && b.is_success());
}

#[test]
fn stages_run_in_order_and_tasks_within_a_stage_overlap() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![4, 4], vec![1, 2, 1]], |_| "sleep 0.3".into());
    let mut am = app(options(d.path()), wf.clone(), local(8));
    let r = am.run().unwrap();
    assert!(r.is_success());
    let ev = events(&r);
    assert_eq!(stage_violations(&wf, &ev), 0);
    let iv = executing(&ev);
    for s in &wf[0].stages {
        for a in &s.tasks {
            for b in &s.tasks {
                let (x, y) = (iv[&a.uid], iv[&b.uid]);
                assert!(x.0 < y.1 && y.0 < x.1, "{} and {} do not overlap", a.uid, b.uid);
            }
        }
    }
}

#[test]
fn fail_fast_stops_only_the_failing_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![2, 2], vec![2, 2]], |uid| {
        if uid == "p0.s0.t1" {
            "exit 3".into()
        } else {
            "true".into()
        }
    });
    let mut am = app(options(d.path()), wf, local(4));
    let r = am.run().unwrap();
    assert_eq!(r.pipelines["p0"], PipelineState::Stopped);
    assert_eq!(r.pipelines["p1"], PipelineState::Done);
    assert_eq!(r.tasks["p0.s0.t1"], TaskState::Failed);
    assert_eq!(r.tasks["p0.s1.t0"], TaskState::Specified);
    assert_eq!(r.count(TaskState::Done), 5);
    assert!(!r.is_success());
}

#[test]
fn continue_policy_runs_later_stages() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![2, 1]], |uid| {
        if uid == "p0.s0.t0" {
            "false".into()
        } else {
            "true".into()
        }
    });
    let opts = EnsembleOptions {
        failure_policy: FailurePolicy::Continue,
        ..options(d.path())
    };
    let r = app(opts, wf, local(4)).run().unwrap();
    assert_eq!(r.pipelines["p0"], PipelineState::Done);
    assert_eq!(r.tasks["p0.s1.t0"], TaskState::Done);
    assert_eq!(r.count(TaskState::Failed), 1);
}

#[test]
fn suspend_holds_the_next_stage_until_resume() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![2, 2], vec![1]], |_| "sleep 0.3".into());
    let (h, j) = start_in_thread(app(options(d.path()), wf, local(4)));
    h.suspend("p0").unwrap();
    assert!(matches!(
        h.suspend("p0"),
        Err(EnsembleError::Workflow(WorkflowError::InvalidControl { .. }))
    ));
    assert!(matches!(
        h.resume("p1"),
        Err(EnsembleError::Workflow(WorkflowError::InvalidControl { .. }))
    ));
    // Stage 0 drains while suspended, but stage 1 is never dispatched.
    wait_for(&h, "stage 0", |s| s.pipeline("p0").unwrap().cursor == 1);
    thread::sleep(Duration::from_millis(300));
    let s = h.snapshot().unwrap();
    assert_eq!(state_of(&s, "p0.s1.t0"), TaskState::Specified);
    assert_eq!(s.pipeline("p0").unwrap().control, PipelineState::Suspended);
    h.resume("p0").unwrap();
    let r = j.join().unwrap().unwrap();
    assert!(r.is_success());
    assert!(matches!(h.resume("p0"), Err(EnsembleError::NotRunning)));
}

#[test]
fn stop_abandons_undispatched_work() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![1, 1, 1], vec![1]], |_| "sleep 0.2".into());
    let (h, j) = start_in_thread(app(options(d.path()), wf, local(4)));
    h.stop("p0").unwrap();
    let r = j.join().unwrap().unwrap();
    assert_eq!(r.pipelines["p0"], PipelineState::Stopped);
    assert_eq!(r.pipelines["p1"], PipelineState::Done);
    assert_eq!(r.tasks["p0.s2.t0"], TaskState::Specified);
}

#[test]
fn adaptation_ahead_of_the_cursor() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![2]], |_| "sleep 0.4".into());
    let (h, j) = start_in_thread(app(options(d.path()), wf, local(8)));
    wait_for(&h, "dispatch", |s| state_of(s, "p0.s0.t0") != TaskState::Specified);
    let late = Task::new("late", "/bin/true");
    assert!(matches!(
        h.adapt(Mutation::AddTasks {
            pipeline: "p0".into(),
            stage: "p0.s0".into(),
            tasks: vec![late.clone()],
        }),
        Err(EnsembleError::Workflow(WorkflowError::ImmutablePast(_)))
    ));
    h.adapt(Mutation::AddStages {
        pipeline: "p0".into(),
        stages: vec![Stage::new("p0.extra", vec![late])],
    })
    .unwrap();
    h.adapt(Mutation::AddPipelines {
        pipelines: workflow(&[vec![], vec![2]], |_| "sleep 0.4".into()).split_off(1),
    })
    .unwrap();
    let r = j.join().unwrap().unwrap();
    assert!(r.is_success(), "{r:?}");
    assert_eq!(r.tasks.len(), 5);
    let ev = events(&r);
    let late_start = at(&ev, EntityKind::Task, "late", &["SCHEDULED"]).unwrap();
    for t in ["p0.s0.t0", "p0.s0.t1"] {
        assert!(at(&ev, EntityKind::Task, t, &["DONE"]).unwrap() <= late_start);
    }
    let iv = executing(&ev);
    let (a, b) = (iv["p0.s0.t0"], iv["p1.s0.t0"]);
    assert!(a.0 < b.1 && b.0 < a.1, "added pipeline did not run alongside");
}

#[test]
fn journal_alone_rebuilds_the_final_state() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![2, 3], vec![1, 1]], |uid| {
        if uid == "p1.s0.t0" {
            "false".into()
        } else {
            "true".into()
        }
    });
    let r = app(options(d.path()), wf, local(4)).run().unwrap();
    let s = replay_journal(&r.session_dir).unwrap();
    assert_eq!(s.task_states(), r.tasks);
    assert_eq!(s.pipeline_states(), r.pipelines);
    assert_eq!(s.pipeline("p0").unwrap().cursor, 2);
    assert_eq!(s.pipeline("p1").unwrap().cursor, 0);
    assert!(s.is_finished());
}

fn side_effect_workflow(dir: &Path) -> Vec<Pipeline> {
    let out = dir.join("effects");
    fs::create_dir_all(&out).unwrap();
    let out = out.display().to_string();
    workflow(&[vec![3, 2], vec![4]], move |uid| format!("echo x >> {out}/{uid}"))
}

fn effects(dir: &Path) -> BTreeMap<String, usize> {
    fs::read_dir(dir.join("effects"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let n = fs::read_to_string(e.path()).unwrap().lines().count();
            (e.file_name().to_string_lossy().into_owned(), n)
        })
        .collect()
}

#[test]
fn killed_components_are_recovered_without_loss() {
    let reference = {
        let d = tempfile::tempdir().unwrap();
        let r = app(options(d.path()), side_effect_workflow(d.path()), local(4))
            .run()
            .unwrap();
        assert_eq!(r.resubmissions, 0);
        assert!(r.restarts.is_empty());
        r.done_tasks()
    };
    assert_eq!(reference.len(), 9);
    for (component, after) in [
        (EnsembleComponent::WfProcessor, 2),
        (EnsembleComponent::WfProcessor, 9),
        (EnsembleComponent::TaskManager, 0),
        (EnsembleComponent::TaskManager, 4),
        (EnsembleComponent::TaskManager, 11),
    ] {
        let d = tempfile::tempdir().unwrap();
        let opts = EnsembleOptions {
            faults: vec![FaultPlan {
                component,
                after_messages: after,
                times: 1,
            }],
            ..options(d.path())
        };
        let r = app(opts, side_effect_workflow(d.path()), local(4)).run().unwrap();
        assert_eq!(r.done_tasks(), reference, "{component} after {after}");
        assert_eq!(r.restarts.get(&component), Some(&1), "{component} after {after}");
        let fx = effects(d.path());
        assert_eq!(fx.keys().cloned().collect::<BTreeSet<_>>(), reference);
        assert!(fx.values().all(|&n| n >= 1));
    }
}

#[test]
fn explicit_recovery_with_nothing_lost() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![2, 1]], |_| "sleep 0.3".into());
    let (h, j) = start_in_thread(app(options(d.path()), wf, local(4)));
    wait_for(&h, "submission", |s| {
        ["p0.s0.t0", "p0.s0.t1"]
            .iter()
            .all(|t| state_of(s, t) == TaskState::Submitted)
    });
    h.recover(EnsembleComponent::TaskManager).unwrap();
    h.recover(EnsembleComponent::WfProcessor).unwrap();
    let r = j.join().unwrap().unwrap();
    assert!(r.is_success());
    assert_eq!(r.resubmissions, 0);
    assert_eq!(r.restarts.values().sum::<u32>(), 2);
}

#[test]
fn restarts_without_progress_abort_the_run() {
    let d = tempfile::tempdir().unwrap();
    let wf = workflow(&[vec![1]], |_| "sleep 30".into());
    let (h, j) = start_in_thread(app(options(d.path()), wf, local(4)));
    for _ in 0..5 {
        h.recover(EnsembleComponent::TaskManager).unwrap();
    }
    let loop_err = h.recover(EnsembleComponent::WfProcessor);
    assert!(
        matches!(loop_err, Err(EnsembleError::RecoveryLoop { restarts: 5, .. })),
        "{loop_err:?}"
    );
    let t = Instant::now();
    assert!(matches!(j.join().unwrap(), Err(EnsembleError::RecoveryLoop { .. })));
    assert!(t.elapsed() < Duration::from_secs(20));
}

#[test]
fn oversized_resource_request_fails_acquisition() {
    let d = tempfile::tempdir().unwrap();
    let mut am = app(
        options(d.path()),
        workflow(&[vec![1]], |_| "true".into()),
        local(100_000),
    );
    assert!(matches!(am.run(), Err(EnsembleError::ResourceAcquisitionFailed(_))));
}
