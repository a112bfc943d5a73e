//! The per-pilot agent: stager-in, scheduler, executor, stager-out, connected
//! by queues, reading units from the bridge inbox and reporting every state
//! change to the bridge outbox.
//!
//! Thread layout:
//! - the calling thread polls the inbox and watches walltime and cancellation;
//! - `stagers` input stagers and `stagers` output stagers;
//! - one scheduler owning the slot table;
//! - `executors` executors that spawn unit processes;
//! - one reaper collecting exit statuses of all running units;
//! - one updater appending to the outbox.

pub mod staging;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use pilotkit_core::launch::{build_launch_command, LaunchCommand};
use pilotkit_core::slots::{AllocError, Request, SlotScheduler, SlotTable, Submitted};
use pilotkit_core::{EntityKind, Event, Unit, UnitState};

use crate::bridge::{unit_sandbox, AgentConfig, InboxMsg, OutboxMsg, UnitUpdate};
use crate::clock;
use crate::mesh::store::{self, LogTail, StoreError};
use crate::mesh::{Queue, DEFAULT_BULK};

pub use staging::{collect_outputs, link_inputs, StagingError};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot start agent thread: {0}")]
    Spawn(std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Shutdown,
    Walltime,
    Canceled,
}

impl StopReason {
    fn code(self) -> u8 {
        self as u8 + 1
    }

    fn from_code(c: u8) -> Option<StopReason> {
        [StopReason::Shutdown, StopReason::Walltime, StopReason::Canceled]
            .into_iter()
            .find(|r| r.code() == c)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Shutdown => "shutdown",
            StopReason::Walltime => "walltime",
            StopReason::Canceled => "canceled",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AgentReport {
    pub pilot: String,
    pub received: usize,
    pub done: usize,
    pub failed: usize,
    pub canceled: usize,
    pub scheduler_events: u64,
    pub conservation_violations: u64,
    pub stop_reason: Option<StopReason>,
}

/// State shared by all agent threads: where to report, and whether the agent
/// is shutting down.
#[derive(Clone)]
struct Ctx {
    pilot: String,
    out: Queue<OutboxMsg>,
    stop: Arc<AtomicU8>,
    active: Arc<AtomicUsize>,
}

impl Ctx {
    fn stopping(&self) -> Option<StopReason> {
        StopReason::from_code(self.stop.load(Ordering::SeqCst))
    }

    fn update(&self, unit: &mut Unit, to: UnitState, component: &str, payload: BTreeMap<String, String>) {
        let msg = OutboxMsg::Unit(UnitUpdate {
            pilot: self.pilot.clone(),
            unit_id: unit.id.clone(),
            from: unit.state,
            to,
            timestamp: clock::now(),
            component: component.into(),
            payload,
        });
        unit.state = to;
        // The updater outlives every stage, so the queue is open here.
        let _ = self.out.put(msg);
        if matches!(to, UnitState::Done | UnitState::Failed | UnitState::Canceled) {
            self.active.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn fail(&self, unit: &mut Unit, component: &str, reason: String) {
        self.update(
            unit,
            UnitState::Failed,
            component,
            BTreeMap::from([("reason".into(), reason)]),
        );
    }

    fn cancel(&self, unit: &mut Unit, component: &str, why: StopReason) {
        self.update(
            unit,
            UnitState::Canceled,
            component,
            BTreeMap::from([("reason".into(), why.as_str().into())]),
        );
    }

    fn record(&self, event: Event) {
        let _ = self.out.put(OutboxMsg::Record {
            pilot: self.pilot.clone(),
            event,
        });
    }
}

enum SchedMsg {
    Unit(Box<Unit>),
    Release(String),
    Stop(StopReason),
}

struct Running {
    unit: Unit,
    child: Child,
}

fn worker<T: Send + 'static>(
    name: String,
    q: Queue<T>,
    mut f: impl FnMut(T) + Send + 'static,
) -> Result<JoinHandle<()>, AgentError> {
    thread::Builder::new()
        .name(name)
        .spawn(move || {
            while let Ok(batch) = q.get_bulk(DEFAULT_BULK, POLL) {
                for m in batch {
                    f(m);
                }
            }
        })
        .map_err(AgentError::Spawn)
}

fn is_executable(p: &Path) -> bool {
    p.metadata()
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

/// Resolves the unit's executable the way the shell will, so a missing
/// program is reported as a spawn failure rather than exit status 127.
fn check_executable(exe: &str, cmd: &LaunchCommand) -> Result<(), String> {
    if exe.contains('/') {
        let p = Path::new(&cmd.working_dir).join(exe);
        return if is_executable(&p) {
            Ok(())
        } else {
            Err(format!("{exe} is missing or not executable"))
        };
    }
    let path = cmd
        .environment
        .get("PATH")
        .cloned()
        .or_else(|| std::env::var("PATH").ok())
        .unwrap_or_default();
    if std::env::split_paths(&path).any(|d| is_executable(&d.join(exe))) {
        Ok(())
    } else {
        Err(format!("{exe} not found on PATH"))
    }
}

fn spawn_unit(cmd: &LaunchCommand) -> std::io::Result<Child> {
    let stdout = File::create(&cmd.stdout)?;
    let stderr = File::create(&cmd.stderr)?;
    Command::new("/bin/sh")
        .arg("-c")
        .arg(&cmd.script)
        .current_dir(&cmd.working_dir)
        .envs(&cmd.environment)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .process_group(0)
        .spawn()
}

fn kill_group(child: &Child) {
    // SAFETY: the child leads its own process group and is not reaped yet.
    unsafe {
        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
    }
}

fn placement_payload(unit: &Unit, pilot: &str) -> BTreeMap<String, String> {
    let mut m = BTreeMap::from([
        ("cores".to_string(), unit.description.cores.to_string()),
        ("pilot".to_string(), pilot.to_string()),
    ]);
    if let Some(p) = &unit.placement {
        m.insert("nodes".into(), p.node_names().collect::<Vec<_>>().join(","));
    }
    m
}

/// Runs the agent until the client sends a shutdown, walltime expires or
/// `cancel` is set. Units still in progress at that point are canceled.
pub fn run_agent(cfg: &AgentConfig, cancel: Arc<AtomicBool>) -> Result<AgentReport, AgentError> {
    let started = Instant::now();
    let deadline = started + Duration::from_secs_f64(cfg.runtime_secs.max(0.0));
    std::fs::create_dir_all(cfg.pilot_dir()).map_err(StoreError::Io)?;
    let outbox = store::outbox_path(&cfg.session_dir);
    let inbox = store::inbox_path(&cfg.session_dir);

    let ctx = Ctx {
        pilot: cfg.pilot_id.clone(),
        out: Queue::new(format!("{}.updater", cfg.pilot_id)),
        stop: Arc::new(AtomicU8::new(0)),
        active: Arc::new(AtomicUsize::new(0)),
    };
    let stage_in: Queue<Unit> = Queue::new("stager_in");
    let sched: Queue<SchedMsg> = Queue::new("scheduler");
    let exec: Queue<Unit> = Queue::new("executor");
    let reap: Queue<Running> = Queue::new("reaper");
    let stage_out: Queue<Unit> = Queue::new("stager_out");

    let updater = {
        let q = ctx.out.clone();
        let path = outbox.clone();
        thread::Builder::new()
            .name(format!("{}.updater", cfg.pilot_id))
            .spawn(move || -> Result<[usize; 3], StoreError> {
                let mut tally = [0usize; 3];
                while let Ok(batch) = q.get_bulk(DEFAULT_BULK, POLL) {
                    for m in &batch {
                        if let OutboxMsg::Unit(u) = m {
                            match u.to {
                                UnitState::Done => tally[0] += 1,
                                UnitState::Failed => tally[1] += 1,
                                UnitState::Canceled => tally[2] += 1,
                                _ => {}
                            }
                        }
                    }
                    store::append_shared(&path, &batch)?;
                }
                Ok(tally)
            })
            .map_err(AgentError::Spawn)?
    };

    ctx.record(
        Event::new(
            clock::now(),
            EntityKind::Component,
            format!("{}.agent", cfg.pilot_id),
            "agent_started",
            "agent",
        )
        .with("cores", cfg.cores.to_string()),
    );

    let mut stages = Vec::new();
    for i in 0..cfg.stagers.max(1) {
        let (c, sched, session) = (ctx.clone(), sched.clone(), cfg.session_dir.clone());
        let name = format!("stager_in.{i}");
        stages.push(worker(name.clone(), stage_in.clone(), move |mut unit: Unit| {
            if let Some(why) = c.stopping() {
                return c.cancel(&mut unit, &name, why);
            }
            let sandbox = unit_sandbox(&session, &c.pilot, &unit.id);
            unit.sandbox = Some(sandbox.to_string_lossy().into_owned());
            match link_inputs(&unit, &sandbox) {
                Ok(()) => {
                    c.update(&mut unit, UnitState::AgentScheduling, &name, BTreeMap::new());
                    let _ = sched.put(SchedMsg::Unit(Box::new(unit)));
                }
                Err(e) => c.fail(&mut unit, &name, e.to_string()),
            }
        })?);
    }

    let scheduler = {
        let c = ctx.clone();
        let exec = exec.clone();
        let q = sched.clone();
        let table = SlotTable::for_pilot(
            cfg.cores as usize,
            cfg.gpus as usize,
            cfg.resource.cores_per_node as usize,
            cfg.resource.gpus_per_node as usize,
        );
        thread::Builder::new()
            .name("scheduler".into())
            .spawn(move || {
                let name = "scheduler";
                let mut s = SlotScheduler::new(table);
                let mut waiting: BTreeMap<String, Unit> = BTreeMap::new();
                let (mut events, mut violations) = (0u64, 0u64);
                let mut stopped: Option<StopReason> = None;
                let place = |mut u: Unit, p, exec: &Queue<Unit>| {
                    u.placement = Some(p);
                    let _ = exec.put(u);
                };
                while let Ok(batch) = q.get_bulk(DEFAULT_BULK, POLL) {
                    for m in batch {
                        match m {
                            SchedMsg::Unit(u) => {
                                let mut u = *u;
                                if let Some(why) = stopped {
                                    c.cancel(&mut u, name, why);
                                    continue;
                                }
                                let d = &u.description;
                                match s.submit(&u.id, Request::new(d.cores, d.gpus, d.mpi)) {
                                    Ok(Submitted::Placed(p)) => place(u, p, &exec),
                                    Ok(Submitted::Waiting) => {
                                        waiting.insert(u.id.clone(), u);
                                    }
                                    Err(AllocError::Impossible | AllocError::NoFit) => {
                                        let reason = format!(
                                            "ImpossibleRequest: {} cores/{} gpus on a {}-core pilot",
                                            u.description.cores,
                                            u.description.gpus,
                                            s.table().total_cores()
                                        );
                                        c.fail(&mut u, name, reason);
                                    }
                                }
                            }
                            SchedMsg::Release(id) => match s.release(&id) {
                                Ok(placed) => {
                                    for p in placed {
                                        if let Some(u) = waiting.remove(&p.unit_id) {
                                            place(u, p, &exec);
                                        }
                                    }
                                }
                                Err(e) => log::error!("{e}"),
                            },
                            SchedMsg::Stop(why) => {
                                stopped = Some(why);
                                for (id, mut u) in std::mem::take(&mut waiting) {
                                    s.withdraw(&id);
                                    c.cancel(&mut u, name, why);
                                }
                            }
                        }
                        events += 1;
                        if !s.is_conserved() {
                            violations += 1;
                        }
                    }
                }
                c.record(
                    Event::new(
                        clock::now(),
                        EntityKind::Component,
                        format!("{}.scheduler", c.pilot),
                        "scheduler_stats",
                        name,
                    )
                    .with("events", events.to_string())
                    .with("violations", violations.to_string())
                    .with("pilot", c.pilot.clone()),
                );
                (events, violations)
            })
            .map_err(AgentError::Spawn)?
    };

    let executors = cfg.executors.max(1);
    for i in 0..executors {
        let (c, sched, reap, resource) = (ctx.clone(), sched.clone(), reap.clone(), cfg.resource.clone());
        let name = format!("executor.{i}");
        stages.push(worker(name.clone(), exec.clone(), move |mut unit: Unit| {
            let release = |id: String| {
                let _ = sched.put(SchedMsg::Release(id));
            };
            if let Some(why) = c.stopping() {
                c.cancel(&mut unit, &name, why);
                return release(unit.id);
            }
            let placement = unit.placement.clone().expect("scheduled units carry a placement");
            let cmd = match build_launch_command(&unit, &placement, &resource) {
                Ok(cmd) => cmd,
                Err(e) => {
                    c.fail(&mut unit, &name, e.to_string());
                    return release(unit.id);
                }
            };
            if let Err(e) = check_executable(&unit.description.executable, &cmd) {
                c.fail(&mut unit, &name, format!("SpawnFailure: {e}"));
                return release(unit.id);
            }
            match spawn_unit(&cmd) {
                Ok(child) => {
                    let payload = placement_payload(&unit, &c.pilot);
                    c.update(&mut unit, UnitState::Executing, &name, payload);
                    let _ = reap.put(Running { unit, child });
                }
                Err(e) => {
                    c.fail(&mut unit, &name, format!("SpawnFailure: {e}"));
                    release(unit.id);
                }
            }
        })?);
    }

    let reaper = {
        let (c, sched, stage_out, q) = (ctx.clone(), sched.clone(), stage_out.clone(), reap.clone());
        thread::Builder::new()
            .name("reaper".into())
            .spawn(move || {
                let name = "executor.reaper";
                let mut running: Vec<Running> = Vec::new();
                let mut idle = Duration::from_millis(1);
                loop {
                    let fresh = match q.try_get_bulk(DEFAULT_BULK) {
                        Ok(b) => b,
                        Err(_) if running.is_empty() => break,
                        Err(_) => Vec::new(),
                    };
                    running.extend(fresh);
                    let stop = c.stopping();
                    let mut finished = false;
                    let mut i = 0;
                    while i < running.len() {
                        if stop.is_some() {
                            kill_group(&running[i].child);
                        }
                        let status = match running[i].child.try_wait() {
                            Ok(Some(s)) => s,
                            Ok(None) => {
                                i += 1;
                                continue;
                            }
                            Err(e) => {
                                log::error!("wait on {} failed: {e}", running[i].unit.id);
                                kill_group(&running[i].child);
                                match running[i].child.wait() {
                                    Ok(s) => s,
                                    Err(_) => std::process::ExitStatus::from_raw(libc::SIGKILL),
                                }
                            }
                        };
                        finished = true;
                        let Running { mut unit, .. } = running.swap_remove(i);
                        let id = unit.id.clone();
                        match (status.code(), status.signal(), stop) {
                            (Some(0), _, _) => {
                                unit.exit_code = Some(0);
                                c.update(&mut unit, UnitState::AgentStagingOutput, name, BTreeMap::new());
                                let _ = stage_out.put(unit);
                            }
                            (Some(code), _, _) => {
                                unit.exit_code = Some(code);
                                let payload = BTreeMap::from([
                                    ("exit_code".to_string(), code.to_string()),
                                    ("reason".to_string(), format!("exit status {code}")),
                                ]);
                                c.update(&mut unit, UnitState::Failed, name, payload);
                            }
                            (None, _, Some(why)) => c.cancel(&mut unit, name, why),
                            (None, sig, None) => {
                                let code = 128 + sig.unwrap_or(0);
                                let payload = BTreeMap::from([
                                    ("exit_code".to_string(), code.to_string()),
                                    ("reason".to_string(), format!("killed by signal {}", sig.unwrap_or(0))),
                                ]);
                                c.update(&mut unit, UnitState::Failed, name, payload);
                            }
                        }
                        let _ = sched.put(SchedMsg::Release(id));
                    }
                    if finished {
                        idle = Duration::from_millis(1);
                    } else {
                        idle = (idle * 2).min(Duration::from_millis(10));
                    }
                    if running.is_empty() {
                        // Block for new children instead of spinning.
                        match q.get_bulk(DEFAULT_BULK, POLL) {
                            Ok(b) => running.extend(b),
                            Err(_) => break,
                        }
                    } else {
                        thread::sleep(idle);
                    }
                }
            })
            .map_err(AgentError::Spawn)?
    };

    for i in 0..cfg.stagers.max(1) {
        let (c, root) = (ctx.clone(), cfg.output_root.clone());
        let name = format!("stager_out.{i}");
        stages.push(worker(name.clone(), stage_out.clone(), move |mut unit: Unit| {
            let sandbox = PathBuf::from(unit.sandbox.clone().unwrap_or_default());
            match collect_outputs(&unit, &sandbox, &root) {
                Ok(_) => {
                    let payload = BTreeMap::from([("exit_code".to_string(), "0".to_string())]);
                    c.update(&mut unit, UnitState::Done, &name, payload);
                }
                Err(e) => {
                    let payload = BTreeMap::from([
                        ("exit_code".to_string(), "0".to_string()),
                        ("reason".to_string(), e.to_string()),
                    ]);
                    c.update(&mut unit, UnitState::Failed, &name, payload);
                }
            }
        })?);
    }

    // Inbox loop.
    let cursor_name = format!("agent.{}", cfg.pilot_id);
    let resume_at = store::load_cursors(&cfg.session_dir)?
        .get(&cursor_name)
        .copied()
        .unwrap_or(0);
    let mut tail = LogTail::new(&inbox);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut received = 0usize;
    let mut saved = resume_at;
    let poll = Duration::from_millis(cfg.poll_ms.max(1));
    let reason = loop {
        if cancel.load(Ordering::SeqCst) {
            break StopReason::Canceled;
        }
        if Instant::now() >= deadline {
            break StopReason::Walltime;
        }
        let mut shutdown = false;
        let mut batch = Vec::new();
        for (seq, rec) in tail.read_new::<InboxMsg>()? {
            if seq <= resume_at {
                continue;
            }
            match rec {
                Ok(InboxMsg::Units { pilot, units }) if pilot == cfg.pilot_id => {
                    for u in units {
                        if seen.insert(u.id.clone()) {
                            batch.push(u);
                        }
                    }
                }
                Ok(InboxMsg::Shutdown { pilot }) if pilot == cfg.pilot_id => shutdown = true,
                Ok(_) => {}
                Err(e) => log::warn!("inbox: {e}"),
            }
        }
        if !batch.is_empty() {
            received += batch.len();
            ctx.active.fetch_add(batch.len(), Ordering::SeqCst);
            let _ = stage_in.put_bulk(batch);
        }
        if tail.position() > saved {
            saved = tail.position();
            store::save_cursor(&cfg.session_dir, &cursor_name, saved)?;
        }
        if shutdown {
            break StopReason::Shutdown;
        }
        thread::sleep(poll);
    };

    // Stop: cancel whatever has not finished, then wind the pipeline down.
    ctx.stop.store(reason.code(), Ordering::SeqCst);
    let _ = sched.put(SchedMsg::Stop(reason));
    while ctx.active.load(Ordering::SeqCst) > 0 {
        thread::sleep(Duration::from_millis(2));
    }
    for q in [&stage_in, &exec, &stage_out] {
        q.close();
    }
    reap.close();
    sched.close();
    for h in stages {
        let _ = h.join();
    }
    let _ = reaper.join();
    let (scheduler_events, conservation_violations) = scheduler.join().unwrap_or((0, 0));
    ctx.record(
        Event::new(
            clock::now(),
            EntityKind::Component,
            format!("{}.agent", cfg.pilot_id),
            "agent_stopped",
            "agent",
        )
        .with("reason", reason.as_str()),
    );
    ctx.out.close();
    let tally = updater.join().unwrap_or(Ok([0; 3]))?;
    Ok(AgentReport {
        pilot: cfg.pilot_id.clone(),
        received,
        done: tally[0],
        failed: tally[1],
        canceled: tally[2],
        scheduler_events,
        conservation_violations,
        stop_reason: Some(reason),
    })
}
