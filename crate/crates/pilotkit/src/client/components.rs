//! Stateless client workers. Each pulls bulks from its queue and reports to
//! the coordinator; a killed worker drops the bulk it was holding.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use pilotkit_core::batch::JobState;
use pilotkit_core::model::{basename, JobHandle};
use pilotkit_core::placement::{Decision, SchedulingPolicy, UnitPlacer};
use pilotkit_core::{PilotState, StagingDirective, StagingMode, Unit};

use super::{ClientError, CoordMsg, LaunchMsg, PendingUnit, SchedMsg, Shared, StageMsg};
use crate::backend::{backend_for, Backend, JobPayload};
use crate::bridge::{default_executors, shared_dir, unit_sandbox, AgentConfig, STAGED_DIR};
use crate::mesh::{Queue, DEFAULT_BULK};

const POLL: Duration = Duration::from_millis(10);

pub(crate) struct Worker {
    kill: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    pub policy: Option<SchedulingPolicy>,
}

impl Worker {
    /// Stops the worker at its next bulk boundary, discarding that bulk.
    pub fn kill(&mut self) {
        self.kill.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    /// Waits for the worker to exit after its queue was closed.
    pub fn join(&mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Runs `step` on every wakeup (a bulk, or an empty list after a timeout)
/// until the queue is closed or the worker is killed.
fn spawn_loop<T: Send + 'static>(
    name: String,
    q: Queue<T>,
    mut step: impl FnMut(Vec<T>) + Send + 'static,
) -> Result<Worker, ClientError> {
    let kill = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&kill);
    let handle = thread::Builder::new()
        .name(name)
        .spawn(move || loop {
            let batch = match q.get_bulk(DEFAULT_BULK, POLL) {
                Ok(b) => b,
                Err(_) => return,
            };
            if flag.load(Ordering::SeqCst) {
                return;
            }
            step(batch);
        })
        .map_err(ClientError::Spawn)?;
    Ok(Worker {
        kill,
        handle: Some(handle),
        policy: None,
    })
}

fn report(shared: &Shared, msgs: Vec<CoordMsg>) {
    if !msgs.is_empty() {
        let _ = shared.cmd.put_bulk(msgs);
    }
}

struct Tracked {
    handle: JobHandle,
    backend: Arc<dyn Backend>,
    reported: PilotState,
}

fn backend(shared: &Shared, config: &pilotkit_core::launch::ResourceConfig) -> Result<Arc<dyn Backend>, String> {
    let mut b = shared.backends.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(x) = b.get(&config.name) {
        return Ok(Arc::clone(x));
    }
    let x = backend_for(config).map_err(|e| e.to_string())?;
    b.insert(config.name.clone(), Arc::clone(&x));
    Ok(x)
}

fn pilot_update(pilot: &str, to: PilotState, handle: Option<JobHandle>, reason: Option<String>) -> CoordMsg {
    CoordMsg::PilotUpdate {
        pilot: pilot.into(),
        to,
        handle,
        reason,
    }
}

/// Submits pilot jobs and turns backend job states into pilot states.
pub(crate) fn spawn_launcher(shared: Arc<Shared>, q: Queue<LaunchMsg>) -> Result<Worker, ClientError> {
    let mut tracked: BTreeMap<String, Tracked> = BTreeMap::new();
    spawn_loop("client.launcher".into(), q, move |batch| {
        let mut out = Vec::new();
        for m in batch {
            match m {
                LaunchMsg::Launch { pilot, config } => {
                    let mut config = *config;
                    if let Some(l) = shared.options.agent_launch {
                        config.agent_launch = l;
                    }
                    let b = match backend(&shared, &config) {
                        Ok(b) => b,
                        Err(e) => {
                            out.push(pilot_update(&pilot.id, PilotState::Failed, None, Some(e)));
                            continue;
                        }
                    };
                    let o = &shared.options;
                    let agent = AgentConfig {
                        session_dir: shared.store.dir().to_path_buf(),
                        pilot_id: pilot.id.clone(),
                        cores: pilot.description.cores,
                        gpus: pilot.description.gpus,
                        runtime_secs: pilot.description.runtime as f64 * 60.0,
                        resource: config.clone(),
                        executors: o.agent_executors.unwrap_or_else(default_executors),
                        stagers: o.agent_stagers,
                        poll_ms: o.agent_poll_ms,
                        output_root: o.data_root.clone(),
                    };
                    match b.submit_pilot_job(&pilot.description, &config, JobPayload::Agent(Box::new(agent))) {
                        Ok(handle) => {
                            out.push(pilot_update(&pilot.id, PilotState::Queued, Some(handle.clone()), None));
                            tracked.insert(
                                pilot.id,
                                Tracked {
                                    handle,
                                    backend: b,
                                    reported: PilotState::Queued,
                                },
                            );
                        }
                        Err(e) => out.push(pilot_update(&pilot.id, PilotState::Failed, None, Some(e.to_string()))),
                    }
                }
                LaunchMsg::Track {
                    pilot,
                    resource,
                    handle,
                    state,
                } => {
                    let b = shared
                        .backends
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .get(&resource)
                        .cloned();
                    match b {
                        Some(backend) => {
                            tracked.insert(
                                pilot,
                                Tracked {
                                    handle,
                                    backend,
                                    reported: state,
                                },
                            );
                        }
                        None => out.push(pilot_update(
                            &pilot,
                            PilotState::Failed,
                            None,
                            Some(format!("no backend for {resource}")),
                        )),
                    }
                }
                LaunchMsg::Cancel { pilot } => match tracked.get(&pilot) {
                    Some(t) => {
                        if let Err(e) = t.backend.cancel_job(&t.handle) {
                            log::warn!("cancel {pilot}: {e}");
                        }
                    }
                    None => out.push(pilot_update(&pilot, PilotState::Canceled, None, None)),
                },
            }
        }
        let mut finished = Vec::new();
        for (id, t) in tracked.iter_mut() {
            let state = match t.backend.job_state(&t.handle) {
                Ok(s) => s,
                Err(e) => {
                    out.push(pilot_update(id, PilotState::Failed, None, Some(e.to_string())));
                    finished.push(id.clone());
                    continue;
                }
            };
            let reached_active = matches!(state, JobState::Running | JobState::Done);
            if reached_active && t.reported == PilotState::Queued {
                out.push(pilot_update(id, PilotState::Active, None, None));
                t.reported = PilotState::Active;
            }
            let terminal = match state {
                JobState::Done => Some(PilotState::Done),
                JobState::Failed => Some(PilotState::Failed),
                JobState::Canceled => Some(PilotState::Canceled),
                _ => None,
            };
            if let Some(s) = terminal {
                let reason = (s == PilotState::Failed).then(|| "pilot job failed".to_string());
                out.push(pilot_update(id, s, None, reason));
                finished.push(id.clone());
            }
        }
        for id in finished {
            tracked.remove(&id);
        }
        report(&shared, out);
    })
}

/// Binds units to active pilots with a [`UnitPlacer`]; units that cannot be
/// bound yet wait for the next pilot state change.
pub(crate) fn spawn_scheduler(
    shared: Arc<Shared>,
    q: Queue<SchedMsg>,
    umgr: String,
    policy: SchedulingPolicy,
) -> Result<Worker, ClientError> {
    let mut placer = UnitPlacer::new(policy);
    let mut waiting: VecDeque<PendingUnit> = VecDeque::new();
    let decide =
        |placer: &mut UnitPlacer, u: PendingUnit, waiting: &mut VecDeque<PendingUnit>, out: &mut Vec<CoordMsg>| {
            // With nothing attached yet there is nothing to judge the unit against.
            if placer.attached() == 0 {
                waiting.push_back(u);
                return;
            }
            match placer.decide(u.cores, u.gpus) {
                Decision::Assign(pilot) => out.push(CoordMsg::Assign { unit: u.unit, pilot }),
                Decision::Wait => waiting.push_back(u),
                Decision::Unschedulable => out.push(CoordMsg::Unschedulable {
                    reason: format!(
                        "UnschedulableUnit: {} cores/{} gpus exceed every live attached pilot",
                        u.cores, u.gpus
                    ),
                    unit: u.unit,
                }),
            }
        };
    let mut w = spawn_loop(format!("{umgr}.scheduler"), q, move |batch| {
        let mut out = Vec::new();
        let mut retry = false;
        for m in batch {
            match m {
                SchedMsg::Attach {
                    pilot,
                    cores,
                    gpus,
                    state,
                } => {
                    let _ = placer.attach(&pilot, cores, gpus, state);
                    retry = true;
                }
                SchedMsg::PilotState { pilot, state } => {
                    placer.set_state(&pilot, state);
                    retry = true;
                }
                SchedMsg::Schedule(units) => {
                    for u in units {
                        decide(&mut placer, u, &mut waiting, &mut out);
                    }
                }
                SchedMsg::Claim { pilot, cores } => placer.claim(&pilot, cores),
                SchedMsg::Release { pilot, cores } => placer.release(&pilot, cores),
            }
        }
        if retry {
            for u in std::mem::take(&mut waiting) {
                decide(&mut placer, u, &mut waiting, &mut out);
            }
        }
        report(&shared, out);
    })?;
    w.policy = Some(policy);
    Ok(w)
}

fn path_hash(p: &Path) -> u64 {
    let mut h = DefaultHasher::new();
    p.hash(&mut h);
    h.finish()
}

fn copy_atomic(src: &Path, dest: &Path, tag: &str) -> std::io::Result<()> {
    let tmp = dest.with_extension(format!("tmp.{tag}"));
    fs::copy(src, &tmp)?;
    fs::rename(&tmp, dest)
}

/// Moves each input source into the session: LINK sources once per pilot into
/// its shared area, COPY and MOVE sources into the unit's sandbox. Returns the
/// directives rewritten to point at the staged files.
fn stage(shared: &Shared, unit: &Unit, pilot: &str) -> Result<(Vec<StagingDirective>, PathBuf), String> {
    let session = shared.store.dir();
    let sandbox = unit_sandbox(session, pilot, &unit.id);
    let mut out = Vec::with_capacity(unit.description.input_staging.len());
    let io = |p: &Path, e: std::io::Error| format!("{}: {e}", p.display());
    for d in &unit.description.input_staging {
        let src = Path::new(&d.source);
        let src = if src.is_absolute() {
            src.to_path_buf()
        } else {
            shared.options.data_root.join(src)
        };
        if !src.exists() {
            return Err(format!("MissingSource: {}", src.display()));
        }
        let target = match d.mode {
            StagingMode::Link => {
                let dir = shared_dir(session, pilot);
                fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
                let name = format!("{:016x}-{}", path_hash(&src), basename(&d.source));
                let target = dir.join(name);
                if !target.exists() {
                    copy_atomic(&src, &target, &unit.id).map_err(|e| io(&target, e))?;
                }
                target
            }
            StagingMode::Copy | StagingMode::Move => {
                let target = sandbox.join(STAGED_DIR).join(&d.destination);
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
                }
                if d.mode == StagingMode::Move && fs::rename(&src, &target).is_ok() {
                    target
                } else {
                    fs::copy(&src, &target).map_err(|e| io(&target, e))?;
                    if d.mode == StagingMode::Move {
                        fs::remove_file(&src).map_err(|e| io(&src, e))?;
                    }
                    target
                }
            }
        };
        out.push(StagingDirective::new(
            target.to_string_lossy(),
            d.destination.clone(),
            d.mode,
        ));
    }
    Ok((out, sandbox))
}

pub(crate) fn spawn_stager(shared: Arc<Shared>, q: Queue<StageMsg>, index: usize) -> Result<Worker, ClientError> {
    spawn_loop(format!("client.stager_input.{index}"), q, move |batch| {
        let out = batch
            .into_iter()
            .map(|StageMsg { unit, pilot }| match stage(&shared, &unit, &pilot) {
                Ok((input_staging, sandbox)) => CoordMsg::Staged {
                    unit: unit.id,
                    pilot,
                    input_staging,
                    sandbox: sandbox.to_string_lossy().into_owned(),
                },
                Err(reason) => CoordMsg::StageFailed { unit: unit.id, reason },
            })
            .collect();
        report(&shared, out);
    })
}
