//! Job submission backends. Both backends share one job table; they differ
//! only in when a submitted job starts.
//!
//! - [`LocalBackend`] starts the job at submission.
//! - [`SimBatchBackend`] holds jobs in a simulated batch queue and starts them
//!   on the first poll after their sampled wait has elapsed.

pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use pilotkit_core::batch::{BatchQueue, JobState};
use pilotkit_core::launch::{AgentLaunch, ResourceConfig};
use pilotkit_core::model::JobHandle;
use pilotkit_core::PilotDescription;

use crate::bridge::AgentConfig;
use crate::clock::{self, Clock, SystemClock};

pub use config::{ConfigLoadError, Registry};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("request for {requested} cores/{requested_gpus} gpus exceeds {available} cores/{available_gpus} gpus of {resource}")]
    OversubscribedRequest {
        resource: String,
        requested: u32,
        requested_gpus: u32,
        available: u64,
        available_gpus: u64,
    },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
}

/// What a job runs once it starts.
#[derive(Debug, Clone)]
pub enum JobPayload {
    /// A pilot agent, launched according to the resource's `agent_launch`.
    Agent(Box<AgentConfig>),
    /// Occupies the job for a fixed time; used to exercise backends alone.
    Sleep(Duration),
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn submit_pilot_job(
        &self,
        pdesc: &PilotDescription,
        config: &ResourceConfig,
        payload: JobPayload,
    ) -> Result<JobHandle, BackendError>;

    /// Once RUNNING is observed PENDING never is again; terminal states stick.
    fn job_state(&self, handle: &JobHandle) -> Result<JobState, BackendError>;

    /// Cancels a non-terminal job. Idempotent.
    fn cancel_job(&self, handle: &JobHandle) -> Result<(), BackendError>;
}

enum Running {
    Thread {
        handle: Option<JoinHandle<bool>>,
        cancel: Arc<AtomicBool>,
    },
    Child(Child),
}

impl Running {
    /// `Some(success)` once the payload has finished.
    fn poll(&mut self) -> Option<bool> {
        match self {
            Running::Thread { handle, .. } => {
                if handle.as_ref().is_some_and(|h| h.is_finished()) {
                    Some(handle.take().unwrap().join().unwrap_or(false))
                } else if handle.is_none() {
                    Some(false)
                } else {
                    None
                }
            }
            Running::Child(child) => match child.try_wait() {
                Ok(Some(status)) => Some(status.success()),
                Ok(None) => None,
                Err(_) => Some(false),
            },
        }
    }

    fn cancel(&mut self) {
        match self {
            Running::Thread { cancel, .. } => cancel.store(true, Ordering::SeqCst),
            Running::Child(child) => {
                // SIGTERM lets the agent cancel its units before exiting.
                // SAFETY: plain kill(2) on a child we have not reaped yet.
                unsafe {
                    libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
                }
            }
        }
    }
}

struct Job {
    sim_index: Option<usize>,
    launch: AgentLaunch,
    payload: Option<JobPayload>,
    running: Option<Running>,
    state: JobState,
}

struct Table {
    jobs: BTreeMap<String, Job>,
    queue: Option<BatchQueue>,
    next: u64,
}

static INSTANCE: AtomicU64 = AtomicU64::new(1);

/// The job table shared by both backends. Every operation holds the table
/// lock, so operations on one backend instance are serialized.
struct JobTable {
    name: String,
    clock: Arc<dyn Clock>,
    table: Mutex<Table>,
}

/// Path of the `pilotkit-agent` executable: `PILOTKIT_AGENT_BIN`, else next to
/// the current executable (or its parent, for test binaries in `deps/`).
pub fn agent_binary() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("PILOTKIT_AGENT_BIN") {
        return Some(PathBuf::from(p));
    }
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?;
    [dir.join("pilotkit-agent"), dir.parent()?.join("pilotkit-agent")]
        .into_iter()
        .find(|p| p.is_file())
}

fn start_payload(payload: JobPayload, launch: AgentLaunch) -> Result<Running, String> {
    match payload {
        JobPayload::Sleep(d) => {
            let cancel = Arc::new(AtomicBool::new(false));
            let flag = Arc::clone(&cancel);
            let handle = std::thread::spawn(move || {
                let end = Instant::now() + d;
                while Instant::now() < end {
                    if flag.load(Ordering::SeqCst) {
                        return false;
                    }
                    std::thread::sleep((end - Instant::now()).min(Duration::from_millis(5)));
                }
                true
            });
            Ok(Running::Thread {
                handle: Some(handle),
                cancel,
            })
        }
        JobPayload::Agent(cfg) => match launch {
            AgentLaunch::InProcess => {
                let cancel = Arc::new(AtomicBool::new(false));
                let flag = Arc::clone(&cancel);
                let handle = std::thread::Builder::new()
                    .name(format!("agent.{}", cfg.pilot_id))
                    .spawn(move || match crate::agent::run_agent(&cfg, flag) {
                        Ok(_) => true,
                        Err(e) => {
                            log::error!("agent {} failed: {e}", cfg.pilot_id);
                            false
                        }
                    })
                    .map_err(|e| e.to_string())?;
                Ok(Running::Thread {
                    handle: Some(handle),
                    cancel,
                })
            }
            AgentLaunch::Subprocess => {
                let bin = agent_binary().ok_or("pilotkit-agent executable not found")?;
                let dir = cfg.pilot_dir();
                fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                let path = dir.join("agent.json");
                let text = serde_json::to_vec_pretty(&*cfg).map_err(|e| e.to_string())?;
                fs::write(&path, text).map_err(|e| e.to_string())?;
                let out = File::create(dir.join("agent.out")).map_err(|e| e.to_string())?;
                let err = File::create(dir.join("agent.err")).map_err(|e| e.to_string())?;
                let child = Command::new(&bin)
                    .arg(&path)
                    .stdin(Stdio::null())
                    .stdout(out)
                    .stderr(err)
                    .spawn()
                    .map_err(|e| format!("{}: {e}", bin.display()))?;
                Ok(Running::Child(child))
            }
        },
    }
}

impl JobTable {
    fn new(kind: &str, queue: Option<BatchQueue>, clock: Arc<dyn Clock>) -> Self {
        JobTable {
            name: format!("{kind}.{}", INSTANCE.fetch_add(1, Ordering::Relaxed)),
            clock,
            table: Mutex::new(Table {
                jobs: BTreeMap::new(),
                queue,
                next: 1,
            }),
        }
    }

    fn submit(
        &self,
        pdesc: &PilotDescription,
        config: &ResourceConfig,
        payload: JobPayload,
    ) -> Result<JobHandle, BackendError> {
        if pdesc.cores as u64 > config.total_cores() || pdesc.gpus as u64 > config.total_gpus() {
            return Err(BackendError::OversubscribedRequest {
                resource: config.name.clone(),
                requested: pdesc.cores,
                requested_gpus: pdesc.gpus,
                available: config.total_cores(),
                available_gpus: config.total_gpus(),
            });
        }
        let mut t = self.table.lock().unwrap_or_else(|e| e.into_inner());
        let job_id = format!("job.{:06}", t.next);
        t.next += 1;
        let now = self.clock.now_ns();
        let sim_index = t.queue.as_mut().map(|q| q.submit(now));
        let mut job = Job {
            sim_index,
            launch: config.agent_launch,
            payload: Some(payload),
            running: None,
            state: JobState::Pending,
        };
        if sim_index.is_none() {
            let running = start_payload(job.payload.take().unwrap(), config.agent_launch)
                .map_err(BackendError::BackendUnavailable)?;
            job.running = Some(running);
            job.state = JobState::Running;
        }
        t.jobs.insert(job_id.clone(), job);
        drop(t);
        Ok(JobHandle {
            backend: self.name.clone(),
            job_id,
            submitted_at: clock::now(),
        })
    }

    fn check(&self, handle: &JobHandle) -> Result<(), BackendError> {
        if handle.backend != self.name {
            return Err(BackendError::UnknownJob(format!(
                "{}/{}",
                handle.backend, handle.job_id
            )));
        }
        Ok(())
    }

    fn state(&self, handle: &JobHandle) -> Result<JobState, BackendError> {
        self.check(handle)?;
        let mut t = self.table.lock().unwrap_or_else(|e| e.into_inner());
        if !t.jobs.contains_key(&handle.job_id) {
            return Err(BackendError::UnknownJob(handle.job_id.clone()));
        }
        let now = self.clock.now_ns();
        let started: Vec<usize> = t.queue.as_mut().map(|q| q.advance(now)).unwrap_or_default();
        if !started.is_empty() {
            let Table { jobs, queue, .. } = &mut *t;
            for (id, job) in jobs.iter_mut() {
                let Some(idx) = job.sim_index else { continue };
                if !started.contains(&idx) {
                    continue;
                }
                match start_payload(job.payload.take().expect("pending job keeps its payload"), job.launch) {
                    Ok(r) => {
                        job.running = Some(r);
                        job.state = JobState::Running;
                    }
                    Err(e) => {
                        log::error!("job {id} failed to start: {e}");
                        job.state = JobState::Failed;
                        if let Some(q) = queue.as_mut() {
                            q.finish(idx, false);
                        }
                    }
                }
            }
        }
        let Table { jobs, queue, .. } = &mut *t;
        let job = jobs.get_mut(&handle.job_id).unwrap();
        if job.state == JobState::Running {
            if let Some(success) = job.running.as_mut().and_then(Running::poll) {
                job.state = if success { JobState::Done } else { JobState::Failed };
                if let (Some(q), Some(idx)) = (queue.as_mut(), job.sim_index) {
                    q.finish(idx, success);
                }
            }
        } else if job.state == JobState::Canceled {
            // Reap a canceled child so it does not linger as a zombie.
            if let Some(r) = job.running.as_mut() {
                r.poll();
            }
        }
        Ok(job.state)
    }

    fn cancel(&self, handle: &JobHandle) -> Result<(), BackendError> {
        self.check(handle)?;
        let mut t = self.table.lock().unwrap_or_else(|e| e.into_inner());
        let Table { jobs, queue, .. } = &mut *t;
        let job = jobs
            .get_mut(&handle.job_id)
            .ok_or_else(|| BackendError::UnknownJob(handle.job_id.clone()))?;
        if job.state.is_terminal() {
            return Ok(());
        }
        if let Some(r) = job.running.as_mut() {
            r.cancel();
        }
        if let (Some(q), Some(idx)) = (queue.as_mut(), job.sim_index) {
            q.cancel(idx);
        }
        job.payload = None;
        job.state = JobState::Canceled;
        Ok(())
    }
}

/// Starts jobs immediately on the local host.
pub struct LocalBackend {
    jobs: JobTable,
}

impl LocalBackend {
    pub fn new() -> Self {
        LocalBackend {
            jobs: JobTable::new("local", None, Arc::new(SystemClock)),
        }
    }
}

impl Default for LocalBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for LocalBackend {
    fn name(&self) -> &str {
        &self.jobs.name
    }

    fn submit_pilot_job(
        &self,
        pdesc: &PilotDescription,
        config: &ResourceConfig,
        payload: JobPayload,
    ) -> Result<JobHandle, BackendError> {
        self.jobs.submit(pdesc, config, payload)
    }

    fn job_state(&self, handle: &JobHandle) -> Result<JobState, BackendError> {
        self.jobs.state(handle)
    }

    fn cancel_job(&self, handle: &JobHandle) -> Result<(), BackendError> {
        self.jobs.cancel(handle)
    }
}

/// A batch system with seeded queue waits and a cap on running jobs.
pub struct SimBatchBackend {
    jobs: JobTable,
}

impl SimBatchBackend {
    pub fn new(config: &ResourceConfig, clock: Arc<dyn Clock>) -> Result<Self, BackendError> {
        let batch = config.batch.as_ref().ok_or_else(|| {
            BackendError::BackendUnavailable(format!("resource {} has no batch section", config.name))
        })?;
        Ok(SimBatchBackend {
            jobs: JobTable::new("sim", Some(BatchQueue::new(batch)), clock),
        })
    }
}

impl Backend for SimBatchBackend {
    fn name(&self) -> &str {
        &self.jobs.name
    }

    fn submit_pilot_job(
        &self,
        pdesc: &PilotDescription,
        config: &ResourceConfig,
        payload: JobPayload,
    ) -> Result<JobHandle, BackendError> {
        self.jobs.submit(pdesc, config, payload)
    }

    fn job_state(&self, handle: &JobHandle) -> Result<JobState, BackendError> {
        self.jobs.state(handle)
    }

    fn cancel_job(&self, handle: &JobHandle) -> Result<(), BackendError> {
        self.jobs.cancel(handle)
    }
}

/// The backend a resource calls for: simulated batch if it has a batch
/// section, local otherwise.
pub fn backend_for(config: &ResourceConfig) -> Result<Arc<dyn Backend>, BackendError> {
    Ok(match config.batch {
        Some(_) => Arc::new(SimBatchBackend::new(config, Arc::new(SystemClock))?),
        None => Arc::new(LocalBackend::new()),
    })
}
