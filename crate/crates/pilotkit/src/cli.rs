//! The `pilotkit` command line: `run`, `status` and `profile`.
//!
//! Exit codes: 0 success, 1 some unit, task or pipeline did not finish
//! cleanly, 2 bad input or missing session, 3 resource or configuration
//! failure.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::Registry;
use crate::client::{ClientError, Session, SessionOptions};
use crate::clock;
use crate::ensemble::{AppManager, EnsembleError, EnsembleOptions};
use crate::mesh::store::{self, StoreError};
use crate::profiling::{self, ProfilingError, DEFAULT_RESOLUTION};
use crate::report::{Report, RunInfo};
use crate::workload::{Work, Workload, WorkloadError};
use pilotkit_core::launch::AgentLaunch;
use pilotkit_core::placement::SchedulingPolicy;
use pilotkit_core::profile::{Profile, ProfileError};
use pilotkit_core::{validate_unit_description, EntityKind};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURES: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pilotkit", version, about = "Run task workloads on pilot jobs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a workload file to completion and write report.json.
    Run(RunArgs),
    /// Print entity counts per state for a session, live or finished.
    Status {
        #[arg(long)]
        session: PathBuf,
    },
    /// Analyze a session's event log.
    Profile(ProfileArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    RoundRobin,
    Backfill,
}

impl From<PolicyArg> for SchedulingPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::RoundRobin => SchedulingPolicy::RoundRobin,
            PolicyArg::Backfill => SchedulingPolicy::Backfill,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub workload: PathBuf,
    /// Resource name; overrides the one in the workload file.
    #[arg(long)]
    pub resource: Option<String>,
    /// Session directory to create. Defaults to ./pilotkit-sessions/session.<time>.<pid>.
    #[arg(long)]
    pub session: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Seed for simulated batch queue waits.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Executor workers per agent.
    #[arg(long)]
    pub executors: Option<usize>,
    /// Run agents as threads of this process instead of subprocesses.
    #[arg(long)]
    pub in_process: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// Write the result here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub analysis: Analysis,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// CSV time series of how many entities are in STATE.
    Concurrency {
        state: String,
        #[arg(long, default_value = "unit")]
        kind: String,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: f64,
        /// Sum unit cores instead of counting units.
        #[arg(long)]
        cores: bool,
        /// With --cores, only units on this pilot.
        #[arg(long)]
        pilot: Option<String>,
    },
    /// JSON time spent in each state by one entity.
    Durations { id: String },
    /// JSON core utilization of one pilot.
    Utilization { pilot: String },
    /// JSON overview of the whole session.
    Summary {
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: f64,
    },
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn client_code(e: &ClientError) -> u8 {
    match e {
        ClientError::Config(_) | ClientError::Backend(_) => EXIT_RESOURCE,
        ClientError::Validation(_) => EXIT_USAGE,
        ClientError::Store(StoreError::NoSuchSession(_)) => EXIT_USAGE,
        _ => EXIT_FAILURES,
    }
}

fn ensemble_code(e: &EnsembleError) -> u8 {
    match e {
        EnsembleError::Workflow(_) | EnsembleError::NoWorkflow => EXIT_USAGE,
        EnsembleError::NoResource | EnsembleError::ResourceAcquisitionFailed(_) => EXIT_RESOURCE,
        EnsembleError::Client(c) => client_code(c),
        _ => EXIT_FAILURES,
    }
}

fn profiling_failure(e: ProfilingError) -> Failure {
    let code = match &e {
        ProfilingError::Store(StoreError::NoSuchSession(_)) => EXIT_USAGE,
        ProfilingError::Profile(ProfileError::UnknownEntity(_) | ProfileError::BadResolution) => EXIT_USAGE,
        _ => EXIT_FAILURES,
    };
    fail(code, e)
}

/// Parses `std::env::args`, runs the command and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let mut out = io::stdout().lock();
    let mut err = io::stderr().lock();
    ExitCode::from(execute(cli, &mut out, &mut err))
}

pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let result = match cli.command {
        Command::Run(args) => run(&args, out, err),
        Command::Status { session } => status(&session, out),
        Command::Profile(args) => profile(&args, out, err),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn default_session_dir() -> PathBuf {
    let ms = (clock::wall_secs() * 1000.0) as u64;
    PathBuf::from("pilotkit-sessions").join(format!("session.{ms}.{}", std::process::id()))
}

fn registry(resource: &str, seed: Option<u64>) -> Result<Registry, Failure> {
    let mut reg = Registry::from_env().map_err(|e| fail(EXIT_RESOURCE, e))?;
    if resource.is_empty() {
        return Err(fail(
            EXIT_RESOURCE,
            "no resource named; set one in the workload or pass --resource",
        ));
    }
    let mut cfg = reg.get(resource).map_err(|e| fail(EXIT_RESOURCE, e))?.clone();
    if let (Some(seed), Some(batch)) = (seed, cfg.batch.as_mut()) {
        batch.queue_wait = batch.queue_wait.with_seed(seed);
        reg.insert(cfg).map_err(|e| fail(EXIT_RESOURCE, e))?;
    }
    Ok(reg)
}

pub fn run(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8, Failure> {
    let mut workload = Workload::load(&args.workload).map_err(|e| match e {
        WorkloadError::Io { .. } => fail(EXIT_USAGE, e),
        _ => fail(EXIT_USAGE, format!("{}: {e}", args.workload.display())),
    })?;
    if let Some(r) = &args.resource {
        workload.set_resource(r);
    }
    let opts = &workload.options;
    let registry = registry(workload.resource(), args.seed.or(opts.seed))?;
    let dir = args.session.clone().unwrap_or_else(default_session_dir);
    if store::is_session_dir(&dir) {
        return Err(fail(EXIT_USAGE, format!("{} already holds a session", dir.display())));
    }
    let data_root = args
        .workload
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let session_opts = SessionOptions {
        registry,
        data_root: std::path::absolute(&data_root).unwrap_or(data_root),
        agent_executors: args.executors.or(opts.executors),
        agent_launch: Some(if args.in_process {
            AgentLaunch::InProcess
        } else {
            AgentLaunch::Subprocess
        }),
        ..SessionOptions::default()
    };
    let policy = args
        .policy
        .map(SchedulingPolicy::from)
        .or(opts.policy)
        .unwrap_or_default();

    let started_at = clock::wall_secs();
    let t0 = Instant::now();
    let outcome = match workload.work.clone() {
        Work::Units { pilot, units } => {
            for (i, u) in units.iter().enumerate() {
                validate_unit_description(u.clone()).map_err(|e| fail(EXIT_USAGE, format!("unit entry {i}: {e}")))?;
            }
            run_units(&dir, session_opts, pilot, units, policy)
        }
        Work::Ensemble {
            resource_desc,
            pipelines,
        } => {
            let mut am = AppManager::new(EnsembleOptions {
                session: session_opts,
                session_root: dir.parent().map(Path::to_path_buf).unwrap_or_default(),
                failure_policy: opts.failure_policy.unwrap_or_default(),
                policy,
                ..EnsembleOptions::default()
            });
            am.set_workflow(pipelines).map_err(|e| fail(EXIT_USAGE, e))?;
            am.set_resource_desc(resource_desc);
            am.run_in(&dir).map(|_| ()).map_err(|e| fail(ensemble_code(&e), e))
        }
    };
    let wall_time_secs = t0.elapsed().as_secs_f64();
    if !store::is_session_dir(&dir) {
        return outcome.map(|_| EXIT_OK);
    }

    let loaded = profiling::load_session(&dir).map_err(|e| fail(EXIT_FAILURES, e))?;
    let info = RunInfo {
        mode: workload.mode(),
        session_id: store::session_id_of(&dir),
        session_dir: std::path::absolute(&dir).unwrap_or(dir.clone()),
        resource: workload.resource().to_string(),
        started_at,
        wall_time_secs,
    };
    let mut report = Report::from_profile(info, &loaded.profile);
    let code = match &outcome {
        Ok(()) if report.success => EXIT_OK,
        Ok(()) => EXIT_FAILURES,
        Err(f) => {
            report.success = false;
            report.error = Some(f.message.clone());
            f.code
        }
    };
    let path = report.write(&dir).map_err(|e| fail(EXIT_FAILURES, e))?;
    if let Err(f) = &outcome {
        let _ = writeln!(err, "error: {}", f.message);
    }
    let _ = writeln!(out, "session {} finished in {:.2}s", report.session_id, wall_time_secs);
    for (kind, counts) in &report.counts {
        let _ = writeln!(out, "{kind}: {}", render_counts(counts));
    }
    let _ = writeln!(out, "report: {}", path.display());
    Ok(code)
}

fn run_units(
    dir: &Path,
    opts: SessionOptions,
    pilot: pilotkit_core::PilotDescription,
    units: Vec<pilotkit_core::UnitDescription>,
    policy: SchedulingPolicy,
) -> Result<(), Failure> {
    let session = Session::create(dir, opts).map_err(|e| fail(client_code(&e), e))?;
    let result = (|| {
        if units.is_empty() {
            return Ok(());
        }
        let pilots = session.pilot_manager().submit_pilots(&[pilot])?;
        let umgr = session.unit_manager(policy)?;
        umgr.add_pilots(&pilots)?;
        umgr.submit_units(units)?;
        umgr.wait_units(None, None)?;
        Ok(())
    })()
    .map_err(|e: ClientError| fail(client_code(&e), e));
    let closed = session.close().map_err(|e| fail(client_code(&e), e));
    result?;
    closed?;
    // A pilot that never started means the resource was not acquired.
    let events = session.events().map_err(|e| fail(EXIT_FAILURES, e))?;
    let mut active = BTreeMap::new();
    for (_, e) in &events.records {
        if e.entity_kind == EntityKind::Pilot {
            *active.entry(e.entity_id.clone()).or_insert(false) |= e.event_name == "ACTIVE";
        }
    }
    if let Some((id, _)) = active.iter().find(|(_, a)| !**a) {
        return Err(fail(EXIT_RESOURCE, format!("pilot {id} never became active")));
    }
    Ok(())
}

fn render_counts(counts: &BTreeMap<String, usize>) -> String {
    counts
        .iter()
        .map(|(s, n)| format!("{s}={n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads the event log without taking any lock; a line being written at the
/// same moment shows up as a truncated tail and is ignored.
pub fn status(dir: &Path, out: &mut dyn Write) -> Result<u8, Failure> {
    let replay = store::replay_events(dir).map_err(|e| match e {
        StoreError::NoSuchSession(_) => fail(EXIT_USAGE, e),
        _ => fail(EXIT_FAILURES, e),
    })?;
    let mut events: Vec<_> = replay.records.into_iter().map(|(_, e)| e).collect();
    events.sort_by_key(|e| e.timestamp.mono_ns);
    let mut last: BTreeMap<(EntityKind, String), String> = BTreeMap::new();
    for e in events {
        if e.entity_kind != EntityKind::Component {
            last.insert((e.entity_kind, e.entity_id), e.event_name);
        }
    }
    let mut counts: BTreeMap<EntityKind, BTreeMap<String, usize>> = BTreeMap::new();
    for ((kind, _), state) in last {
        *counts.entry(kind).or_default().entry(state).or_default() += 1;
    }
    let _ = writeln!(out, "session {}", store::session_id_of(dir));
    for (kind, c) in &counts {
        let _ = writeln!(out, "{kind}: {}", render_counts(c));
    }
    if Report::path(dir).is_file() {
        let _ = writeln!(out, "finished");
    }
    Ok(EXIT_OK)
}

fn emit(args: &ProfileArgs, out: &mut dyn Write, body: &[u8]) -> Result<(), Failure> {
    match &args.output {
        Some(p) => std::fs::write(p, body).map_err(|e| fail(EXIT_FAILURES, format!("{}: {e}", p.display()))),
        None => out.write_all(body).map_err(|e| fail(EXIT_FAILURES, e)),
    }
}

fn json(v: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

pub fn profile(args: &ProfileArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8, Failure> {
    let loaded = profiling::load_session(&args.session).map_err(profiling_failure)?;
    for c in &loaded.corrupt {
        let _ = writeln!(err, "warning: skipped corrupt record at line {}: {}", c.line, c.reason);
    }
    let p: &Profile = &loaded.profile;
    let pe = |e: ProfileError| profiling_failure(e.into());
    let body = match &args.analysis {
        Analysis::Concurrency {
            state,
            kind,
            resolution,
            cores,
            pilot,
        } => {
            let kind =
                EntityKind::parse(kind).ok_or_else(|| fail(EXIT_USAGE, format!("unknown entity kind {kind}")))?;
            let bins = if *cores {
                p.core_concurrency(state, pilot.as_deref(), *resolution).map_err(pe)?
            } else {
                p.concurrency(kind, state, *resolution).map_err(pe)?
            };
            let mut buf = Vec::new();
            profiling::write_bins_csv(&mut buf, state, &bins).map_err(|e| fail(EXIT_FAILURES, e))?;
            buf
        }
        Analysis::Durations { id } => json(&profiling::durations_report(p, id).map_err(pe)?),
        Analysis::Utilization { pilot } => json(&p.utilization(pilot).map_err(pe)?),
        Analysis::Summary { resolution } => json(&profiling::summary(p, *resolution).map_err(pe)?),
    };
    emit(args, out, &body)?;
    Ok(EXIT_OK)
}
