//! Declarative workload files.
//!
//! A file runs either plain units on one pilot (`"mode": "UNITS"`) or an
//! ensemble workflow (`"mode": "ENSEMBLE"`):
//!
//! ```json
//! {
//!   "mode": "UNITS",
//!   "pilot": {"resource": "sim-3072", "cores": 3072, "runtime": 120},
//!   "units": [{"executable": "/bin/true", "cores": 24, "mpi": true, "count": 128}],
//!   "options": {"policy": "ROUND_ROBIN", "seed": 42}
//! }
//! ```
//!
//! ```json
//! {
//!   "mode": "ENSEMBLE",
//!   "resource_desc": {"resource": "local", "walltime": 10, "cpus": 4},
//!   "pipelines": [{"stages": [{"tasks": [{"executable": "/bin/true"}]}]}],
//!   "options": {"failure_policy": "fail_fast"}
//! }
//! ```
//!
//! Pipeline, stage and task uids may be omitted; they default to `p{i}`,
//! `p{i}.s{j}` and `p{i}.s{j}.task.{k:04}`. A unit entry's `count` repeats it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pilotkit_core::placement::SchedulingPolicy;
use pilotkit_core::workflow::{
    default_task_uid, validate_workflow, CpuReqs, FailurePolicy, GpuReqs, Pipeline, ResourceDesc, Stage, Task,
    WorkflowError,
};
use pilotkit_core::{PilotDescription, UnitDescription};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid workload: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid workload: {0}")]
    Shape(String),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Units,
    Ensemble,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadOptions {
    #[serde(default)]
    pub policy: Option<SchedulingPolicy>,
    #[serde(default)]
    pub failure_policy: Option<FailurePolicy>,
    /// Seed for simulated queue waits.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub executors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Work {
    Units {
        pilot: PilotDescription,
        units: Vec<UnitDescription>,
    },
    Ensemble {
        resource_desc: ResourceDesc,
        pipelines: Vec<Pipeline>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub work: Work,
    pub options: WorkloadOptions,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
struct UnitEntry {
    #[serde(flatten)]
    description: UnitDescription,
    #[serde(default = "one")]
    count: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResourceDesc {
    #[serde(default)]
    resource: String,
    walltime: u32,
    cpus: u32,
    #[serde(default)]
    gpus: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    #[serde(default)]
    uid: Option<String>,
    executable: String,
    #[serde(default)]
    arguments: Vec<String>,
    #[serde(default)]
    pre_exec: Vec<String>,
    #[serde(default)]
    copy_input_data: Vec<String>,
    #[serde(default)]
    cpu_reqs: CpuReqs,
    #[serde(default)]
    gpu_reqs: GpuReqs,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    #[serde(default)]
    uid: Option<String>,
    tasks: Vec<RawTask>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    #[serde(default)]
    uid: Option<String>,
    stages: Vec<RawStage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    mode: Mode,
    #[serde(default)]
    pilot: Option<PilotDescription>,
    #[serde(default)]
    resource_desc: Option<RawResourceDesc>,
    #[serde(default)]
    units: Option<Vec<UnitEntry>>,
    #[serde(default)]
    pipelines: Option<Vec<RawPipeline>>,
    #[serde(default)]
    options: WorkloadOptions,
}

fn build_pipelines(raw: Vec<RawPipeline>) -> Vec<Pipeline> {
    raw.into_iter()
        .enumerate()
        .map(|(i, p)| {
            let puid = p.uid.unwrap_or_else(|| format!("p{i}"));
            let stages = p
                .stages
                .into_iter()
                .enumerate()
                .map(|(j, s)| {
                    let suid = s.uid.unwrap_or_else(|| format!("{puid}.s{j}"));
                    let tasks = s
                        .tasks
                        .into_iter()
                        .enumerate()
                        .map(|(k, t)| {
                            let mut task = Task::new(t.uid.unwrap_or_else(|| default_task_uid(&suid, k)), t.executable);
                            task.arguments = t.arguments;
                            task.pre_exec = t.pre_exec;
                            task.copy_input_data = t.copy_input_data;
                            task.cpu_reqs = t.cpu_reqs;
                            task.gpu_reqs = t.gpu_reqs;
                            task
                        })
                        .collect();
                    Stage::new(suid, tasks)
                })
                .collect();
            Pipeline::new(puid, stages)
        })
        .collect()
}

impl Workload {
    pub fn parse(text: &str) -> Result<Workload, WorkloadError> {
        let raw: RawWorkload = serde_json::from_str(text)?;
        let shape = |m: &str| Err(WorkloadError::Shape(m.into()));
        let work = match raw.mode {
            Mode::Units => {
                if raw.pipelines.is_some() || raw.resource_desc.is_some() {
                    return shape("UNITS mode takes pilot and units only");
                }
                let (Some(pilot), Some(units)) = (raw.pilot, raw.units) else {
                    return shape("UNITS mode needs pilot and units");
                };
                let units = units
                    .into_iter()
                    .flat_map(|e| std::iter::repeat_n(e.description, e.count as usize))
                    .collect();
                Work::Units { pilot, units }
            }
            Mode::Ensemble => {
                if raw.units.is_some() || raw.pilot.is_some() {
                    return shape("ENSEMBLE mode takes resource_desc and pipelines only");
                }
                let (Some(rd), Some(pipelines)) = (raw.resource_desc, raw.pipelines) else {
                    return shape("ENSEMBLE mode needs resource_desc and pipelines");
                };
                let pipelines = build_pipelines(pipelines);
                validate_workflow(&pipelines)?;
                Work::Ensemble {
                    resource_desc: ResourceDesc {
                        resource: rd.resource,
                        walltime: rd.walltime,
                        cpus: rd.cpus,
                        gpus: rd.gpus,
                    },
                    pipelines,
                }
            }
        };
        Ok(Workload {
            work,
            options: raw.options,
        })
    }

    pub fn load(path: &Path) -> Result<Workload, WorkloadError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn mode(&self) -> Mode {
        match self.work {
            Work::Units { .. } => Mode::Units,
            Work::Ensemble { .. } => Mode::Ensemble,
        }
    }

    pub fn resource(&self) -> &str {
        match &self.work {
            Work::Units { pilot, .. } => &pilot.resource,
            Work::Ensemble { resource_desc, .. } => &resource_desc.resource,
        }
    }

    pub fn set_resource(&mut self, name: &str) {
        match &mut self.work {
            Work::Units { pilot, .. } => pilot.resource = name.into(),
            Work::Ensemble { resource_desc, .. } => resource_desc.resource = name.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units_with_count() {
        let w = Workload::parse(
            r#"{"mode":"UNITS","pilot":{"resource":"sim-3072","cores":3072,"runtime":120},
                "units":[{"executable":"/bin/true","cores":24,"mpi":true,"count":128},{"executable":"/bin/false"}]}"#,
        )
        .unwrap();
        let Work::Units { pilot, units } = w.work else { panic!() };
        assert_eq!(pilot.cores, 3072);
        assert_eq!(units.len(), 129);
        assert_eq!(units[0].cores, 24);
        assert_eq!(units[128].executable, "/bin/false");
    }

    #[test]
    fn ensemble_default_uids() {
        let w = Workload::parse(
            r#"{"mode":"ENSEMBLE","resource_desc":{"walltime":10,"cpus":4},
                "pipelines":[{"stages":[{"tasks":[{"executable":"a"},{"executable":"b","uid":"named"}]}]}]}"#,
        )
        .unwrap();
        assert_eq!(w.resource(), "");
        let Work::Ensemble { pipelines, .. } = w.work else {
            panic!()
        };
        assert_eq!(pipelines[0].uid, "p0");
        assert_eq!(pipelines[0].stages[0].uid, "p0.s0");
        assert_eq!(pipelines[0].stages[0].tasks[0].uid, "p0.s0.task.0000");
        assert_eq!(pipelines[0].stages[0].tasks[1].uid, "named");
    }

    #[test]
    fn mode_must_match_sections() {
        for bad in [
            r#"{"mode":"UNITS","pilot":{"cores":1,"runtime":1}}"#,
            r#"{"mode":"UNITS","pilot":{"cores":1,"runtime":1},"units":[],"pipelines":[]}"#,
            r#"{"mode":"ENSEMBLE","resource_desc":{"walltime":1,"cpus":1},"units":[]}"#,
            r#"{"mode":"ENSEMBLE","resource_desc":{"walltime":1,"cpus":1},"pipelines":[{"stages":[]}]}"#,
            r#"{"mode":"OTHER"}"#,
            r#"{"mode":"UNITS","pilot":{"cores":1,"runtime":1},"units":[],"extra":1}"#,
        ] {
            assert!(Workload::parse(bad).is_err(), "{bad}");
        }
    }
}
