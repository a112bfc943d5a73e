//! Pilot and unit descriptions, their live handles, and description validation.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::ops::Deref;

use serde::{Deserialize, Deserializer, Serialize};

use crate::event::Timestamp;
use crate::slots::Placement;
use crate::state::{PilotState, UnitState};

pub fn pilot_id(n: u32) -> String {
    format!("pilot.{n:04}")
}

pub fn unit_id(n: u64) -> String {
    format!("unit.{n:06}")
}

/// Request for a resource placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotDescription {
    #[serde(default)]
    pub resource: String,
    pub cores: u32,
    #[serde(default)]
    pub gpus: u32,
    /// Walltime in minutes.
    pub runtime: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_schema: Option<String>,
}

impl PilotDescription {
    pub fn new(resource: impl Into<String>, cores: u32, runtime: u32) -> Self {
        PilotDescription {
            resource: resource.into(),
            cores,
            gpus: 0,
            runtime,
            project: None,
            queue: None,
            access_schema: None,
        }
    }

    /// Checks the numeric invariants. Whether `resource` names a known
    /// configuration is up to the resource registry.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.resource.trim().is_empty() {
            return Err(ValidationError::new("resource", "must name a resource configuration"));
        }
        if self.cores < 1 {
            return Err(ValidationError::new("cores", "must be at least 1"));
        }
        if self.runtime < 1 {
            return Err(ValidationError::new("runtime", "must be at least 1 minute"));
        }
        Ok(())
    }
}

/// Reference to a job held by a resource backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub backend: String,
    pub job_id: String,
    pub submitted_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub nodes: u32,
    pub cores: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pilot {
    pub id: String,
    pub description: PilotDescription,
    pub state: PilotState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_handle: Option<JobHandle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_table_snapshot: Option<SlotSummary>,
}

impl Pilot {
    pub fn new(id: impl Into<String>, description: PilotDescription) -> Self {
        Pilot {
            id: id.into(),
            description,
            state: PilotState::New,
            job_handle: None,
            slot_table_snapshot: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StagingMode {
    #[default]
    Copy,
    Link,
    Move,
}

/// Moves, copies or links one file between a source and a unit sandbox.
///
/// Deserializes from either an object or a bare file name, which stands for
/// `{source: name, destination: basename(name), mode: COPY}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StagingDirective {
    pub source: String,
    pub destination: String,
    #[serde(default)]
    pub mode: StagingMode,
}

impl StagingDirective {
    pub fn new(source: impl Into<String>, destination: impl Into<String>, mode: StagingMode) -> Self {
        StagingDirective {
            source: source.into(),
            destination: destination.into(),
            mode,
        }
    }

    /// Shorthand used by plain file-name lists.
    pub fn from_name(name: &str) -> Self {
        StagingDirective::new(name, basename(name), StagingMode::Copy)
    }
}

impl<'de> Deserialize<'de> for StagingDirective {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Full {
            source: String,
            #[serde(default)]
            destination: Option<String>,
            #[serde(default)]
            mode: StagingMode,
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Full(Full),
        }
        Ok(match Repr::deserialize(de)? {
            Repr::Name(n) => StagingDirective::from_name(&n),
            Repr::Full(f) => {
                let destination = f.destination.unwrap_or_else(|| basename(&f.source).to_owned());
                StagingDirective::new(f.source, destination, f.mode)
            }
        })
    }
}

pub fn basename(path: &str) -> &str {
    let trimmed = path.trim_end_matches('/');
    trimmed.rsplit('/').next().unwrap_or(trimmed)
}

/// Normalizes a relative path that must stay inside its root.
///
/// Returns `None` for absolute paths, empty paths and any `..` component.
pub fn contained_relative(path: &str) -> Option<String> {
    if path.starts_with('/') || path.contains('\\') {
        return None;
    }
    let mut parts = Vec::new();
    for part in path.split('/') {
        match part {
            "" | "." => {}
            ".." => return None,
            p => parts.push(p),
        }
    }
    if parts.is_empty() {
        None
    } else {
        Some(parts.join("/"))
    }
}

fn default_cores() -> u32 {
    1
}

/// A self-contained program with its resource and staging requirements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitDescription {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    #[serde(default)]
    pub pre_exec: Vec<String>,
    #[serde(default)]
    pub input_staging: Vec<StagingDirective>,
    #[serde(default)]
    pub output_staging: Vec<StagingDirective>,
    #[serde(default = "default_cores")]
    pub cores: u32,
    #[serde(default)]
    pub gpus: u32,
    #[serde(default)]
    pub mpi: bool,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
}

impl UnitDescription {
    pub fn new(executable: impl Into<String>) -> Self {
        UnitDescription {
            name: None,
            executable: executable.into(),
            arguments: Vec::new(),
            pre_exec: Vec::new(),
            input_staging: Vec::new(),
            output_staging: Vec::new(),
            cores: 1,
            gpus: 0,
            mpi: false,
            environment: BTreeMap::new(),
        }
    }

    pub fn args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.arguments = args.into_iter().map(Into::into).collect();
        self
    }

    pub fn cores(mut self, cores: u32) -> Self {
        self.cores = cores;
        self
    }

    pub fn mpi(mut self, mpi: bool) -> Self {
        self.mpi = mpi;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: &str, reason: impl fmt::Display) -> Self {
        ValidationError {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }
}

/// A unit description that passed [`validate_unit_description`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ValidUnitDescription(UnitDescription);

impl ValidUnitDescription {
    pub fn into_inner(self) -> UnitDescription {
        self.0
    }
}

impl Deref for ValidUnitDescription {
    type Target = UnitDescription;

    fn deref(&self) -> &UnitDescription {
        &self.0
    }
}

fn check_directives(field: &str, list: &mut [StagingDirective], check_source: bool) -> Result<(), ValidationError> {
    let mut seen = BTreeSet::new();
    for d in list.iter_mut() {
        if d.source.trim().is_empty() {
            return Err(ValidationError::new(field, "empty source"));
        }
        let dest = contained_relative(&d.destination).ok_or_else(|| {
            ValidationError::new(field, format!("destination {:?} escapes the sandbox", d.destination))
        })?;
        if check_source {
            d.source = contained_relative(&d.source)
                .ok_or_else(|| ValidationError::new(field, format!("source {:?} escapes the sandbox", d.source)))?;
        }
        if !seen.insert(dest.clone()) {
            return Err(ValidationError::new(field, format!("duplicate destination {dest:?}")));
        }
        d.destination = dest;
    }
    Ok(())
}

/// Checks required fields and normalizes staging destinations.
///
/// Output directives name a sandbox-relative source, so their sources get the
/// same containment check as destinations.
pub fn validate_unit_description(cud: UnitDescription) -> Result<ValidUnitDescription, ValidationError> {
    let mut cud = cud;
    if cud.executable.trim().is_empty() {
        return Err(ValidationError::new("executable", "must not be empty"));
    }
    if cud.cores < 1 {
        return Err(ValidationError::new("cores", "must be at least 1"));
    }
    check_directives("input_staging", &mut cud.input_staging, false)?;
    check_directives("output_staging", &mut cud.output_staging, true)?;
    Ok(ValidUnitDescription(cud))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub description: UnitDescription,
    pub state: UnitState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pilot_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox: Option<String>,
}

impl Unit {
    pub fn new(id: impl Into<String>, description: ValidUnitDescription) -> Self {
        Unit {
            id: id.into(),
            description: description.into_inner(),
            state: UnitState::New,
            pilot_id: None,
            placement: None,
            exit_code: None,
            sandbox: None,
        }
    }
}
