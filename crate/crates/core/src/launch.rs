//! Resource configurations and launch-command rendering.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::batch::BatchSimConfig;
use crate::model::Unit;
use crate::slots::Placement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LaunchMethod {
    Direct,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AgentLaunch {
    #[default]
    InProcess,
    Subprocess,
}

/// Per-machine configuration, one JSON file per resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceConfig {
    pub name: String,
    pub nodes: u32,
    pub cores_per_node: u32,
    #[serde(default)]
    pub gpus_per_node: u32,
    #[serde(default)]
    pub agent_launch: AgentLaunch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchSimConfig>,
    pub launch_templates: BTreeMap<LaunchMethod, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub environment: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("resource {0}: nodes and cores_per_node must be at least 1")]
    NoCores(String),
    #[error("resource {0}: launch_templates must contain DIRECT")]
    NoDirectTemplate(String),
    #[error("resource {0}: queue wait values must be non-negative")]
    NegativeWait(String),
    #[error("resource {0}: max_concurrent_jobs must be at least 1")]
    NoJobSlots(String),
}

impl ResourceConfig {
    pub fn total_cores(&self) -> u64 {
        self.nodes as u64 * self.cores_per_node as u64
    }

    pub fn total_gpus(&self) -> u64 {
        self.nodes as u64 * self.gpus_per_node as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.total_cores() < 1 {
            return Err(ConfigError::NoCores(self.name.clone()));
        }
        if !self.launch_templates.contains_key(&LaunchMethod::Direct) {
            return Err(ConfigError::NoDirectTemplate(self.name.clone()));
        }
        if let Some(b) = &self.batch {
            if !b.queue_wait.is_valid() {
                return Err(ConfigError::NegativeWait(self.name.clone()));
            }
            if b.max_concurrent_jobs < 1 {
                return Err(ConfigError::NoJobSlots(self.name.clone()));
            }
        }
        Ok(())
    }
}

/// A fully rendered, deterministic description of how to start one unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchCommand {
    /// The rendered launch template.
    pub command_line: String,
    /// Shell script run with `/bin/sh`: pre_exec lines, unit environment
    /// exports, then `command_line`.
    pub script: String,
    pub working_dir: String,
    /// Process environment: config values overridden by unit values.
    pub environment: BTreeMap<String, String>,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LaunchError {
    #[error("resource {resource} has no {method:?} launch template")]
    MissingTemplate { resource: String, method: LaunchMethod },
    #[error("unit {0} has no sandbox")]
    NoSandbox(String),
}

fn is_shell_safe(c: char) -> bool {
    c.is_ascii_alphanumeric() || "_-./=:,+@%".contains(c)
}

/// Quotes `s` for a POSIX shell, leaving plain words untouched.
pub fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.chars().all(is_shell_safe) {
        return s.into();
    }
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        if c == '\'' {
            out.push_str("'\\''");
        } else {
            out.push(c);
        }
    }
    out.push('\'');
    out
}

/// Substitutes `{EXE}`, `{ARGS}`, `{NPROC}` and `{NODES}` textually.
pub fn render_template(template: &str, exe: &str, args: &[String], nproc: usize, nodes: &[&str]) -> String {
    let args = args.iter().map(|a| shell_quote(a)).collect::<Vec<_>>().join(" ");
    let rendered = template
        .replace("{EXE}", &shell_quote(exe))
        .replace("{ARGS}", &args)
        .replace("{NPROC}", &format!("{nproc}"))
        .replace("{NODES}", &nodes.join(","));
    rendered.trim_end().into()
}

fn join_path(dir: &str, name: &str) -> String {
    if dir.ends_with('/') {
        format!("{dir}{name}")
    } else {
        format!("{dir}/{name}")
    }
}

/// DIRECT template for non-MPI units, PARALLEL with `{NPROC}` = cores for MPI
/// units. Environment precedence: config, then pre_exec effects, then unit.
pub fn build_launch_command(
    unit: &Unit,
    placement: &Placement,
    config: &ResourceConfig,
) -> Result<LaunchCommand, LaunchError> {
    let desc = &unit.description;
    let method = if desc.mpi {
        LaunchMethod::Parallel
    } else {
        LaunchMethod::Direct
    };
    let template = config
        .launch_templates
        .get(&method)
        .ok_or_else(|| LaunchError::MissingTemplate {
            resource: config.name.clone(),
            method,
        })?;
    let sandbox = unit
        .sandbox
        .clone()
        .ok_or_else(|| LaunchError::NoSandbox(unit.id.clone()))?;
    let nodes: Vec<&str> = placement.node_names().collect();
    let command_line = render_template(template, &desc.executable, &desc.arguments, placement.cores(), &nodes);

    let mut script = String::new();
    for line in &desc.pre_exec {
        script.push_str(line);
        script.push('\n');
    }
    for (k, v) in &desc.environment {
        script.push_str(&format!("export {}={}\n", k, shell_quote(v)));
    }
    script.push_str(&command_line);
    script.push('\n');

    let mut environment = config.environment.clone();
    environment.extend(desc.environment.iter().map(|(k, v)| (k.clone(), v.clone())));

    Ok(LaunchCommand {
        command_line,
        script,
        stdout: join_path(&sandbox, "STDOUT"),
        stderr: join_path(&sandbox, "STDERR"),
        working_dir: sandbox,
        environment,
    })
}
