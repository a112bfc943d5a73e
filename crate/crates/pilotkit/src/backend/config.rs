//! Named resource configurations: built-ins plus JSON files from a directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pilotkit_core::batch::{BatchSimConfig, QueueWait};
use pilotkit_core::launch::{AgentLaunch, ConfigError, LaunchMethod, ResourceConfig};

pub const CONFIG_DIR_ENV: &str = "PILOTKIT_CONFIG_DIR";

/// Parallel launches are emulated: the program runs once, told its rank
/// count and hosts through the environment.
pub const EMULATED_PARALLEL: &str = "env PILOTKIT_NPROC={NPROC} PILOTKIT_NODES={NODES} {EXE} {ARGS}";

#[derive(Debug, thiserror::Error)]
pub enum ConfigLoadError {
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

fn templates() -> BTreeMap<LaunchMethod, String> {
    BTreeMap::from([
        (LaunchMethod::Direct, "{EXE} {ARGS}".to_string()),
        (LaunchMethod::Parallel, EMULATED_PARALLEL.to_string()),
    ])
}

pub fn builtin_configs() -> Vec<ResourceConfig> {
    vec![
        ResourceConfig {
            name: "local".into(),
            nodes: 4,
            cores_per_node: 16,
            gpus_per_node: 0,
            agent_launch: AgentLaunch::InProcess,
            batch: None,
            launch_templates: templates(),
            environment: BTreeMap::new(),
        },
        ResourceConfig {
            name: "sim-3072".into(),
            nodes: 128,
            cores_per_node: 24,
            gpus_per_node: 0,
            agent_launch: AgentLaunch::InProcess,
            batch: Some(BatchSimConfig {
                queue_wait: QueueWait::Uniform {
                    min: 0.5,
                    max: 1.5,
                    seed: 42,
                },
                max_concurrent_jobs: 4,
            }),
            launch_templates: templates(),
            environment: BTreeMap::new(),
        },
    ]
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    configs: BTreeMap<String, ResourceConfig>,
}

impl Registry {
    pub fn builtin() -> Self {
        let mut r = Registry::default();
        for c in builtin_configs() {
            r.configs.insert(c.name.clone(), c);
        }
        r
    }

    /// Built-ins overlaid with every `*.json` file in `dir`.
    pub fn with_dir(dir: &Path) -> Result<Self, ConfigLoadError> {
        let mut r = Self::builtin();
        let io = |source| ConfigLoadError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read(&path).map_err(|source| ConfigLoadError::Io {
                path: path.clone(),
                source,
            })?;
            let cfg: ResourceConfig = serde_json::from_slice(&text).map_err(|source| ConfigLoadError::Parse {
                path: path.clone(),
                source,
            })?;
            r.insert(cfg)?;
        }
        Ok(r)
    }

    /// Built-ins, plus the directory named by `PILOTKIT_CONFIG_DIR` if set.
    pub fn from_env() -> Result<Self, ConfigLoadError> {
        match std::env::var_os(CONFIG_DIR_ENV) {
            Some(dir) => Self::with_dir(Path::new(&dir)),
            None => Ok(Self::builtin()),
        }
    }

    pub fn insert(&mut self, cfg: ResourceConfig) -> Result<(), ConfigLoadError> {
        cfg.validate()?;
        self.configs.insert(cfg.name.clone(), cfg);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ResourceConfig, ConfigLoadError> {
        self.configs
            .get(name)
            .ok_or_else(|| ConfigLoadError::UnknownResource(name.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.configs.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        let r = Registry::builtin();
        let sim = r.get("sim-3072").unwrap();
        assert_eq!(sim.total_cores(), 3072);
        assert!(r.get("local").is_ok());
        assert!(matches!(r.get("nope"), Err(ConfigLoadError::UnknownResource(_))));
    }

    #[test]
    fn directory_overrides_and_validates() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = builtin_configs().remove(0);
        cfg.name = "tiny".into();
        cfg.nodes = 1;
        cfg.cores_per_node = 2;
        fs::write(d.path().join("tiny.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
        let r = Registry::with_dir(d.path()).unwrap();
        assert_eq!(r.get("tiny").unwrap().total_cores(), 2);
        assert!(r.get("local").is_ok());

        cfg.launch_templates.clear();
        fs::write(d.path().join("tiny.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
        assert!(matches!(Registry::with_dir(d.path()), Err(ConfigLoadError::Invalid(_))));
    }
}
