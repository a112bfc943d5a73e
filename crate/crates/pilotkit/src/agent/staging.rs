//! Sandbox preparation and output collection.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use pilotkit_core::model::contained_relative;
use pilotkit_core::{StagingDirective, StagingMode, Unit};

#[derive(Debug, thiserror::Error)]
pub enum StagingError {
    #[error("staged file {0} is missing")]
    MissingStagedFile(PathBuf),
    #[error("path {0:?} resolves outside the sandbox")]
    EscapePath(String),
    #[error("promised output {0} is missing")]
    MissingOutput(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StagingError + '_ {
    move |source| StagingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn inside(root: &Path, rel: &str) -> Result<PathBuf, StagingError> {
    contained_relative(rel)
        .map(|r| root.join(r))
        .ok_or_else(|| StagingError::EscapePath(rel.into()))
}

/// Places `src` at `dest` according to `mode`, replacing whatever is there.
fn place(src: &Path, dest: &Path, mode: StagingMode) -> Result<(), StagingError> {
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    if fs::symlink_metadata(dest).is_ok() {
        fs::remove_file(dest).map_err(io_err(dest))?;
    }
    match mode {
        StagingMode::Link => std::os::unix::fs::symlink(src, dest).map_err(io_err(dest)),
        StagingMode::Copy => fs::copy(src, dest).map(|_| ()).map_err(io_err(dest)),
        StagingMode::Move => match fs::rename(src, dest) {
            Ok(()) => Ok(()),
            // Crossing filesystems: copy, then drop the original.
            Err(_) => {
                fs::copy(src, dest).map_err(io_err(dest))?;
                fs::remove_file(src).map_err(io_err(src))
            }
        },
    }
}

fn source_path(d: &StagingDirective, sandbox: &Path) -> PathBuf {
    let p = Path::new(&d.source);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        sandbox.join(p)
    }
}

/// Makes every input directive's staged source available at its destination
/// inside `sandbox`. Relative sources resolve against the sandbox.
pub fn link_inputs(unit: &Unit, sandbox: &Path) -> Result<(), StagingError> {
    fs::create_dir_all(sandbox).map_err(io_err(sandbox))?;
    for d in &unit.description.input_staging {
        let dest = inside(sandbox, &d.destination)?;
        let src = source_path(d, sandbox);
        if !src.exists() {
            return Err(StagingError::MissingStagedFile(src));
        }
        place(&src, &dest, d.mode)?;
    }
    Ok(())
}

/// Applies output directives from `sandbox` to `output_root`; returns the
/// written paths.
pub fn collect_outputs(unit: &Unit, sandbox: &Path, output_root: &Path) -> Result<Vec<PathBuf>, StagingError> {
    let mut written = Vec::new();
    for d in &unit.description.output_staging {
        let src = inside(sandbox, &d.source)?;
        if !src.exists() {
            return Err(StagingError::MissingOutput(src));
        }
        let dest = inside(output_root, &d.destination)?;
        place(&src, &dest, d.mode)?;
        written.push(dest);
    }
    Ok(written)
}
