//! Sandbox root, path containment guard and workdir creation.
//!
//! Isolation is directory based: every agent trains in its own directory
//! under the run root and every framework-mediated file operation passes
//! through [`SandboxRoot::guard_path`]. Operators who need stronger
//! isolation can wrap the trainee command with `container_command_prefix`.

use std::fs;
use std::path::{Component, Path, PathBuf};

use walkdir::WalkDir;

use crate::model::Agent;

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("path escapes the sandbox: {0}")]
    PathEscape(PathBuf),
    #[error("path is inside the controller directory: {0}")]
    ControllerDirForbidden(PathBuf),
    #[error("target already exists: {0}")]
    TargetExists(PathBuf),
    #[error("copy failed: {0}")]
    CopyFailure(String),
    #[error("sandbox misconfigured: {0}")]
    Misconfigured(String),
    #[error("sandbox io: {0}")]
    Io(#[from] std::io::Error),
}

/// Names never copied into a new workdir: outputs of a previous training run.
const TRANSIENT: &[&str] = &["metrics.json", "logs", "checkpoints", "__pycache__"];
const TRANSIENT_EXT: &[&str] = &["pt", "ckpt", "pyc"];

#[derive(Debug, Clone)]
pub struct SandboxRoot {
    root: PathBuf,
    controller_dir: PathBuf,
}

fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Canonicalizes the longest existing prefix of `path` and re-appends the rest.
fn physical(path: &Path) -> std::io::Result<PathBuf> {
    let mut existing = path.to_path_buf();
    let mut rest = Vec::new();
    loop {
        match existing.canonicalize() {
            Ok(canon) => {
                let mut out = canon;
                for part in rest.iter().rev() {
                    out.push(part);
                }
                return Ok(out);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let Some(name) = existing.file_name().map(|n| n.to_os_string()) else { return Err(e) };
                rest.push(name);
                if !existing.pop() {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

impl SandboxRoot {
    /// Creates `root` if needed. `controller_dir` must exist and the two
    /// trees must be disjoint.
    pub fn new(root: &Path, controller_dir: &Path) -> Result<Self, SandboxError> {
        fs::create_dir_all(root)?;
        let root = root.canonicalize()?;
        let controller_dir = controller_dir
            .canonicalize()
            .map_err(|e| SandboxError::Misconfigured(format!("controller dir {}: {e}", controller_dir.display())))?;
        if controller_dir.starts_with(&root) || root.starts_with(&controller_dir) {
            return Err(SandboxError::Misconfigured(format!(
                "run root {} and controller dir {} overlap",
                root.display(),
                controller_dir.display()
            )));
        }
        Ok(Self { root, controller_dir })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn controller_dir(&self) -> &Path {
        &self.controller_dir
    }

    /// Returns the normalized absolute form of `candidate` if it lies inside
    /// the root both lexically and after resolving symlinks. Relative
    /// candidates are taken relative to the root.
    pub fn guard_path(&self, candidate: &Path) -> Result<PathBuf, SandboxError> {
        let absolute = if candidate.is_absolute() { candidate.to_path_buf() } else { self.root.join(candidate) };
        let lexical = normalize(&absolute);
        let resolved = physical(&lexical)?;
        if lexical.starts_with(&self.controller_dir) || resolved.starts_with(&self.controller_dir) {
            return Err(SandboxError::ControllerDirForbidden(candidate.to_path_buf()));
        }
        if !lexical.starts_with(&self.root) || !resolved.starts_with(&self.root) {
            return Err(SandboxError::PathEscape(candidate.to_path_buf()));
        }
        Ok(resolved)
    }

    /// Absolute, guarded workdir of `agent`.
    pub fn workdir(&self, agent: &Agent) -> Result<PathBuf, SandboxError> {
        self.guard_path(&agent.workdir)
    }

    /// Copies `source` (the trainee template or a parent's workdir) into the
    /// agent's fresh workdir, skipping transient training outputs.
    pub fn create_workdir(&self, agent: &Agent, source: &Path) -> Result<PathBuf, SandboxError> {
        let target = self.guard_path(&agent.workdir)?;
        if target.exists() {
            return Err(SandboxError::TargetExists(target));
        }
        let source = source
            .canonicalize()
            .map_err(|e| SandboxError::CopyFailure(format!("{}: {e}", source.display())))?;
        let result = self.copy_tree(&source, &target);
        if result.is_err() {
            let _ = fs::remove_dir_all(&target);
        }
        result.map(|_| target)
    }

    fn copy_tree(&self, source: &Path, target: &Path) -> Result<(), SandboxError> {
        fs::create_dir_all(target)?;
        let walker = WalkDir::new(source).min_depth(1).follow_links(false).sort_by_file_name();
        let mut it = walker.into_iter();
        while let Some(entry) = it.next() {
            let entry = entry.map_err(|e| SandboxError::CopyFailure(e.to_string()))?;
            let name = entry.file_name().to_string_lossy();
            let ext = entry.path().extension().map(|e| e.to_string_lossy().into_owned());
            if TRANSIENT.contains(&name.as_ref()) || ext.as_deref().is_some_and(|e| TRANSIENT_EXT.contains(&e)) {
                if entry.file_type().is_dir() {
                    it.skip_current_dir();
                }
                continue;
            }
            let rel = entry.path().strip_prefix(source).expect("walkdir yields children of source");
            let dest = target.join(rel);
            let ft = entry.file_type();
            if ft.is_dir() {
                fs::create_dir_all(&dest)?;
            } else if ft.is_symlink() {
                let resolved = entry
                    .path()
                    .canonicalize()
                    .map_err(|_| SandboxError::PathEscape(entry.path().to_path_buf()))?;
                if !(resolved.starts_with(source) || resolved.starts_with(&self.root)) {
                    return Err(SandboxError::PathEscape(entry.path().to_path_buf()));
                }
                if resolved.is_dir() {
                    return Err(SandboxError::CopyFailure(format!(
                        "directory symlink {} is not supported",
                        entry.path().display()
                    )));
                }
                fs::copy(&resolved, &dest).map_err(|e| SandboxError::CopyFailure(format!("{}: {e}", rel.display())))?;
            } else {
                fs::copy(entry.path(), &dest)
                    .map_err(|e| SandboxError::CopyFailure(format!("{}: {e}", rel.display())))?;
            }
        }
        Ok(())
    }
}
