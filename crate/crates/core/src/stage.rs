//! Stage sequencing, receipts, and run locking.
//!
//! The pipeline is file-gated: every stage reads artifacts produced by
//! earlier stages and writes its own artifacts into the output directory.
//! This module provides the three pieces of machinery that make that safe to
//! resume and re-run:
//!
//! * [`StageError`] — the shared error type. The CLI maps it onto process
//!   exit codes: ordering violations (a required input artifact is missing)
//!   are distinct from configuration errors, which are distinct from
//!   ordinary stage failures.
//! * [`Receipt`] — a small JSON record of the digests of a stage's inputs
//!   and outputs. When a stage is invoked and its receipt still matches the
//!   files on disk, the stage is skipped as a no-op unless forced.
//! * [`LockGuard`] — an exclusive lock file guarding the output directory so
//!   two concurrent runs cannot interleave writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::{sha256_fields, sha256_file};
use crate::modelgate::GateError;
use crate::template::TemplateError;

/// Shared error type for pipeline stages.
///
/// The variants are grouped by how the CLI reports them: `MissingInput` is an
/// ordering violation (the operator ran stages out of order), `Config` is a
/// bad run configuration, and everything else is a stage failure.
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    /// A required input artifact does not exist yet.
    #[error(
        "stage `{stage}` requires `{artifact}`, which is produced by `{produced_by}`; \
         run `{produced_by}` first"
    )]
    MissingInput {
        stage: &'static str,
        artifact: PathBuf,
        produced_by: &'static str,
    },

    /// The run configuration is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Another process holds the run lock.
    #[error("output directory is locked by another run ({0}); remove the file if stale")]
    Locked(PathBuf),

    /// Filesystem failure with the path that caused it.
    #[error("{context} ({path}): {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A JSON artifact failed to parse or serialize.
    #[error("{context} ({path}): {source}")]
    Json {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A malformed record inside an artifact, with its line number.
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Prompt template failure.
    #[error(transparent)]
    Template(#[from] TemplateError),

    /// Model gateway failure.
    #[error(transparent)]
    Gate(#[from] GateError),

    /// Any other stage-specific failure.
    #[error("stage `{stage}` failed: {message}")]
    Failed { stage: &'static str, message: String },
}

impl StageError {
    /// Helper for wrapping IO errors with context.
    pub fn io(context: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { context, path: path.into(), source }
    }

    /// Helper for wrapping JSON errors with context.
    pub fn json(context: &'static str, path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json { context, path: path.into(), source }
    }

    /// Process exit code the CLI should report for this error.
    ///
    /// 2 = stages run out of order, 3 = bad configuration, 1 = everything
    /// else. Success is 0 and is not represented here.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::MissingInput { .. } => 2,
            StageError::Config(_) => 3,
            _ => 1,
        }
    }
}

/// Asserts that `artifact` exists before a stage runs.
pub fn require_input(
    stage: &'static str,
    produced_by: &'static str,
    artifact: &Path,
) -> Result<(), StageError> {
    if artifact.exists() {
        Ok(())
    } else {
        Err(StageError::MissingInput {
            stage,
            artifact: artifact.to_path_buf(),
            produced_by,
        })
    }
}

/// Digest of one artifact path: a file's content digest, or for a directory
/// the digest of its sorted `(relative path, file digest)` pairs.
pub fn artifact_digest(path: &Path) -> Result<String, StageError> {
    if path.is_dir() {
        let mut entries: Vec<(String, String)> = Vec::new();
        collect_dir_digests(path, path, &mut entries)?;
        entries.sort();
        let mut fields: Vec<Vec<u8>> = Vec::with_capacity(entries.len() * 2);
        for (rel, digest) in &entries {
            fields.push(rel.as_bytes().to_vec());
            fields.push(digest.as_bytes().to_vec());
        }
        let refs: Vec<&[u8]> = fields.iter().map(|f| f.as_slice()).collect();
        Ok(sha256_fields(&refs))
    } else {
        sha256_file(path).map_err(|source| StageError::io("failed to digest artifact", path, source))
    }
}

fn collect_dir_digests(
    root: &Path,
    dir: &Path,
    out: &mut Vec<(String, String)>,
) -> Result<(), StageError> {
    let entries =
        fs::read_dir(dir).map_err(|source| StageError::io("failed to list directory", dir, source))?;
    for entry in entries {
        let entry =
            entry.map_err(|source| StageError::io("failed to list directory", dir, source))?;
        let path = entry.path();
        if path.is_dir() {
            collect_dir_digests(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("entry under root")
                .to_string_lossy()
                .replace('\\', "/");
            let digest = sha256_file(&path)
                .map_err(|source| StageError::io("failed to digest artifact", &path, source))?;
            out.push((rel, digest));
        }
    }
    Ok(())
}

/// Record of a completed stage: digests of the inputs it consumed and the
/// outputs it produced, plus the config digest it ran under.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Receipt {
    pub stage: String,
    pub toolkit_version: String,
    pub config_digest: String,
    /// Artifact path (relative to the output directory) → content digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Receipt {
    /// Builds a receipt by digesting the given artifact paths.
    ///
    /// Paths are recorded relative to `output_dir` when they live under it,
    /// so receipts stay valid if the output directory is moved wholesale.
    pub fn capture(
        stage: &str,
        config_digest: &str,
        output_dir: &Path,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<Self, StageError> {
        let digest_all = |paths: &[&Path]| -> Result<BTreeMap<String, String>, StageError> {
            let mut map = BTreeMap::new();
            for path in paths {
                let key = path
                    .strip_prefix(output_dir)
                    .unwrap_or(path)
                    .to_string_lossy()
                    .replace('\\', "/");
                map.insert(key, artifact_digest(path)?);
            }
            Ok(map)
        };
        Ok(Self {
            stage: stage.to_string(),
            toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            config_digest: config_digest.to_string(),
            inputs: digest_all(inputs)?,
            outputs: digest_all(outputs)?,
        })
    }

    /// Path of the receipt file for `stage`.
    pub fn path(output_dir: &Path, stage: &str) -> PathBuf {
        output_dir.join("receipts").join(format!("{stage}.json"))
    }

    /// Writes the receipt under `output_dir/receipts/`.
    pub fn write(&self, output_dir: &Path) -> Result<(), StageError> {
        let path = Self::path(output_dir, &self.stage);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|source| StageError::io("failed to create receipts dir", parent, source))?;
        }
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|source| StageError::json("failed to serialize receipt", &path, source))?;
        text.push('\n');
        fs::write(&path, text)
            .map_err(|source| StageError::io("failed to write receipt", &path, source))
    }

    /// Loads the receipt for `stage`, if one exists.
    pub fn load(output_dir: &Path, stage: &str) -> Result<Option<Self>, StageError> {
        let path = Self::path(output_dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)
            .map_err(|source| StageError::io("failed to read receipt", &path, source))?;
        let receipt = serde_json::from_str(&text)
            .map_err(|source| StageError::json("failed to parse receipt", &path, source))?;
        Ok(Some(receipt))
    }

    /// True when every recorded input and output digest still matches disk.
    ///
    /// A stage whose receipt is current can be skipped: re-running it would
    /// reproduce byte-identical outputs.
    pub fn is_current(&self, output_dir: &Path, config_digest: &str) -> bool {
        if self.config_digest != config_digest {
            return false;
        }
        let check = |map: &BTreeMap<String, String>| -> bool {
            map.iter().all(|(rel, recorded)| {
                let path = output_dir.join(rel);
                path.exists() && artifact_digest(&path).is_ok_and(|d| d == *recorded)
            })
        };
        check(&self.inputs) && check(&self.outputs)
    }
}

/// Exclusive lock on an output directory, released on drop.
///
/// Locking is advisory: the guard creates `run.lock` with `create_new`, so a
/// second process attempting to lock the same directory fails fast instead
/// of corrupting partially written artifacts.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    /// Acquires the lock, failing if another run holds it.
    pub fn acquire(output_dir: &Path) -> Result<Self, StageError> {
        fs::create_dir_all(output_dir)
            .map_err(|source| StageError::io("failed to create output dir", output_dir, source))?;
        let path = output_dir.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                // Best effort: record the owning pid for stale-lock triage.
                let _ = writeln!(file, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(err) if err.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StageError::Locked(path))
            }
            Err(source) => Err(StageError::io("failed to create lock file", &path, source)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
