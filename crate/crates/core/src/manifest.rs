//! Run directory bookkeeping.
//!
//! Every stage output is tracked in `manifest.json` by SHA-256 digest. Files
//! and the manifest are written to a temporary name and renamed into place,
//! and a lock file serializes writers, so concurrent stages cannot tear the
//! manifest. Re-persisting a stage whose inputs and outputs are unchanged
//! writes nothing.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::Seed;

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".manifest.lock";
const LOCK_TIMEOUT: Duration = Duration::from_secs(30);
pub const TOOL_VERSION: &str = concat!("selfreport ", env!("CARGO_PKG_VERSION"));

/// Fixed file names inside a run directory.
pub mod layout {
    pub const CONFIG: &str = "config.toml";
    pub const ORIGINAL_CONTEXTS: &str = "contexts/original.json";
    pub const TRANSFER_CONTEXTS: &str = "contexts/transfer.json";
    pub const TARGETS: &str = "weights/targets.json";
    pub const SUBJECT_BASE: &str = "weights/subject-base.json";
    pub const SUBJECT_TRAINED: &str = "weights/subject-trained.json";
    pub const PREFERENCE_DATASET: &str = "datasets/preference.jsonl";
    pub const DATASET_DIR: &str = "datasets";
    pub const VERIFY_CHOICES: &str = "choices/verify.jsonl";
    pub const NATIVE_CHOICES: &str = "choices/native.jsonl";
    pub const LEARNED: &str = "estimates/verify.json";
    pub const NATIVE_LEARNED: &str = "estimates/native.json";
    pub const BASE_REPORTS: &str = "reports/base.jsonl";
    pub const TRAINED_REPORTS: &str = "reports/trained.jsonl";
    pub const NATIVE_BASE_REPORTS: &str = "reports/native-base.jsonl";
    pub const NATIVE_TRAINED_REPORTS: &str = "reports/native-trained.jsonl";
    pub const REPORTED_BASE: &str = "estimates/reported-base.json";
    pub const REPORTED_TRAINED: &str = "estimates/reported-trained.json";
    pub const NATIVE_REPORTED_BASE: &str = "estimates/native-reported-base.json";
    pub const NATIVE_REPORTED_TRAINED: &str = "estimates/native-reported-trained.json";
    pub const ANALYSIS: &str = "analysis/report.json";
    pub const DRAWS: &str = "analysis/draws.json";
    pub const SUMMARY: &str = "analysis/summary.md";

    /// `estimates/<stem>.json` for `choices/<stem>.jsonl`.
    pub fn estimates_for(choices_file: &str) -> String {
        let stem = std::path::Path::new(choices_file)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("choices");
        format!("estimates/{stem}.json")
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(digest(&fs::read(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Relative path -> digest of every file the stage read.
    pub inputs: IndexMap<String, String>,
    /// Relative path -> digest of every file the stage wrote.
    pub outputs: IndexMap<String, String>,
    /// Command-line flags that produced the stage, verbatim.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub invocation: Vec<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch when the run directory was created.
    pub created_at: u64,
    pub seed: Seed,
    pub backend: Value,
    pub context_sets: Vec<String>,
    pub stages: IndexMap<String, StageRecord>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, seed: Seed, backend: Value, context_sets: Vec<String>) -> Self {
        RunManifest {
            run_id: run_id.into(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seed,
            backend,
            context_sets,
            stages: IndexMap::new(),
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = run_dir.join(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text).map_err(|e| {
                Error::Integrity(format!("{} is not a valid manifest: {e}", path.display()))
            })?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Loads the manifest, or creates (and writes) one from `fresh`.
    pub fn open_or_create(run_dir: &Path, fresh: impl FnOnce() -> RunManifest) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let _lock = RunLock::acquire(run_dir)?;
        if let Some(m) = Self::load(run_dir)? {
            return Ok(m);
        }
        let m = fresh();
        write_atomic(&run_dir.join(MANIFEST_FILE), m.to_json().as_bytes())?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Checks every recorded output against its digest.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for (name, stage) in &self.stages {
            for (rel, want) in &stage.outputs {
                check_digest(run_dir, name, rel, want)?;
            }
        }
        Ok(())
    }
}

fn check_digest(run_dir: &Path, stage: &str, rel: &str, want: &str) -> Result<()> {
    let path = run_dir.join(rel);
    let got = file_digest(&path).map_err(|_| {
        Error::Integrity(format!("stage {stage}: recorded file {rel} is missing"))
    })?;
    if got != want {
        return Err(Error::Integrity(format!(
            "stage {stage}: {rel} does not match its recorded digest; refusing to continue"
        )));
    }
    Ok(())
}

/// Exclusive writer lock on a run directory, released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_TIMEOUT {
                        return Err(Error::Integrity(format!(
                            "run directory is locked by {}; remove it if no run is active",
                            path.display()
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes `bytes` next to `path` and renames over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::config(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersistOutcome {
    Written,
    Unchanged,
}

/// One stage's contribution to the run directory.
#[derive(Debug, Clone, Default)]
pub struct StageOutputs {
    /// Files the stage read, relative to the run directory.
    pub inputs: Vec<String>,
    /// Files to write, relative to the run directory.
    pub files: Vec<(String, Vec<u8>)>,
    pub invocation: Vec<String>,
    pub details: Value,
}

fn relative_ok(rel: &str) -> Result<()> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        return Err(Error::config(format!(
            "stage file {rel:?} must stay inside the run directory"
        )));
    }
    Ok(())
}

/// Records a stage's outputs and updates the manifest.
///
/// If the manifest already holds this stage, its recorded outputs must
/// still match their digests; a mismatch is refused. When inputs, outputs,
/// invocation and details are all unchanged nothing is written.
pub fn persist_stage(run_dir: &Path, stage: &str, outputs: StageOutputs) -> Result<(RunManifest, PersistOutcome)> {
    let _lock = RunLock::acquire(run_dir)?;
    let mut manifest = RunManifest::load(run_dir)?.ok_or_else(|| {
        Error::Integrity(format!("{} has no {MANIFEST_FILE}", run_dir.display()))
    })?;

    let mut inputs = IndexMap::new();
    for rel in &outputs.inputs {
        relative_ok(rel)?;
        let d = file_digest(&run_dir.join(rel)).map_err(|_| {
            Error::Integrity(format!("stage {stage}: input {rel} is missing"))
        })?;
        inputs.insert(rel.clone(), d);
    }
    let mut produced = IndexMap::new();
    for (rel, bytes) in &outputs.files {
        relative_ok(rel)?;
        produced.insert(rel.clone(), digest(bytes));
    }
    let record = StageRecord {
        status: StageStatus::Completed,
        inputs,
        outputs: produced,
        invocation: outputs.invocation,
        details: outputs.details,
    };

    if let Some(existing) = manifest.stages.get(stage) {
        for (rel, want) in &existing.outputs {
            check_digest(run_dir, stage, rel, want)?;
        }
        if *existing == record {
            return Ok((manifest, PersistOutcome::Unchanged));
        }
    }

    for (rel, bytes) in &outputs.files {
        let path = run_dir.join(rel);
        let same = fs::read(&path).map(|b| b == *bytes).unwrap_or(false);
        if !same {
            write_atomic(&path, bytes)?;
        }
    }
    manifest.stages.insert(stage.to_string(), record);
    write_atomic(&run_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok((manifest, PersistOutcome::Written))
}
