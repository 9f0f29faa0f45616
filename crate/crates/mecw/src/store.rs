//! Durable, append-only persistence of runs.
//!
//! One directory per run:
//!
//! ```text
//! <root>/<run_id>/
//!   manifest.json        written before the first trial, then immutable
//!   trials.jsonl         one JSON record per graded trial, append-only
//!   failures.jsonl       one JSON record per failed/skipped cell
//!   completion.json      sidecar totals, rewritten when a run finishes
//!   analysis/analysis.json   derived statistics (the analyze stage)
//!   reports/             rendered artifacts (the report stage)
//! ```
//!
//! Records are newline-delimited JSON. A crash can leave at most one
//! partial trailing line, which is never considered committed; readers
//! either reject it (strict) or skip it with a report (permissive),
//! and resuming truncates it before appending.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::AnalysisBundle;
use crate::sweep::{FailureRecord, SweepPlan, Trial};
use crate::tasks::TaskType;

/// Immutable description of a run, written before its first trial.
/// Credential values never appear here — endpoints carry only the
/// *names* of environment variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    /// RFC 3339 UTC; `None` for fully simulated runs, which must be
    /// bytewise reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    pub harness_version: String,
    pub lexicon_hash: String,
    pub prompt_template_hash: String,
    pub planned_trials: u64,
    pub plan: SweepPlan,
    /// Unknown fields from newer writers survive a read-modify-write.
    #[serde(flatten, default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// End-of-run totals, kept beside the manifest so the manifest itself
/// can stay immutable from the moment trials start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub completed_trials: u64,
    pub failed_trials: u64,
}

/// Predicate over stored trials; `None` fields match everything.
/// Token bounds are inclusive and apply to `input_tokens.tokens`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialFilter {
    pub model_id: Option<String>,
    pub task: Option<TaskType>,
    pub min_tokens: Option<u64>,
    pub max_tokens: Option<u64>,
}

impl TrialFilter {
    pub fn matches(&self, trial: &Trial) -> bool {
        if let Some(m) = &self.model_id {
            if &trial.model_id != m {
                return false;
            }
        }
        if let Some(t) = self.task {
            if trial.task != t {
                return false;
            }
        }
        let tokens = trial.input_tokens.tokens;
        if let Some(lo) = self.min_tokens {
            if tokens < lo {
                return false;
            }
        }
        if let Some(hi) = self.max_tokens {
            if tokens > hi {
                return false;
            }
        }
        true
    }
}

/// How to treat lines that fail to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Any bad line (including an unterminated final one) is an error.
    Strict,
    /// Bad lines are skipped and reported with their line numbers.
    Permissive,
}

/// A line that permissive loading skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedLine {
    pub line: u64,
    pub message: String,
}

/// Result of loading a trial log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialLoad {
    pub trials: Vec<Trial>,
    pub skipped: Vec<SkippedLine>,
}

/// Rejects run ids that could escape the store directory or collide
/// with hidden files.
pub fn validate_run_id(run_id: &str) -> Result<()> {
    let ok_chars = run_id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if run_id.is_empty()
        || run_id.len() > 128
        || !ok_chars
        || run_id.starts_with('.')
        || run_id.starts_with('-')
    {
        return Err(Error::Validation(format!(
            "invalid run id {run_id:?}: use 1-128 chars of [A-Za-z0-9._-], not starting with '.' or '-'"
        )));
    }
    Ok(())
}

/// Handle to a run store rooted at one directory.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Store { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn reports_dir(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("reports")
    }

    fn trials_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("trials.jsonl")
    }

    fn failures_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("failures.jsonl")
    }

    fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("manifest.json")
    }

    fn completion_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("completion.json")
    }

    fn analysis_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("analysis").join("analysis.json")
    }

    /// Creates the run directory and writes its manifest. Fails if the
    /// run already exists — manifests are never overwritten.
    pub fn create_run(&self, manifest: &RunManifest) -> Result<()> {
        validate_run_id(&manifest.run_id)?;
        let dir = self.run_dir(&manifest.run_id);
        if dir.exists() {
            return Err(Error::RunExists {
                run_id: manifest.run_id.clone(),
            });
        }
        fs::create_dir_all(&dir)?;
        write_json_durable(&self.manifest_path(&manifest.run_id), manifest)
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.manifest_path(run_id).is_file()
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest> {
        validate_run_id(run_id)?;
        if !self.run_dir(run_id).is_dir() {
            return Err(Error::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        let path = self.manifest_path(run_id);
        let text = fs::read_to_string(&path).map_err(|_| {
            Error::MissingArtifact(format!("run {run_id} has no manifest.json"))
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })
    }

    /// Appends one trial and makes it durable before returning.
    pub fn append_trial(&self, run_id: &str, trial: &Trial) -> Result<()> {
        if !self.run_exists(run_id) {
            return Err(Error::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        let mut writer = self.appender(self.trials_path(run_id))?;
        writer.append(trial)?;
        writer.sync()
    }

    /// Appends one failure record and makes it durable before
    /// returning.
    pub fn append_failure(&self, run_id: &str, record: &FailureRecord) -> Result<()> {
        if !self.run_exists(run_id) {
            return Err(Error::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        let mut writer = self.appender(self.failures_path(run_id))?;
        writer.append(record)?;
        writer.sync()
    }

    /// Buffering appender for the trial log; the sweep syncs it at
    /// checkpoints instead of per record.
    pub fn trial_writer(&self, run_id: &str) -> Result<RecordAppender> {
        if !self.run_exists(run_id) {
            return Err(Error::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        self.appender(self.trials_path(run_id))
    }

    /// Buffering appender for the failure log.
    pub fn failure_writer(&self, run_id: &str) -> Result<RecordAppender> {
        if !self.run_exists(run_id) {
            return Err(Error::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        self.appender(self.failures_path(run_id))
    }

    fn appender(&self, path: PathBuf) -> Result<RecordAppender> {
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(RecordAppender {
            file,
            path,
            written: 0,
        })
    }

    /// Loads matching trials in append order. See [`LoadMode`] for the
    /// corruption policy; an absent trial log is an empty run.
    pub fn load_trials(
        &self,
        run_id: &str,
        filter: &TrialFilter,
        mode: LoadMode,
    ) -> Result<TrialLoad> {
        if !self.run_dir(run_id).is_dir() {
            return Err(Error::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        let (records, skipped) = load_jsonl::<Trial>(&self.trials_path(run_id), mode)?;
        Ok(TrialLoad {
            trials: records.into_iter().filter(|t| filter.matches(t)).collect(),
            skipped,
        })
    }

    /// Loads the failure log (strictly by default: these records are
    /// small and written in the same crash-safe way as trials).
    pub fn load_failures(&self, run_id: &str, mode: LoadMode) -> Result<Vec<FailureRecord>> {
        if !self.run_dir(run_id).is_dir() {
            return Err(Error::RunNotFound {
                run_id: run_id.to_string(),
            });
        }
        let (records, _) = load_jsonl::<FailureRecord>(&self.failures_path(run_id), mode)?;
        Ok(records)
    }

    /// Truncates an unterminated final line left by an interrupted
    /// write. Returns the number of bytes dropped, if any. Interior
    /// corruption is *not* repaired here; strict loading reports it.
    pub fn repair_trailing_partial(&self, run_id: &str) -> Result<Option<u64>> {
        let mut total = None;
        for path in [self.trials_path(run_id), self.failures_path(run_id)] {
            if let Some(dropped) = truncate_partial_line(&path)? {
                *total.get_or_insert(0) += dropped;
            }
        }
        Ok(total)
    }

    /// (trial records, failure records) currently on disk.
    pub fn record_counts(&self, run_id: &str) -> Result<(u64, u64)> {
        Ok((
            count_lines(&self.trials_path(run_id))?,
            count_lines(&self.failures_path(run_id))?,
        ))
    }

    pub fn write_completion(&self, run_id: &str, record: &CompletionRecord) -> Result<()> {
        write_json_durable(&self.completion_path(run_id), record)
    }

    pub fn load_completion(&self, run_id: &str) -> Result<Option<CompletionRecord>> {
        let path = self.completion_path(run_id);
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Corrupt {
                path: path.display().to_string(),
                line: 1,
                message: e.to_string(),
            })
    }

    pub fn write_analysis(&self, run_id: &str, bundle: &AnalysisBundle) -> Result<()> {
        let path = self.analysis_path(run_id);
        fs::create_dir_all(path.parent().expect("analysis path has a parent"))?;
        write_json_durable(&path, bundle)
    }

    pub fn load_analysis(&self, run_id: &str) -> Result<AnalysisBundle> {
        let path = self.analysis_path(run_id);
        if !path.is_file() {
            return Err(Error::MissingArtifact(format!(
                "run {run_id} has no stored analysis; run the analyze stage first"
            )));
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })
    }

    /// Run ids (directories with a manifest), sorted.
    pub fn list_runs(&self) -> Result<Vec<String>> {
        if !self.root.is_dir() {
            return Ok(Vec::new());
        }
        let mut runs = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join("manifest.json").is_file() {
                if let Ok(name) = entry.file_name().into_string() {
                    runs.push(name);
                }
            }
        }
        runs.sort();
        Ok(runs)
    }
}

/// Append-only JSONL writer. Each record is one `write_all` of a full
/// line; [`sync`](RecordAppender::sync) makes everything written so
/// far durable.
pub struct RecordAppender {
    file: File,
    path: PathBuf,
    written: u64,
}

impl RecordAppender {
    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| {
            Error::Internal(format!(
                "writing record {} to {}: {e}",
                self.written + 1,
                self.path.display()
            ))
        })?;
        self.written += 1;
        Ok(())
    }

    pub fn sync(&mut self) -> Result<()> {
        self.file.flush()?;
        self.file.sync_data()?;
        Ok(())
    }
}

fn write_json_durable<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut file = File::create(path)?;
    file.write_all(text.as_bytes())?;
    file.sync_data()?;
    Ok(())
}

fn load_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    mode: LoadMode,
) -> Result<(Vec<T>, Vec<SkippedLine>)> {
    if !path.is_file() {
        return Ok((Vec::new(), Vec::new()));
    }
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (index, chunk) in text.split_inclusive('\n').enumerate() {
        let line_no = index as u64 + 1;
        let terminated = chunk.ends_with('\n');
        let body = chunk.trim_end_matches(['\n', '\r']);
        let problem = if !terminated {
            Some("unterminated final line (interrupted write?)".to_string())
        } else if body.is_empty() {
            Some("blank line".to_string())
        } else {
            match serde_json::from_str::<T>(body) {
                Ok(record) => {
                    records.push(record);
                    None
                }
                Err(e) => Some(e.to_string()),
            }
        };
        if let Some(message) = problem {
            match mode {
                LoadMode::Strict => {
                    return Err(Error::Corrupt {
                        path: path.display().to_string(),
                        line: line_no,
                        message,
                    })
                }
                LoadMode::Permissive => skipped.push(SkippedLine {
                    line: line_no,
                    message,
                }),
            }
        }
    }
    Ok((records, skipped))
}

fn truncate_partial_line(path: &Path) -> Result<Option<u64>> {
    if !path.is_file() {
        return Ok(None);
    }
    let mut file = OpenOptions::new().read(true).write(true).open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(None);
    }
    let keep = bytes
        .iter()
        .rposition(|&b| b == b'\n')
        .map(|i| i + 1)
        .unwrap_or(0);
    let dropped = (bytes.len() - keep) as u64;
    file.set_len(keep as u64)?;
    file.seek(std::io::SeekFrom::End(0))?;
    file.sync_data()?;
    Ok(Some(dropped))
}

fn count_lines(path: &Path) -> Result<u64> {
    if !path.is_file() {
        return Ok(0);
    }
    let bytes = fs::read(path)?;
    Ok(bytes.iter().filter(|&&b| b == b'\n').count() as u64)
}
