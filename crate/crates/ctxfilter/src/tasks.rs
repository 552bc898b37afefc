//! Task files: one completion instance per JSON line.
//!
//! ```json
//! {"id": "t1", "target_path": "pkg/a.py", "prefix": "...", "suffix": "...", "target": "...", "setting": "infilling"}
//! ```
//!
//! `target` may be omitted for inference-only tasks.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ctxfilter_core::corpus::{fragment_lines, CompletionInstance, InstanceError, Setting};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub target_path: String,
    pub prefix: String,
    #[serde(default)]
    pub suffix: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub setting: String,
}

fn fragment(lines: &[String]) -> String {
    if lines.is_empty() {
        String::new()
    } else {
        format!("{}\n", lines.join("\n"))
    }
}

impl TaskRecord {
    pub fn from_instance(instance: &CompletionInstance) -> Self {
        Self {
            id: instance.id.clone(),
            target_path: instance.target_path.clone(),
            prefix: fragment(&instance.prefix_lines),
            suffix: fragment(&instance.suffix_lines),
            target: instance.has_target().then(|| fragment(&instance.target_lines)),
            setting: instance.setting.as_str().to_string(),
        }
    }

    pub fn into_instance(self, require_target: bool) -> Result<CompletionInstance, TaskError> {
        let setting = Setting::parse(&self.setting).ok_or_else(|| TaskError::BadSetting {
            id: self.id.clone(),
            setting: self.setting.clone(),
        })?;
        let instance = CompletionInstance {
            id: self.id,
            target_path: self.target_path,
            prefix_lines: fragment_lines(&self.prefix),
            suffix_lines: fragment_lines(&self.suffix),
            target_lines: self.target.as_deref().map(fragment_lines).unwrap_or_default(),
            setting,
        };
        instance.validate(require_target)?;
        Ok(instance)
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("task {id}: unknown setting {setting:?}")]
    BadSetting { id: String, setting: String },
    #[error(transparent)]
    Invalid(#[from] InstanceError),
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
    #[error("{path}: no valid tasks ({rejected} rejected)")]
    Empty { path: PathBuf, rejected: usize },
}

#[derive(Debug)]
pub struct LoadedTasks {
    pub instances: Vec<CompletionInstance>,
    /// Lines that were skipped, with the reason.
    pub rejected: Vec<TaskError>,
}

/// Parses task JSONL text. Blank lines are ignored and bad lines are
/// collected rather than aborting the load.
pub fn parse_tasks(text: &str, require_target: bool) -> LoadedTasks {
    let mut instances: Vec<CompletionInstance> = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<TaskRecord>(line)
            .map_err(|e| TaskError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
            .and_then(|r| r.into_instance(require_target))
            .and_then(|inst| {
                if seen.insert(inst.id.clone()) {
                    Ok(inst)
                } else {
                    Err(TaskError::DuplicateId(inst.id))
                }
            });
        match parsed {
            Ok(inst) => instances.push(inst),
            Err(e) => rejected.push(e),
        }
    }
    LoadedTasks { instances, rejected }
}

/// Loads a task file; it is an error for no task to survive validation.
pub fn load_tasks(path: &Path, require_target: bool) -> Result<LoadedTasks, TaskError> {
    let text = fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let loaded = parse_tasks(&text, require_target);
    for e in &loaded.rejected {
        log::warn!("{}: skipped task: {e}", path.display());
    }
    if loaded.instances.is_empty() {
        return Err(TaskError::Empty {
            path: path.to_path_buf(),
            rejected: loaded.rejected.len(),
        });
    }
    Ok(loaded)
}

pub fn write_tasks<W: Write>(mut out: W, instances: &[CompletionInstance]) -> io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, &TaskRecord::from_instance(inst))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
