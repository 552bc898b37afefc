//! In-memory repository and completion-task model.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One decoded source file.
///
/// A single trailing newline terminates the last line rather than opening an
/// empty one; `trailing_newline` records it so [`SourceFile::text`] restores
/// the original content exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub lines: Vec<String>,
    #[serde(default)]
    pub trailing_newline: bool,
}

impl SourceFile {
    pub fn from_text(path: impl Into<String>, text: &str) -> Self {
        let (body, trailing_newline) = match text.strip_suffix('\n') {
            Some(body) => (body, true),
            None => (text, false),
        };
        let lines = if body.is_empty() && !trailing_newline {
            Vec::new()
        } else {
            body.split('\n').map(ToString::to_string).collect()
        };
        Self {
            path: path.into(),
            lines,
            trailing_newline,
        }
    }

    pub fn text(&self) -> String {
        let mut out = self.lines.join("\n");
        if self.trailing_newline {
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

/// A repository snapshot: the cross-file corpus for one completion task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoSnapshot {
    pub root: String,
    pub files: Vec<SourceFile>,
    pub extensions: Vec<String>,
}

impl RepoSnapshot {
    /// Builds a snapshot, sorting files by path. Duplicate paths keep the
    /// first occurrence.
    pub fn new(root: impl Into<String>, mut files: Vec<SourceFile>, extensions: Vec<String>) -> Self {
        files.sort_by(|a, b| a.path.cmp(&b.path));
        files.dedup_by(|b, a| a.path == b.path);
        Self {
            root: root.into(),
            files,
            extensions,
        }
    }

    pub fn file(&self, path: &str) -> Option<&SourceFile> {
        self.files
            .binary_search_by(|f| f.path.as_str().cmp(path))
            .ok()
            .map(|i| &self.files[i])
    }

    /// Names importable from the repository root: top-level directories and
    /// top-level module stems.
    pub fn top_level_modules(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        for file in &self.files {
            let path = file.path.as_str();
            match path.split_once('/') {
                Some((dir, _)) => {
                    names.insert(dir.to_string());
                }
                None => {
                    let stem = path.rsplit_once('.').map_or(path, |(s, _)| s);
                    names.insert(stem.to_string());
                }
            }
        }
        names
    }

    /// Number of import statements in `file` that resolve lexically inside
    /// this repository.
    pub fn count_local_imports(&self, file: &SourceFile) -> usize {
        count_local_imports(&self.top_level_modules(), file)
    }
}

/// Counts import statements whose module path is local.
///
/// A statement is local when it is a relative import (`from . import x`) or
/// any imported module's first dotted segment is in `local_roots`.
pub fn count_local_imports(local_roots: &BTreeSet<String>, file: &SourceFile) -> usize {
    file.lines
        .iter()
        .filter_map(|line| parse_import(line))
        .filter(|modules| {
            modules.iter().any(|m| {
                m.starts_with('.')
                    || m.split('.')
                        .next()
                        .is_some_and(|head| local_roots.contains(head))
            })
        })
        .count()
}

/// Module paths named by an import statement, or `None` if the line is not one.
pub fn parse_import(line: &str) -> Option<Vec<&str>> {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("import ") {
        let modules = rest
            .split(',')
            .filter_map(|part| part.split_whitespace().next())
            .collect::<Vec<_>>();
        return (!modules.is_empty()).then_some(modules);
    }
    if let Some(rest) = line.strip_prefix("from ") {
        let mut words = rest.split_whitespace();
        let module = words.next()?;
        if words.next() == Some("import") {
            return Some(alloc::vec![module]);
        }
    }
    None
}

pub fn is_import_line(line: &str) -> bool {
    parse_import(line).is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Infilling,
    LeftToRight,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Infilling => "infilling",
            Setting::LeftToRight => "left_to_right",
        }
    }

    /// Accepts the canonical names plus a few common spellings.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "infilling" | "infill" | "fim" => Some(Setting::Infilling),
            "left_to_right" | "left-to-right" | "l2r" => Some(Setting::LeftToRight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstanceError {
    #[error("instance {id}: left-to-right setting requires an empty suffix")]
    SuffixInLeftToRight { id: String },
    #[error("instance {id}: target is required but missing")]
    MissingTarget { id: String },
    #[error("instance {id}: target path must be repo-relative, got {path:?}")]
    BadTargetPath { id: String, path: String },
}

/// One completion task: in-file context around a hole plus the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionInstance {
    pub id: String,
    pub target_path: String,
    pub prefix_lines: Vec<String>,
    pub suffix_lines: Vec<String>,
    /// Empty when the ground truth is unknown (inference only).
    pub target_lines: Vec<String>,
    pub setting: Setting,
}

impl CompletionInstance {
    /// Cuts `file` at the 0-based half-open line range `[start, end)`.
    ///
    /// Left-to-right instances drop everything after the hole.
    pub fn from_file_span(
        id: impl Into<String>,
        file: &SourceFile,
        start: usize,
        end: usize,
        setting: Setting,
    ) -> Self {
        let suffix_lines = match setting {
            Setting::Infilling => file.lines[end..].to_vec(),
            Setting::LeftToRight => Vec::new(),
        };
        Self {
            id: id.into(),
            target_path: file.path.clone(),
            prefix_lines: file.lines[..start].to_vec(),
            suffix_lines,
            target_lines: file.lines[start..end].to_vec(),
            setting,
        }
    }

    pub fn has_target(&self) -> bool {
        !self.target_lines.is_empty()
    }

    pub fn target_text(&self) -> String {
        self.target_lines.join("\n")
    }

    pub fn validate(&self, require_target: bool) -> Result<(), InstanceError> {
        if self.setting == Setting::LeftToRight && !self.suffix_lines.is_empty() {
            return Err(InstanceError::SuffixInLeftToRight { id: self.id.clone() });
        }
        if require_target && !self.has_target() {
            return Err(InstanceError::MissingTarget { id: self.id.clone() });
        }
        let p = self.target_path.as_str();
        if p.is_empty() || p.starts_with('/') || p.split('/').any(|seg| seg == "..") {
            return Err(InstanceError::BadTargetPath {
                id: self.id.clone(),
                path: self.target_path.clone(),
            });
        }
        Ok(())
    }
}

/// Splits a hole-delimited text fragment into lines. One trailing newline
/// closes the last line; the empty string has no lines.
pub fn fragment_lines(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n').map(ToString::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn repo(paths: &[&str]) -> RepoSnapshot {
        let files = paths.iter().map(|p| SourceFile::from_text(*p, "x = 1\n")).collect();
        RepoSnapshot::new("r", files, vec![".py".into()])
    }

    #[test]
    fn text_round_trip() {
        for text in ["", "a", "a\n", "a\nb", "a\nb\n", "\n", "\n\n", "a\r\nb\r\n"] {
            assert_eq!(SourceFile::from_text("f", text).text(), text, "{text:?}");
        }
        assert_eq!(SourceFile::from_text("f", "a\nb\n").lines, ["a", "b"]);
        assert!(SourceFile::from_text("f", "").is_empty());
    }

    #[test]
    fn stdlib_imports_are_not_local() {
        let r = repo(&["mypkg/util.py", "main.py"]);
        let f = SourceFile::from_text("main.py", "import os\nimport sys\n");
        assert_eq!(r.count_local_imports(&f), 0);
    }

    #[test]
    fn from_import_of_package_counts() {
        let r = repo(&["mypkg/util.py", "main.py"]);
        let f = SourceFile::from_text("main.py", "from mypkg.util import f\n");
        assert_eq!(r.count_local_imports(&f), 1);
    }

    #[test]
    fn mixed_imports() {
        let r = repo(&["mypkg/util.py", "helpers.py", "main.py"]);
        let src = "import os\nfrom mypkg.util import f\nimport helpers\nfrom . import sibling\nimport json\n";
        let f = SourceFile::from_text("main.py", src);
        assert_eq!(r.count_local_imports(&f), 3);
    }

    #[test]
    fn parse_import_forms() {
        assert_eq!(parse_import("import a.b as c, d"), Some(vec!["a.b", "d"]));
        assert_eq!(parse_import("  from x.y import (z,"), Some(vec!["x.y"]));
        assert_eq!(parse_import("from_ = 3"), None);
        assert_eq!(parse_import("important = 1"), None);
    }

    #[test]
    fn left_to_right_rejects_suffix() {
        let inst = CompletionInstance {
            id: "a".into(),
            target_path: "m.py".into(),
            prefix_lines: vec!["x".into()],
            suffix_lines: vec!["y".into()],
            target_lines: vec!["z".into()],
            setting: Setting::LeftToRight,
        };
        assert!(matches!(inst.validate(false), Err(InstanceError::SuffixInLeftToRight { .. })));
    }

    #[test]
    fn missing_target_only_matters_when_required() {
        let inst = CompletionInstance {
            id: "a".into(),
            target_path: "m.py".into(),
            prefix_lines: vec!["x".into()],
            suffix_lines: vec![],
            target_lines: vec![],
            setting: Setting::Infilling,
        };
        assert!(inst.validate(false).is_ok());
        assert!(inst.validate(true).is_err());
    }

    #[test]
    fn span_partition() {
        let f = SourceFile::from_text("m.py", "a\nb\nc\nd\ne\n");
        let inst = CompletionInstance::from_file_span("i", &f, 1, 3, Setting::Infilling);
        let mut all = inst.prefix_lines.clone();
        all.extend(inst.target_lines.clone());
        all.extend(inst.suffix_lines.clone());
        assert_eq!(all, f.lines);
        let l2r = CompletionInstance::from_file_span("i", &f, 1, 3, Setting::LeftToRight);
        assert!(l2r.suffix_lines.is_empty());
    }

    #[test]
    fn fragments() {
        assert!(fragment_lines("").is_empty());
        assert_eq!(fragment_lines("\n"), [""]);
        assert_eq!(fragment_lines("a\nb\n"), ["a", "b"]);
        assert_eq!(fragment_lines("a\nb"), ["a", "b"]);
    }
}
