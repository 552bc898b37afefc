//! Loading repository snapshots from disk.

use std::fs;
use std::path::{Path, PathBuf};

use ctxfilter_core::corpus::{RepoSnapshot, SourceFile};
use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("repository root {0} does not exist or is not a directory")]
    NotFound(PathBuf),
    #[error("walking {path}: {source}")]
    Walk {
        path: PathBuf,
        #[source]
        source: walkdir::Error,
    },
}

#[derive(Debug, Clone)]
pub struct LoadedRepo {
    pub snapshot: RepoSnapshot,
    /// Non-fatal problems: undecodable bytes, unreadable files.
    pub warnings: Vec<String>,
}

fn is_hidden(entry: &walkdir::DirEntry) -> bool {
    entry.depth() > 0 && entry.file_name().to_string_lossy().starts_with('.')
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Reads every file under `root` whose extension is in `extensions`.
///
/// Hidden files and directories are skipped and symlinks are not followed.
/// Invalid UTF-8 is replaced and reported as a warning.
pub fn load_repo(root: &Path, extensions: &[String], parallel: bool) -> Result<LoadedRepo, RepoError> {
    if !root.is_dir() {
        return Err(RepoError::NotFound(root.to_path_buf()));
    }
    let mut paths = Vec::new();
    let walker = WalkDir::new(root)
        .follow_links(false)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| !is_hidden(e));
    for entry in walker {
        let entry = entry.map_err(|source| RepoError::Walk {
            path: root.to_path_buf(),
            source,
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry.path().extension().and_then(|e| e.to_str()).unwrap_or("");
        if extensions.iter().any(|x| x.trim_start_matches('.') == ext) {
            paths.push(entry.into_path());
        }
    }
    let read = |path: &PathBuf| -> (Option<SourceFile>, Option<String>) {
        let rel = relative(root, path);
        match fs::read(path) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(text) => (Some(SourceFile::from_text(rel, &text)), None),
                Err(e) => {
                    let text = String::from_utf8_lossy(e.as_bytes()).into_owned();
                    let warning = format!("{rel}: invalid UTF-8 replaced");
                    (Some(SourceFile::from_text(rel, &text)), Some(warning))
                }
            },
            Err(e) => (None, Some(format!("{rel}: {e}"))),
        }
    };
    let results: Vec<_> = if parallel {
        paths.par_iter().map(read).collect()
    } else {
        paths.iter().map(read).collect()
    };
    let mut files = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (file, warning) in results {
        files.extend(file);
        warnings.extend(warning);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let snapshot = RepoSnapshot::new(root.to_string_lossy(), files, extensions.to_vec());
    Ok(LoadedRepo { snapshot, warnings })
}

/// Writes a snapshot's files under `root`, creating directories as needed.
pub fn write_repo(root: &Path, repo: &RepoSnapshot) -> std::io::Result<()> {
    for file in &repo.files {
        let path = root.join(&file.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, file.text())?;
    }
    Ok(())
}
