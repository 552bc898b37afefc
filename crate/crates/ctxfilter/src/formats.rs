//! On-disk formats for the CLI outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use ctxfilter_core::chunk::CrossFileIndex;
use ctxfilter_core::dataset::{RecordFormat, TrainingRecord};
use ctxfilter_core::engine::{EngineTrace, FilteredPrompt};
use ctxfilter_core::eval::{EvalReport, EvalRow};
use ctxfilter_core::label::LabelingOutcome;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing or malformed header line")]
    BadHeader,
    #[error("manifest entry {id}: {reason}")]
    BadManifest { id: String, reason: String },
}

pub fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one JSON value per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: impl IntoIterator<Item = T>) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Lazily parses JSON lines, skipping blank ones. Line numbers are 1-based.
pub struct JsonLines<R, T> {
    reader: R,
    line: usize,
    buf: String,
    _item: std::marker::PhantomData<T>,
}

impl<R: BufRead, T: DeserializeOwned> JsonLines<R, T> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            line: 0,
            buf: String::new(),
            _item: std::marker::PhantomData,
        }
    }
}

impl<R: BufRead, T: DeserializeOwned> Iterator for JsonLines<R, T> {
    type Item = Result<T, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            self.line += 1;
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) if self.buf.trim().is_empty() => continue,
                Ok(_) => {
                    let line = self.line;
                    return Some(
                        serde_json::from_str(self.buf.trim_end()).map_err(|source| FormatError::Json { line, source }),
                    );
                }
                Err(source) => {
                    return Some(Err(FormatError::Io {
                        path: PathBuf::from("<stream>"),
                        source,
                    }))
                }
            }
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    JsonLines::new(io::BufReader::new(file)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub tokens: Vec<String>,
}

pub fn index_rows(index: &CrossFileIndex) -> Vec<IndexRow> {
    index
        .chunks
        .iter()
        .map(|c| IndexRow {
            path: c.path.clone(),
            start_line: c.start_line,
            end_line: c.end_line,
            tokens: c.token_set.iter().cloned().collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRow {
    pub instance_id: String,
    pub rank: usize,
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRow {
    pub instance_id: String,
    pub generated: String,
    pub kept_ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub instance_id: String,
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
    pub rank: usize,
    pub s: f64,
    pub nll_with: f64,
    pub nll_without: f64,
    pub label: String,
}

pub fn label_rows(outcome: &LabelingOutcome) -> Vec<LabelRow> {
    outcome
        .labeled
        .iter()
        .map(|l| LabelRow {
            instance_id: outcome.instance_id.clone(),
            path: l.chunk.path.clone(),
            start_line: l.chunk.start_line,
            end_line: l.chunk.end_line,
            rank: l.retrieval_rank,
            s: l.label.score.s,
            nll_with: l.label.score.nll_with,
            nll_without: l.label.score.nll_without,
            label: l.polarity().as_str().to_string(),
        })
        .collect()
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dataset_version: u32,
    pub seed: u64,
    pub formats: Vec<RecordFormat>,
    pub lambda: f64,
    pub records: usize,
}

pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset<W: Write>(mut out: W, header: &DatasetHeader, records: &[TrainingRecord]) -> io::Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    write_jsonl(out, records)
}

/// Streams a dataset file: the header is parsed eagerly, records lazily.
pub fn open_dataset<R: BufRead>(mut reader: R) -> Result<(DatasetHeader, JsonLines<R, TrainingRecord>), FormatError> {
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(Path::new("<dataset>")))?;
    let header: DatasetHeader = serde_json::from_str(first.trim_end()).map_err(|_| FormatError::BadHeader)?;
    let mut lines = JsonLines::new(reader);
    lines.line = 1;
    Ok((header, lines))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub instance_id: String,
    #[serde(flatten)]
    pub trace: EngineTrace,
}

/// Fixed-width comparison table, one row per report.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<8} {:>7} {:>7} {:>8} {:>8} {:>10} {:>8}\n",
        "strategy", "scored", "failed", "EM%", "ES%", "xfile_tok", "signals"
    );
    for r in reports {
        let a = &r.aggregates;
        out.push_str(&format!(
            "{:<8} {:>7} {:>7} {:>8.2} {:>8.2} {:>10.1} {:>8.2}\n",
            r.strategy.as_str(),
            a.scored,
            a.failed,
            a.em_pct,
            a.es_mean_pct,
            a.mean_cross_file_tokens,
            a.mean_signal_tokens
        ));
    }
    out
}

pub fn eval_rows(reports: &[EvalReport]) -> impl Iterator<Item = &EvalRow> {
    reports.iter().flat_map(|r| r.rows.iter())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub instance_id: String,
    pub file: String,
    pub kept_ranks: Vec<usize>,
    pub cross_file_tokens: usize,
    pub total_tokens: usize,
}

pub const MANIFEST: &str = "manifest.json";

/// File name for an instance id: anything outside `[A-Za-z0-9._-]` becomes
/// `_`, and a hash suffix keeps distinct ids distinct.
pub fn prompt_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    let mut h: u32 = 0x811c_9dc5;
    for b in id.bytes() {
        h = (h ^ u32::from(b)).wrapping_mul(0x0100_0193);
    }
    format!("{safe}.{h:08x}.txt")
}

/// Writes each prompt to its own file plus a manifest, sorted by id.
pub fn write_prompts(dir: &Path, prompts: &[FilteredPrompt]) -> Result<Vec<ManifestEntry>, FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(prompts.len());
    for p in prompts {
        let file = prompt_file_name(&p.instance_id);
        let path = dir.join(&file);
        fs::write(&path, p.prompt.text()).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            instance_id: p.instance_id.clone(),
            file,
            kept_ranks: p.trace.kept_ranks(),
            cross_file_tokens: p.prompt.token_counts.cross_file,
            total_tokens: p.prompt.token_counts.total,
        });
    }
    entries.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(entries)
}

/// Prompt texts by instance id, read back from an export directory.
pub fn read_prompts(dir: &Path) -> Result<BTreeMap<String, String>, FormatError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|source| FormatError::Json { line: 1, source })?;
    let mut out = BTreeMap::new();
    for e in entries {
        if e.file.contains('/') || e.file.contains("..") {
            return Err(FormatError::BadManifest {
                id: e.instance_id,
                reason: "file must be a plain name".into(),
            });
        }
        let p = dir.join(&e.file);
        let prompt = fs::read_to_string(&p).map_err(io_err(&p))?;
        out.insert(e.instance_id, prompt);
    }
    Ok(out)
}
