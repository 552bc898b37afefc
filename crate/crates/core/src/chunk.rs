//! Sliding-window chunking and sparse (Jaccard) retrieval.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{RepoSnapshot, SourceFile};
pub use crate::tokens::TokenSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub window: usize,
    pub stride: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        Self {
            window: 10,
            stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid chunker config: need 1 <= stride ({stride}) <= window ({window})")]
pub struct ChunkerConfigError {
    pub window: usize,
    pub stride: usize,
}

impl ChunkerConfig {
    pub fn new(window: usize, stride: usize) -> Result<Self, ChunkerConfigError> {
        let cfg = Self { window, stride };
        cfg.validate().map(|_| cfg)
    }

    pub fn validate(&self) -> Result<(), ChunkerConfigError> {
        if self.stride == 0 || self.stride > self.window {
            return Err(ChunkerConfigError {
                window: self.window,
                stride: self.stride,
            });
        }
        Ok(())
    }
}

/// A window of consecutive lines from one cross-file source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeChunk {
    pub path: String,
    /// 1-based, inclusive.
    pub start_line: usize,
    /// 1-based, inclusive.
    pub end_line: usize,
    pub lines: Vec<String>,
    pub token_set: TokenSet,
}

impl CodeChunk {
    pub fn new(path: impl Into<String>, start_line: usize, lines: Vec<String>) -> Self {
        let token_set = tokenize(&lines.join("\n"));
        let end_line = start_line + lines.len().saturating_sub(1);
        Self {
            path: path.into(),
            start_line,
            end_line,
            lines,
            token_set,
        }
    }

    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

/// 1-based inclusive line ranges produced by the window/stride rule for a
/// file of `len` lines.
pub fn chunk_ranges(len: usize, cfg: ChunkerConfig) -> Vec<(usize, usize)> {
    if len == 0 {
        return Vec::new();
    }
    let last_start = if len > cfg.window { len - cfg.window + 1 } else { 1 };
    let mut ranges = Vec::new();
    let mut start = 1;
    while start <= last_start {
        ranges.push((start, (start + cfg.window - 1).min(len)));
        start += cfg.stride;
    }
    if ranges.last().map(|r| r.0) != Some(last_start) {
        ranges.push((last_start, len));
    }
    ranges
}

pub fn chunk_file(file: &SourceFile, cfg: ChunkerConfig) -> Vec<CodeChunk> {
    chunk_ranges(file.len(), cfg)
        .into_iter()
        .map(|(s, e)| CodeChunk::new(file.path.clone(), s, file.lines[s - 1..e].to_vec()))
        .collect()
}

/// Identifier tokens: maximal alphanumeric/underscore runs, case-sensitive.
pub fn tokenize(text: &str) -> TokenSet {
    crate::tokens::identifier_set(text)
}

/// `|a ∩ b| / |a ∪ b|`, or 0 when both sets are empty.
pub fn jaccard(a: &TokenSet, b: &TokenSet) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|t| large.contains(*t)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Similarity between a query and a chunk. Higher is better.
pub trait Scorer {
    fn score(&self, query: &TokenSet, chunk: &CodeChunk) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardScorer;

impl Scorer for JaccardScorer {
    fn score(&self, query: &TokenSet, chunk: &CodeChunk) -> f64 {
        jaccard(query, &chunk.token_set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: CodeChunk,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_lines: Vec<String>,
    pub ranked: Vec<ScoredChunk>,
    pub k: usize,
}

/// Anything that can produce ranked cross-file candidates for a prefix.
pub trait Retriever {
    fn retrieve(&self, prefix_lines: &[String], k: usize) -> RetrievalResult;
}

/// Chunks of every file in a repository, optionally minus one excluded path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossFileIndex {
    pub chunks: Vec<CodeChunk>,
    pub excluded: Option<String>,
}

pub fn build_index(repo: &RepoSnapshot, exclude_path: Option<&str>, cfg: ChunkerConfig) -> CrossFileIndex {
    let chunks = repo
        .files
        .iter()
        .filter(|f| Some(f.path.as_str()) != exclude_path)
        .flat_map(|f| chunk_file(f, cfg))
        .collect();
    CrossFileIndex {
        chunks,
        excluded: exclude_path.map(String::from),
    }
}

/// Last `window` lines of the prefix.
pub fn query_lines(prefix_lines: &[String], window: usize) -> &[String] {
    &prefix_lines[prefix_lines.len().saturating_sub(window)..]
}

fn rank_order(a: &ScoredChunk, b: &ScoredChunk) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.chunk.path.cmp(&b.chunk.path))
        .then_with(|| a.chunk.start_line.cmp(&b.chunk.start_line))
}

impl CrossFileIndex {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Read-only view that additionally skips `path` (the target file).
    pub fn excluding<'a>(&'a self, path: &'a str, query_window: usize) -> IndexView<'a, JaccardScorer> {
        IndexView {
            index: self,
            exclude: Some(path),
            query_window,
            scorer: JaccardScorer,
        }
    }

    pub fn view(&self, query_window: usize) -> IndexView<'_, JaccardScorer> {
        IndexView {
            index: self,
            exclude: None,
            query_window,
            scorer: JaccardScorer,
        }
    }

    /// Top-`k` chunks for the last `query_window` prefix lines, by Jaccard.
    pub fn retrieve(&self, prefix_lines: &[String], k: usize, query_window: usize) -> RetrievalResult {
        self.view(query_window).retrieve(prefix_lines, k)
    }
}

pub struct IndexView<'a, S> {
    index: &'a CrossFileIndex,
    exclude: Option<&'a str>,
    query_window: usize,
    scorer: S,
}

impl<'a, S> IndexView<'a, S> {
    pub fn with_scorer<T: Scorer>(self, scorer: T) -> IndexView<'a, T> {
        IndexView {
            index: self.index,
            exclude: self.exclude,
            query_window: self.query_window,
            scorer,
        }
    }
}

impl<S: Scorer> Retriever for IndexView<'_, S> {
    fn retrieve(&self, prefix_lines: &[String], k: usize) -> RetrievalResult {
        let query = query_lines(prefix_lines, self.query_window).to_vec();
        let query_tokens = tokenize(&query.join("\n"));
        let excluded = |c: &CodeChunk| {
            Some(c.path.as_str()) == self.exclude || Some(&c.path) == self.index.excluded.as_ref()
        };
        let mut scored: Vec<ScoredChunk> = self
            .index
            .chunks
            .iter()
            .filter(|c| !excluded(c))
            .map(|c| ScoredChunk {
                score: self.scorer.score(&query_tokens, c),
                chunk: c.clone(),
            })
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        RetrievalResult {
            query_lines: query,
            ranked: scored,
            k,
        }
    }
}
