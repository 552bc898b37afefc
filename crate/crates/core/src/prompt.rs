//! Prompt segments, chunk verbalization and budgeted prompt assembly.
//!
//! Two layouts exist. The generation layout (used for labeling, export and
//! final completion) puts a comment block of cross-file fragments first and
//! the fill-in-the-middle in-file context after it:
//!
//! ```text
//! # Here are relevant code fragments from other files of the repo:
//! # -----
//! # the below code fragment can be found in:
//! # pkg/util.py
//! # -----
//! # def helper(x):
//! # ...
//! <PREFIX>left context<SUFFIX>right context<MIDDLE>
//! ```
//!
//! The policy layout (mode [`PromptMode::Inference`]) is the signal-token
//! sequence a filtering model reads while deciding:
//! `<PREFIX>left<SUFFIX>right<MC>[chunk]<pos><MC>[candidate]`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::TokenCounter;
use crate::chunk::CodeChunk;
use crate::corpus::CompletionInstance;
use crate::label::Polarity;

pub const CROSS_FILE_INTRO: &str = "# Here are relevant code fragments from other files of the repo:";
pub const CHUNK_RULE: &str = "# -----";
pub const CHUNK_LOCATION: &str = "# the below code fragment can be found in:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalTokens {
    pub ec: String,
    pub mc: String,
    pub pos: String,
    pub neg: String,
    pub neu: String,
}

impl Default for SignalTokens {
    fn default() -> Self {
        Self {
            ec: "<EC>".into(),
            mc: "<MC>".into(),
            pos: "<pos>".into(),
            neg: "<neg>".into(),
            neu: "<neu>".into(),
        }
    }
}

impl SignalTokens {
    pub fn adaptive(&self) -> Vec<String> {
        alloc::vec![self.ec.clone(), self.mc.clone()]
    }

    pub fn polarity_set(&self) -> Vec<String> {
        alloc::vec![self.pos.clone(), self.neg.clone(), self.neu.clone()]
    }

    pub fn all(&self) -> [&str; 5] {
        [&self.ec, &self.mc, &self.pos, &self.neg, &self.neu]
    }

    pub fn polarity_token(&self, p: Polarity) -> &str {
        match p {
            Polarity::Positive => &self.pos,
            Polarity::Negative => &self.neg,
            Polarity::Neutral => &self.neu,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let all = self.all();
        for (i, a) in all.iter().enumerate() {
            if a.is_empty() || all[i + 1..].contains(a) {
                return Err(PromptError::BadSignalTokens);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FimMarkers {
    pub prefix: String,
    pub suffix: String,
    pub middle: String,
}

impl Default for FimMarkers {
    fn default() -> Self {
        Self {
            prefix: "<PREFIX>".into(),
            suffix: "<SUFFIX>".into(),
            middle: "<MIDDLE>".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentRole {
    CrossFileHeader,
    PrefixMarker,
    LeftContext,
    SuffixMarker,
    RightContext,
    #[serde(rename = "MC")]
    Mc,
    ChunkBody,
    PolarityToken,
    #[serde(rename = "EC")]
    Ec,
    MiddleMarker,
    Target,
}

impl SegmentRole {
    pub fn is_signal(self) -> bool {
        matches!(self, SegmentRole::Mc | SegmentRole::PolarityToken | SegmentRole::Ec)
    }

    pub fn is_in_file(self) -> bool {
        matches!(
            self,
            SegmentRole::PrefixMarker
                | SegmentRole::LeftContext
                | SegmentRole::SuffixMarker
                | SegmentRole::RightContext
                | SegmentRole::MiddleMarker
        )
    }
}

/// A piece of a verbalized sequence with its training supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub role: SegmentRole,
    pub text: String,
    pub supervised: bool,
    pub loss_weight: f64,
}

impl Segment {
    /// Unsupervised context segment.
    pub fn context(role: SegmentRole, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            supervised: false,
            loss_weight: 0.0,
        }
    }

    /// Signal token supervised with weight `lambda`.
    pub fn signal(role: SegmentRole, text: impl Into<String>, lambda: f64) -> Self {
        debug_assert!(role.is_signal());
        Self {
            role,
            text: text.into(),
            supervised: true,
            loss_weight: lambda,
        }
    }

    pub fn target(text: impl Into<String>) -> Self {
        Self {
            role: SegmentRole::Target,
            text: text.into(),
            supervised: true,
            loss_weight: 1.0,
        }
    }
}

/// Per-chunk comment block: rule, location line, path, rule, then each code
/// line prefixed with `# `.
pub fn verbalize_chunk(chunk: &CodeChunk) -> String {
    let mut out = format!("{CHUNK_RULE}\n{CHUNK_LOCATION}\n# {}\n{CHUNK_RULE}\n", chunk.path);
    for line in &chunk.lines {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Left context as it appears after the prefix marker.
pub fn render_left(lines: &[String]) -> String {
    if lines.is_empty() {
        return String::new();
    }
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

pub fn render_right(lines: &[String]) -> String {
    lines.join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_prompt_tokens: usize,
    pub in_file_budget: usize,
    pub cross_file_budget: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_prompt_tokens: 4096,
            in_file_budget: 1024,
            cross_file_budget: 3072,
        }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.in_file_budget + self.cross_file_budget > self.max_prompt_tokens {
            return Err(PromptError::BadBudget(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptConfig {
    pub budget: Budget,
    pub markers: FimMarkers,
    pub signals: SignalTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Signal-token decision sequence for the filtering policy.
    Inference,
    /// Generation layout with a single chunk, for contribution scoring.
    Labeling,
    /// Generation layout, for completion and for external models.
    Export,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("prompt overflow: FIM markers need {needed} tokens but the in-file budget is {budget}")]
    PromptOverflow { needed: usize, budget: usize },
    #[error("budget {0:?}: in-file + cross-file exceeds the prompt maximum")]
    BadBudget(Budget),
    #[error("signal tokens must be non-empty and distinct")]
    BadSignalTokens,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub in_file: usize,
    pub cross_file: usize,
    pub total: usize,
}

/// A chunk offered to [`assemble_prompt`].
#[derive(Debug, Clone, Copy)]
pub struct PromptChunk<'a> {
    pub chunk: &'a CodeChunk,
    /// 1-based retrieval rank; larger ranks are dropped first under pressure.
    pub rank: usize,
    /// Judgment to render after the chunk in the policy layout. `None` marks
    /// a pending candidate.
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub mode: PromptMode,
    pub segments: Vec<Segment>,
    pub token_counts: TokenCounts,
    /// Ranks of the offered chunks that made it into the prompt, in prompt order.
    pub included_ranks: Vec<usize>,
    pub dropped_ranks: Vec<usize>,
    pub left_truncated: bool,
    pub right_truncated: bool,
}

impl PromptPlan {
    pub fn text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn includes_rank(&self, rank: usize) -> bool {
        self.included_ranks.contains(&rank)
    }
}

fn char_boundaries(s: &str) -> Vec<usize> {
    s.char_indices().map(|(i, _)| i).chain(core::iter::once(s.len())).collect()
}

/// Smallest index in `0..=n` for which `fits` holds, assuming `fits` is
/// monotone (false...false true...true). Returns `n` when nothing fits
/// earlier; callers check `n` separately.
fn first_fitting(n: usize, mut fits: impl FnMut(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Keeps the longest tail of `lines` that fits `budget` tokens.
fn truncate_left(lines: &[String], budget: usize, counter: &dyn TokenCounter) -> (String, bool) {
    let full = render_left(lines);
    if counter.count_tokens(&full) <= budget {
        return (full, false);
    }
    let n = lines.len();
    let mut start = first_fitting(n, |i| counter.count_tokens(&render_left(&lines[i..])) <= budget);
    while start < n && counter.count_tokens(&render_left(&lines[start..])) > budget {
        start += 1;
    }
    let rest = render_left(&lines[start..]);
    if start == 0 {
        return (rest, true);
    }
    let line = &lines[start - 1];
    let bounds = char_boundaries(line);
    let join = |cut: usize| format!("{}\n{}", &line[cut..], rest);
    // index into bounds: larger index = shorter kept suffix
    let pick = first_fitting(bounds.len() - 1, |b| counter.count_tokens(&join(bounds[b])) <= budget);
    if pick < bounds.len() - 1 && counter.count_tokens(&join(bounds[pick])) <= budget {
        (join(bounds[pick]), true)
    } else {
        (rest, true)
    }
}

/// Keeps the longest head of `lines` that fits `budget` tokens.
fn truncate_right(lines: &[String], budget: usize, counter: &dyn TokenCounter) -> (String, bool) {
    let full = render_right(lines);
    if counter.count_tokens(&full) <= budget {
        return (full, false);
    }
    let n = lines.len();
    // number of dropped tail lines
    let mut drop = first_fitting(n, |d| counter.count_tokens(&render_right(&lines[..n - d])) <= budget);
    while drop < n && counter.count_tokens(&render_right(&lines[..n - drop])) > budget {
        drop += 1;
    }
    let kept = n - drop;
    let head = render_right(&lines[..kept]);
    if drop == 0 {
        return (head, true);
    }
    let line = &lines[kept];
    let bounds = char_boundaries(line);
    let join = |cut: usize| {
        if kept == 0 {
            line[..cut].to_string()
        } else {
            format!("{head}\n{}", &line[..cut])
        }
    };
    // b counts characters removed from the end of the partial line
    let last = bounds.len() - 1;
    let pick = first_fitting(last, |b| counter.count_tokens(&join(bounds[last - b])) <= budget);
    if pick < last && counter.count_tokens(&join(bounds[last - pick])) <= budget {
        (join(bounds[last - pick]), true)
    } else {
        (head, true)
    }
}

/// Builds a budgeted prompt for `instance` with the offered chunks.
///
/// Budgets are enforced by truncating the left context from its start, the
/// right context from its end, and dropping chunks with the largest rank
/// first until the cross-file region fits.
pub fn assemble_prompt(
    instance: &CompletionInstance,
    chunks: &[PromptChunk<'_>],
    cfg: &PromptConfig,
    mode: PromptMode,
    counter: &dyn TokenCounter,
) -> Result<PromptPlan, PromptError> {
    cfg.budget.validate()?;
    let m = &cfg.markers;
    let policy = mode == PromptMode::Inference;

    let mut marker_cost = counter.count_tokens(&m.prefix) + counter.count_tokens(&m.suffix);
    if !policy {
        marker_cost += counter.count_tokens(&m.middle);
    }
    if marker_cost > cfg.budget.in_file_budget {
        return Err(PromptError::PromptOverflow {
            needed: marker_cost,
            budget: cfg.budget.in_file_budget,
        });
    }
    let available = cfg.budget.in_file_budget - marker_cost;
    let left_cost = counter.count_tokens(&render_left(&instance.prefix_lines));
    let right_cost = counter.count_tokens(&render_right(&instance.suffix_lines));
    let (left_alloc, right_alloc) = if left_cost + right_cost <= available {
        (left_cost, right_cost)
    } else {
        let right_alloc = right_cost.min(available.saturating_sub(left_cost).max(available / 2));
        (available - right_alloc, right_alloc)
    };
    let (left, left_truncated) = truncate_left(&instance.prefix_lines, left_alloc, counter);
    let (right, right_truncated) = truncate_right(&instance.suffix_lines, right_alloc, counter);
    let in_file = marker_cost + counter.count_tokens(&left) + counter.count_tokens(&right);

    // Cross-file region.
    let rendered: Vec<(PromptChunk<'_>, Vec<Segment>, usize)> = chunks
        .iter()
        .map(|pc| {
            let body = Segment::context(SegmentRole::ChunkBody, verbalize_chunk(pc.chunk));
            let segs = if policy {
                let mut v = alloc::vec![Segment::context(SegmentRole::Mc, cfg.signals.mc.clone()), body];
                if let Some(p) = pc.polarity {
                    v.push(Segment::context(SegmentRole::PolarityToken, cfg.signals.polarity_token(p)));
                }
                v
            } else {
                alloc::vec![body]
            };
            let cost = segs.iter().map(|s| counter.count_tokens(&s.text)).sum();
            (*pc, segs, cost)
        })
        .collect();
    let intro_cost = if policy { 0 } else { counter.count_tokens(CROSS_FILE_INTRO) };
    let mut keep: Vec<bool> = alloc::vec![true; rendered.len()];
    let region_cost = |keep: &[bool]| {
        let mut cost: usize = rendered.iter().zip(keep).filter(|(_, k)| **k).map(|(r, _)| r.2).sum();
        if keep.iter().any(|k| *k) {
            cost += intro_cost;
        }
        cost
    };
    while region_cost(&keep) > cfg.budget.cross_file_budget {
        let victim = rendered
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .max_by_key(|(i, r)| (r.0.rank, *i))
            .map(|(i, _)| i);
        match victim {
            Some(i) => keep[i] = false,
            None => break,
        }
    }
    let cross_file = region_cost(&keep);

    let mut segments = Vec::new();
    let mut included_ranks = Vec::new();
    let mut dropped_ranks = Vec::new();
    let mut cross_segments = Vec::new();
    for ((pc, segs, _), kept) in rendered.into_iter().zip(&keep) {
        if *kept {
            included_ranks.push(pc.rank);
            cross_segments.extend(segs);
        } else {
            dropped_ranks.push(pc.rank);
        }
    }
    let in_file_segments = [
        Segment::context(SegmentRole::PrefixMarker, m.prefix.clone()),
        Segment::context(SegmentRole::LeftContext, left),
        Segment::context(SegmentRole::SuffixMarker, m.suffix.clone()),
        Segment::context(SegmentRole::RightContext, right),
    ];
    if policy {
        segments.extend(in_file_segments);
        segments.extend(cross_segments);
    } else {
        if !included_ranks.is_empty() {
            segments.push(Segment::context(SegmentRole::CrossFileHeader, format!("{CROSS_FILE_INTRO}\n")));
        }
        segments.extend(cross_segments);
        segments.extend(in_file_segments);
        segments.push(Segment::context(SegmentRole::MiddleMarker, m.middle.clone()));
    }

    let token_counts = TokenCounts {
        in_file,
        cross_file,
        total: in_file + cross_file,
    };
    debug_assert!(token_counts.total <= cfg.budget.max_prompt_tokens);
    Ok(PromptPlan {
        mode,
        segments,
        token_counts,
        included_ranks,
        dropped_ranks,
        left_truncated,
        right_truncated,
    })
}

/// Prompt text with FIM markers, signal tokens and cross-file header/path
/// lines removed, leaving only code-bearing lines.
pub fn strip_scaffolding(text: &str, cfg: &PromptConfig) -> String {
    let mut cleaned = text.to_string();
    let markers = [&cfg.markers.prefix, &cfg.markers.suffix, &cfg.markers.middle];
    for token in markers.into_iter().map(String::as_str).chain(cfg.signals.all()) {
        if !token.is_empty() {
            cleaned = cleaned.replace(token, "\n");
        }
    }
    let mut out = String::with_capacity(cleaned.len());
    let mut skip_path = false;
    for line in cleaned.split('\n') {
        if skip_path {
            skip_path = false;
            continue;
        }
        let trimmed = line.trim_end();
        if trimmed == CHUNK_LOCATION {
            skip_path = true;
            continue;
        }
        if trimmed == CHUNK_RULE || trimmed == CROSS_FILE_INTRO {
            continue;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::FallbackCounter;
    use crate::corpus::Setting;
    use crate::tokens::fallback_token_count;
    use alloc::vec;

    fn instance(prefix: Vec<String>, suffix: Vec<String>) -> CompletionInstance {
        CompletionInstance {
            id: "i".into(),
            target_path: "t.py".into(),
            prefix_lines: prefix,
            suffix_lines: suffix,
            target_lines: vec!["y = 1".into()],
            setting: Setting::Infilling,
        }
    }

    fn chunk(path: &str, n: usize) -> CodeChunk {
        CodeChunk::new(path, 1, (0..n).map(|i| format!("value_{i} = {i}")).collect())
    }

    #[test]
    fn no_chunks_is_in_file_only() {
        let inst = instance(vec!["a = 1".into()], vec!["b = 2".into()]);
        let plan = assemble_prompt(&inst, &[], &PromptConfig::default(), PromptMode::Export, &FallbackCounter).unwrap();
        assert_eq!(plan.token_counts.cross_file, 0);
        assert_eq!(plan.text(), "<PREFIX>a = 1\n<SUFFIX>b = 2<MIDDLE>");
        assert_eq!(plan.token_counts.total, fallback_token_count(&plan.text()));
    }

    #[test]
    fn single_chunk_renders_header_and_comment_lines() {
        let inst = instance(vec!["a = 1".into()], vec![]);
        let c = chunk("pkg/util.py", 10);
        let pcs = [PromptChunk { chunk: &c, rank: 1, polarity: None }];
        let plan = assemble_prompt(&inst, &pcs, &PromptConfig::default(), PromptMode::Export, &FallbackCounter).unwrap();
        let text = plan.text();
        let block = text.split("<PREFIX>").next().unwrap();
        let lines: Vec<&str> = block.lines().collect();
        assert_eq!(lines[0], CROSS_FILE_INTRO);
        let per_chunk = &lines[1..];
        assert_eq!(per_chunk.len(), 14);
        assert_eq!(&per_chunk[..4], [CHUNK_RULE, CHUNK_LOCATION, "# pkg/util.py", CHUNK_RULE]);
        assert!(per_chunk[4..].iter().all(|l| l.starts_with("# value_")));
        assert_eq!(plan.included_ranks, [1]);
    }

    #[test]
    fn oversized_left_context_keeps_tail() {
        let prefix: Vec<String> = (0..1000).map(|i| format!("v{i} = f(v{i})")).collect();
        assert!(fallback_token_count(&render_left(&prefix)) > 5000);
        let inst = instance(prefix.clone(), vec![]);
        let plan = assemble_prompt(&inst, &[], &PromptConfig::default(), PromptMode::Export, &FallbackCounter).unwrap();
        assert!(plan.left_truncated);
        assert!(plan.token_counts.in_file <= 1024);
        let left = &plan.segments.iter().find(|s| s.role == SegmentRole::LeftContext).unwrap().text;
        assert!(render_left(&prefix).ends_with(left.as_str()));
        assert!(left.ends_with("v999 = f(v999)\n"));
    }

    #[test]
    fn single_huge_line_is_cut_mid_line() {
        let line: String = (0..3000).map(|i| format!("t{i} ")).collect();
        let inst = instance(vec![line.clone()], vec![]);
        let plan = assemble_prompt(&inst, &[], &PromptConfig::default(), PromptMode::Export, &FallbackCounter).unwrap();
        let left = &plan.segments[1].text;
        assert!(!left.is_empty());
        assert!(format!("{line}\n").ends_with(left.as_str()));
        assert!(plan.token_counts.in_file <= 1024);
    }

    #[test]
    fn right_context_keeps_head() {
        let suffix: Vec<String> = (0..800).map(|i| format!("w{i} = {i}")).collect();
        let inst = instance(vec!["a = 1".into()], suffix.clone());
        let plan = assemble_prompt(&inst, &[], &PromptConfig::default(), PromptMode::Export, &FallbackCounter).unwrap();
        assert!(plan.right_truncated);
        assert!(!plan.left_truncated);
        let right = &plan.segments.iter().find(|s| s.role == SegmentRole::RightContext).unwrap().text;
        assert!(render_right(&suffix).starts_with(right.as_str()));
        assert!(plan.token_counts.in_file <= 1024);
    }

    #[test]
    fn chunks_dropped_largest_rank_first() {
        let inst = instance(vec!["a = 1".into()], vec![]);
        let chunks: Vec<CodeChunk> = (0..10).map(|i| chunk(&format!("f{i}.py"), 10)).collect();
        let pcs: Vec<PromptChunk> = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| PromptChunk { chunk: c, rank: i + 1, polarity: None })
            .collect();
        let mut cfg = PromptConfig::default();
        cfg.budget.cross_file_budget = 200;
        let plan = assemble_prompt(&inst, &pcs, &cfg, PromptMode::Export, &FallbackCounter).unwrap();
        assert!(plan.token_counts.cross_file <= 200);
        assert!(!plan.dropped_ranks.is_empty());
        let min_dropped = *plan.dropped_ranks.iter().min().unwrap();
        assert!(plan.included_ranks.iter().all(|r| *r < min_dropped));
    }

    #[test]
    fn markers_over_budget_overflow() {
        let inst = instance(vec![], vec![]);
        let mut cfg = PromptConfig::default();
        cfg.budget.in_file_budget = 5;
        let err = assemble_prompt(&inst, &[], &cfg, PromptMode::Export, &FallbackCounter).unwrap_err();
        assert!(matches!(err, PromptError::PromptOverflow { .. }));
    }

    #[test]
    fn policy_layout_interleaves_signals() {
        let inst = instance(vec!["a = 1".into()], vec![]);
        let (c1, c2) = (chunk("x.py", 1), chunk("y.py", 1));
        let pcs = [
            PromptChunk { chunk: &c1, rank: 1, polarity: Some(Polarity::Positive) },
            PromptChunk { chunk: &c2, rank: 2, polarity: None },
        ];
        let plan = assemble_prompt(&inst, &pcs, &PromptConfig::default(), PromptMode::Inference, &FallbackCounter).unwrap();
        let roles: Vec<SegmentRole> = plan.segments.iter().map(|s| s.role).collect();
        use SegmentRole::*;
        assert_eq!(
            roles,
            [PrefixMarker, LeftContext, SuffixMarker, RightContext, Mc, ChunkBody, PolarityToken, Mc, ChunkBody]
        );
        assert!(plan.text().contains("<pos><MC>"));
    }

    #[test]
    fn strip_removes_scaffolding() {
        let inst = instance(vec!["alpha = 1".into()], vec![]);
        let c = CodeChunk::new("secret_path/name.py", 1, vec!["beta = 2".into()]);
        let pcs = [PromptChunk { chunk: &c, rank: 1, polarity: None }];
        let plan = assemble_prompt(&inst, &pcs, &PromptConfig::default(), PromptMode::Export, &FallbackCounter).unwrap();
        let stripped = strip_scaffolding(&plan.text(), &PromptConfig::default());
        let toks = crate::tokens::identifier_set(&stripped);
        let expected: crate::tokens::TokenSet = ["alpha", "1", "beta", "2"].iter().map(|s| s.to_string()).collect();
        assert_eq!(toks, expected);
    }

    #[test]
    fn signal_tokens_must_be_distinct() {
        let mut s = SignalTokens::default();
        assert!(s.validate().is_ok());
        s.neu = s.pos.clone();
        assert!(s.validate().is_err());
    }
}
