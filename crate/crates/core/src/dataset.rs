//! Target sampling, quality filters and verbalization of labeled instances
//! into supervised training records.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_import_line, CompletionInstance, RepoSnapshot, Setting, SourceFile};
use crate::label::{LabeledChunk, Polarity};
use crate::metrics::edit_similarity;
use crate::prompt::{render_left, render_right, verbalize_chunk, FimMarkers, Segment, SegmentRole, SignalTokens};
use crate::tokens::fallback_token_count;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    SingleLine,
    /// A run of consecutive lines.
    Chunk,
    /// A `def` line with its indented body.
    Function,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub targets_per_repo: usize,
    pub target_kinds: Vec<(TargetKind, f64)>,
    /// Probability that a sampled target uses the infilling setting.
    pub infilling_fraction: f64,
    pub rng_seed: u64,
    pub min_local_imports: usize,
    pub chunk_min_lines: usize,
    pub chunk_max_lines: usize,
    /// Functions must be strictly shorter than this.
    pub function_max_lines: usize,
    pub max_attempts_per_target: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            targets_per_repo: 10,
            target_kinds: alloc::vec![
                (TargetKind::SingleLine, 1.0),
                (TargetKind::Chunk, 1.0),
                (TargetKind::Function, 1.0),
            ],
            infilling_fraction: 0.5,
            rng_seed: 0,
            min_local_imports: 3,
            chunk_min_lines: 2,
            chunk_max_lines: 20,
            function_max_lines: 50,
            max_attempts_per_target: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("invalid sampling config: {0}")]
    BadSamplingConfig(String),
    #[error("instance {instance_id}: all-candidates format needs at least one positive chunk")]
    FormatInapplicable { instance_id: String },
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::BadSamplingConfig(m.to_string()));
        if self.target_kinds.is_empty() || self.target_kinds.iter().any(|(_, w)| !(*w > 0.0 && w.is_finite())) {
            return bad("target kind weights must be positive");
        }
        if self.chunk_min_lines < 1 || self.chunk_min_lines > self.chunk_max_lines {
            return bad("chunk length bounds must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.infilling_fraction) {
            return bad("infilling fraction must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub files_total: usize,
    pub files_eligible: usize,
    pub requested: usize,
    pub produced: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampledTargets {
    pub instances: Vec<CompletionInstance>,
    pub report: SamplingReport,
}

fn is_comment_or_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

/// Quality filter for a candidate target: no imports, not only comments or
/// blank lines, and at least six tokens.
pub fn is_eligible_target(target_lines: &[String]) -> bool {
    if target_lines.iter().all(|l| is_comment_or_blank(l)) {
        return false;
    }
    if target_lines.iter().any(|l| is_import_line(l)) {
        return false;
    }
    fallback_token_count(&target_lines.join("\n")) >= 6
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Half-open spans of `def` blocks shorter than `max_lines`.
pub fn function_spans(file: &SourceFile, max_lines: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for (i, line) in file.lines.iter().enumerate() {
        let t = line.trim_start();
        if !(t.starts_with("def ") || t.starts_with("async def ")) {
            continue;
        }
        let indent = indent_of(line);
        let mut end = i + 1;
        let mut last_code = i + 1;
        while end < file.lines.len() {
            let l = &file.lines[end];
            if l.trim().is_empty() {
                end += 1;
                continue;
            }
            if indent_of(l) <= indent {
                break;
            }
            end += 1;
            last_code = end;
        }
        if last_code - i < max_lines && last_code > i + 1 {
            spans.push((i, last_code));
        }
    }
    spans
}

fn pick_span(file: &SourceFile, kind: TargetKind, cfg: &SamplingConfig, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let n = file.lines.len();
    if n == 0 {
        return None;
    }
    match kind {
        TargetKind::SingleLine => {
            let s = rng.random_range(0..n);
            Some((s, s + 1))
        }
        TargetKind::Chunk => {
            if n < cfg.chunk_min_lines {
                return None;
            }
            let len = rng.random_range(cfg.chunk_min_lines..=cfg.chunk_max_lines.min(n));
            let s = rng.random_range(0..=n - len);
            Some((s, s + len))
        }
        TargetKind::Function => {
            let spans = function_spans(file, cfg.function_max_lines);
            spans.choose(rng).copied()
        }
    }
}

/// Samples completion targets from files with enough local imports.
pub fn sample_targets(repo: &RepoSnapshot, cfg: &SamplingConfig) -> Result<SampledTargets, DatasetError> {
    cfg.validate()?;
    let roots = repo.top_level_modules();
    let eligible: Vec<&SourceFile> = repo
        .files
        .iter()
        .filter(|f| crate::corpus::count_local_imports(&roots, f) >= cfg.min_local_imports)
        .collect();
    let mut out = SampledTargets {
        report: SamplingReport {
            files_total: repo.files.len(),
            files_eligible: eligible.len(),
            requested: cfg.targets_per_repo,
            ..Default::default()
        },
        ..Default::default()
    };
    if eligible.is_empty() {
        out.report.notes.push(format!(
            "{}: no file has at least {} local imports",
            repo.root, cfg.min_local_imports
        ));
        return Ok(out);
    }
    let weights = WeightedIndex::new(cfg.target_kinds.iter().map(|(_, w)| *w))
        .map_err(|e| DatasetError::BadSamplingConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut seen = BTreeSet::new();
    for _ in 0..cfg.targets_per_repo {
        let mut found = None;
        for _ in 0..cfg.max_attempts_per_target {
            let file = eligible[rng.random_range(0..eligible.len())];
            let kind = cfg.target_kinds[weights.sample(&mut rng)].0;
            let Some((s, e)) = pick_span(file, kind, cfg, &mut rng) else {
                continue;
            };
            if !is_eligible_target(&file.lines[s..e]) || seen.contains(&(file.path.as_str(), s, e)) {
                continue;
            }
            seen.insert((file.path.as_str(), s, e));
            found = Some((file, s, e));
            break;
        }
        let Some((file, s, e)) = found else {
            out.report
                .notes
                .push(format!("{}: gave up after {} attempts", repo.root, cfg.max_attempts_per_target));
            continue;
        };
        let setting = if rng.random_bool(cfg.infilling_fraction) {
            Setting::Infilling
        } else {
            Setting::LeftToRight
        };
        let id = format!("{}:{}-{}", file.path, s + 1, e);
        out.instances.push(CompletionInstance::from_file_span(id, file, s, e, setting));
    }
    out.report.produced = out.instances.len();
    Ok(out)
}

/// Consecutive `width`-line windows of `lines`, or all of `lines` when shorter.
fn windows(lines: &[String], width: usize) -> impl Iterator<Item = String> + '_ {
    let n = if lines.is_empty() {
        0
    } else if lines.len() <= width {
        1
    } else {
        lines.len() - width + 1
    };
    (0..n).map(move |i| lines[i..(i + width).min(lines.len())].join("\n"))
}

/// Best edit similarity between the target and any target-sized window of a
/// positive chunk or of the in-file context.
pub fn sufficiency_score(instance: &CompletionInstance, labeled: &[LabeledChunk]) -> f64 {
    let target = instance.target_text();
    let width = instance.target_lines.len().max(1);
    let positives = labeled
        .iter()
        .filter(|l| l.polarity() == Polarity::Positive)
        .map(|l| l.chunk.lines.as_slice());
    positives
        .chain([instance.prefix_lines.as_slice(), instance.suffix_lines.as_slice()])
        .flat_map(|lines| windows(lines, width))
        .map(|w| edit_similarity(&w, &target))
        .fold(0.0, f64::max)
}

pub fn sufficiency_filter(instance: &CompletionInstance, labeled: &[LabeledChunk], threshold: f64) -> bool {
    sufficiency_score(instance, labeled) > threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecordFormat {
    AllCandidates,
    PositiveOnly,
}

impl RecordFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordFormat::AllCandidates => "all_candidates",
            RecordFormat::PositiveOnly => "positive_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all_candidates" | "all-candidates" | "all" => Some(RecordFormat::AllCandidates),
            "positive_only" | "positive-only" | "pos" => Some(RecordFormat::PositiveOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub instance_id: String,
    pub format: RecordFormat,
    pub segments: Vec<Segment>,
}

impl TrainingRecord {
    pub fn supervised_count(&self) -> usize {
        self.segments.iter().filter(|s| s.supervised).count()
    }

    pub fn roles(&self) -> Vec<SegmentRole> {
        self.segments.iter().map(|s| s.role).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizeConfig {
    pub signals: SignalTokens,
    pub markers: FimMarkers,
    /// Loss weight of signal tokens.
    pub lambda: f64,
}

impl Default for VerbalizeConfig {
    fn default() -> Self {
        Self {
            signals: SignalTokens::default(),
            markers: FimMarkers::default(),
            lambda: 2.0,
        }
    }
}

fn push_chunk(segments: &mut Vec<Segment>, l: &LabeledChunk, cfg: &VerbalizeConfig) {
    segments.push(Segment::signal(SegmentRole::Mc, cfg.signals.mc.clone(), cfg.lambda));
    segments.push(Segment::context(SegmentRole::ChunkBody, verbalize_chunk(&l.chunk)));
    segments.push(Segment::signal(
        SegmentRole::PolarityToken,
        cfg.signals.polarity_token(l.polarity()),
        cfg.lambda,
    ));
}

/// Verbalizes a labeled instance in the given format.
///
/// `AllCandidates` shuffles every candidate and moves one random positive to
/// the end, then closes with `<EC>` and the middle marker. `PositiveOnly`
/// keeps the positives in rank order and appends the target.
pub fn verbalize<R: Rng + ?Sized>(
    instance: &CompletionInstance,
    labeled: &[LabeledChunk],
    format: RecordFormat,
    rng: &mut R,
    cfg: &VerbalizeConfig,
) -> Result<TrainingRecord, DatasetError> {
    let mut segments = alloc::vec![
        Segment::context(SegmentRole::PrefixMarker, cfg.markers.prefix.clone()),
        Segment::context(SegmentRole::LeftContext, render_left(&instance.prefix_lines)),
        Segment::context(SegmentRole::SuffixMarker, cfg.markers.suffix.clone()),
        Segment::context(SegmentRole::RightContext, render_right(&instance.suffix_lines)),
    ];
    match format {
        RecordFormat::AllCandidates => {
            if !labeled.iter().any(|l| l.polarity() == Polarity::Positive) {
                return Err(DatasetError::FormatInapplicable {
                    instance_id: instance.id.clone(),
                });
            }
            let mut order: Vec<&LabeledChunk> = labeled.iter().collect();
            order.shuffle(rng);
            let positives: Vec<usize> = (0..order.len())
                .filter(|i| order[*i].polarity() == Polarity::Positive)
                .collect();
            let last = positives[rng.random_range(0..positives.len())];
            let moved = order.remove(last);
            order.push(moved);
            for l in order {
                push_chunk(&mut segments, l, cfg);
            }
            segments.push(Segment::signal(SegmentRole::Ec, cfg.signals.ec.clone(), cfg.lambda));
            segments.push(Segment::context(SegmentRole::MiddleMarker, cfg.markers.middle.clone()));
        }
        RecordFormat::PositiveOnly => {
            let mut positives: Vec<&LabeledChunk> =
                labeled.iter().filter(|l| l.polarity() == Polarity::Positive).collect();
            positives.sort_by_key(|l| l.retrieval_rank);
            for l in positives {
                push_chunk(&mut segments, l, cfg);
            }
            segments.push(Segment::signal(SegmentRole::Ec, cfg.signals.ec.clone(), cfg.lambda));
            segments.push(Segment::context(SegmentRole::MiddleMarker, cfg.markers.middle.clone()));
            segments.push(Segment::target(instance.target_text()));
        }
    }
    Ok(TrainingRecord {
        instance_id: instance.id.clone(),
        format,
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record {instance_id}: {reason}")]
pub struct GrammarError {
    pub instance_id: String,
    pub reason: String,
}

/// Checks a record's role sequence, signal texts and supervision mask.
///
/// ```text
/// PrefixMarker LeftContext SuffixMarker RightContext
///     (MC ChunkBody PolarityToken)* EC MiddleMarker Target?
/// ```
pub fn check_record(record: &TrainingRecord, cfg: &VerbalizeConfig) -> Result<(), GrammarError> {
    let fail = |reason: String| {
        Err(GrammarError {
            instance_id: record.instance_id.clone(),
            reason,
        })
    };
    use SegmentRole::*;
    let roles = record.roles();
    let head = [PrefixMarker, LeftContext, SuffixMarker, RightContext];
    if roles.len() < head.len() + 2 || roles[..4] != head {
        return fail("missing in-file header".into());
    }
    let mut i = 4;
    let mut polarities = Vec::new();
    while roles.get(i) == Some(&Mc) {
        if roles.get(i + 1) != Some(&ChunkBody) || roles.get(i + 2) != Some(&PolarityToken) {
            return fail(format!("malformed chunk group at segment {i}"));
        }
        polarities.push(record.segments[i + 2].text.as_str());
        i += 3;
    }
    if roles.get(i) != Some(&Ec) || roles.get(i + 1) != Some(&MiddleMarker) {
        return fail(format!("expected EC then middle marker at segment {i}"));
    }
    let rest = &roles[i + 2..];
    match record.format {
        RecordFormat::AllCandidates => {
            if !rest.is_empty() {
                return fail("all-candidates record must end at the middle marker".into());
            }
            if polarities.last() != Some(&cfg.signals.pos.as_str()) {
                return fail("last chunk of an all-candidates record must be positive".into());
            }
        }
        RecordFormat::PositiveOnly => {
            if rest != [Target] {
                return fail("positive-only record needs exactly one trailing target".into());
            }
            if polarities.iter().any(|p| *p != cfg.signals.pos) {
                return fail("positive-only record contains a non-positive chunk".into());
            }
        }
    }
    for (k, s) in record.segments.iter().enumerate() {
        let expected_text = match s.role {
            Mc => Some(cfg.signals.mc.as_str()),
            Ec => Some(cfg.signals.ec.as_str()),
            PrefixMarker => Some(cfg.markers.prefix.as_str()),
            SuffixMarker => Some(cfg.markers.suffix.as_str()),
            MiddleMarker => Some(cfg.markers.middle.as_str()),
            _ => None,
        };
        if expected_text.is_some_and(|t| t != s.text) {
            return fail(format!("segment {k} has unexpected text {:?}", s.text));
        }
        if s.role == PolarityToken && !cfg.signals.polarity_set().contains(&s.text) {
            return fail(format!("segment {k} is not a polarity token"));
        }
        let (supervised, weight) = if s.role.is_signal() {
            (true, cfg.lambda)
        } else if s.role == Target {
            (true, 1.0)
        } else {
            (false, 0.0)
        };
        if s.supervised != supervised || s.loss_weight != weight {
            return fail(format!("segment {k} ({:?}) has a wrong supervision mask", s.role));
        }
    }
    Ok(())
}

/// One labeled instance ready for verbalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub instance: CompletionInstance,
    pub labeled: Vec<LabeledChunk>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub instance_id: String,
    pub format: Option<RecordFormat>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuiltDataset {
    pub records: Vec<TrainingRecord>,
    pub skipped: Vec<SkippedRecord>,
}

/// Applies the sufficiency filter and verbalizes each instance in every
/// requested format. Instance `i` draws from stream `i` of the seeded RNG, so
/// results do not depend on processing order.
pub fn build_records(
    items: &[LabeledInstance],
    formats: &[RecordFormat],
    seed: u64,
    sufficiency_threshold: f64,
    cfg: &VerbalizeConfig,
) -> BuiltDataset {
    let mut out = BuiltDataset::default();
    for (i, item) in items.iter().enumerate() {
        if !sufficiency_filter(&item.instance, &item.labeled, sufficiency_threshold) {
            out.skipped.push(SkippedRecord {
                instance_id: item.instance.id.clone(),
                format: None,
                reason: "insufficient context".into(),
            });
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for &format in formats {
            match verbalize(&item.instance, &item.labeled, format, &mut rng, cfg) {
                Ok(r) => out.records.push(r),
                Err(e) => out.skipped.push(SkippedRecord {
                    instance_id: item.instance.id.clone(),
                    format: Some(format),
                    reason: e.to_string(),
                }),
            }
        }
    }
    out
}
