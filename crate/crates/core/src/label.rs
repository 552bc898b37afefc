//! Chunk contribution scoring and polarity labels.
//!
//! The contribution of a chunk is the relative drop in the target's negative
//! log-likelihood when the chunk is added to an in-file-only prompt:
//! `s = (nll_without - nll_with) / nll_without`. Helpful chunks score
//! positive.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Generator, LikelihoodQuery};
use crate::chunk::CodeChunk;
use crate::corpus::CompletionInstance;
use crate::prompt::{assemble_prompt, PromptChunk, PromptConfig, PromptError, PromptMode};

/// NLL below which the relative score is undefined.
pub const MIN_BASELINE_NLL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    pub t_pos: f64,
    pub t_neg: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            t_pos: 0.10,
            t_neg: -0.05,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        if !(self.t_neg < 0.0 && 0.0 < self.t_pos) {
            return Err(LabelError::BadThresholds {
                t_pos: self.t_pos,
                t_neg: self.t_neg,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabelError {
    #[error("instance {instance_id}: {source}")]
    LikelihoodUnavailable {
        instance_id: String,
        #[source]
        source: BackendError,
    },
    #[error("instance {instance_id}: baseline NLL {nll} is too small to score against")]
    DegenerateTarget { instance_id: String, nll: f64 },
    #[error("instance {instance_id}: no target to score against")]
    MissingTarget { instance_id: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("thresholds must satisfy t_neg < 0 < t_pos (got {t_neg}, {t_pos})")]
    BadThresholds { t_pos: f64, t_neg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContributionScore {
    pub s: f64,
    pub nll_without: f64,
    pub nll_with: f64,
}

impl ContributionScore {
    pub fn from_nll(nll_without: f64, nll_with: f64) -> Self {
        Self {
            s: (nll_without - nll_with) / nll_without,
            nll_without,
            nll_with,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarityLabel {
    pub value: Polarity,
    pub score: ContributionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledChunk {
    pub chunk: CodeChunk,
    pub label: PolarityLabel,
    pub retrieval_rank: usize,
}

impl LabeledChunk {
    pub fn polarity(&self) -> Polarity {
        self.label.value
    }
}

/// Strict thresholds: exactly `t_pos` or `t_neg` is neutral.
pub fn classify(score: ContributionScore, cfg: &LabelerConfig) -> PolarityLabel {
    let value = if score.s > cfg.t_pos {
        Polarity::Positive
    } else if score.s < cfg.t_neg {
        Polarity::Negative
    } else {
        Polarity::Neutral
    };
    PolarityLabel { value, score }
}

fn target_nll<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    chunk: Option<&CodeChunk>,
    backend: &G,
    prompt_cfg: &PromptConfig,
) -> Result<f64, LabelError> {
    let offered: Vec<PromptChunk<'_>> = chunk
        .map(|c| PromptChunk {
            chunk: c,
            rank: 1,
            polarity: None,
        })
        .into_iter()
        .collect();
    let plan = assemble_prompt(instance, &offered, prompt_cfg, PromptMode::Labeling, &backend)?;
    let query = LikelihoodQuery {
        prompt: plan.text(),
        target: instance.target_text(),
    };
    backend
        .sequence_logprob(&query)
        .map(|lp| lp.nll())
        .map_err(|source| LabelError::LikelihoodUnavailable {
            instance_id: instance.id.clone(),
            source,
        })
}

/// NLL of the target under the in-file-only labeling prompt.
pub fn baseline_nll<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    backend: &G,
    prompt_cfg: &PromptConfig,
) -> Result<f64, LabelError> {
    if !instance.has_target() {
        return Err(LabelError::MissingTarget {
            instance_id: instance.id.clone(),
        });
    }
    let nll = target_nll(instance, None, backend, prompt_cfg)?;
    if nll < MIN_BASELINE_NLL {
        return Err(LabelError::DegenerateTarget {
            instance_id: instance.id.clone(),
            nll,
        });
    }
    Ok(nll)
}

/// Score of `chunk` against a precomputed baseline NLL.
pub fn score_against_baseline<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    chunk: &CodeChunk,
    nll_without: f64,
    backend: &G,
    prompt_cfg: &PromptConfig,
) -> Result<ContributionScore, LabelError> {
    let nll_with = target_nll(instance, Some(chunk), backend, prompt_cfg)?;
    Ok(ContributionScore::from_nll(nll_without, nll_with))
}

pub fn contribution_score<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    chunk: &CodeChunk,
    backend: &G,
    prompt_cfg: &PromptConfig,
) -> Result<ContributionScore, LabelError> {
    let nll_without = baseline_nll(instance, backend, prompt_cfg)?;
    score_against_baseline(instance, chunk, nll_without, backend, prompt_cfg)
}

/// A chunk whose likelihood could not be obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnavailableChunk {
    pub path: String,
    pub start_line: usize,
    pub retrieval_rank: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelingOutcome {
    pub instance_id: String,
    pub labeled: Vec<LabeledChunk>,
    pub unavailable: Vec<UnavailableChunk>,
}

/// Labels every ranked chunk; the baseline NLL is computed once and reused.
///
/// Chunks whose scores fail are reported in `unavailable` and left out of
/// `labeled`; the order of `labeled` follows `ranked_chunks`.
pub fn label_chunks<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    ranked_chunks: &[CodeChunk],
    backend: &G,
    cfg: &LabelerConfig,
    prompt_cfg: &PromptConfig,
) -> Result<LabelingOutcome, LabelError> {
    let mut outcome = LabelingOutcome {
        instance_id: instance.id.clone(),
        ..Default::default()
    };
    if ranked_chunks.is_empty() {
        return Ok(outcome);
    }
    let nll_without = baseline_nll(instance, backend, prompt_cfg)?;
    for (i, chunk) in ranked_chunks.iter().enumerate() {
        let rank = i + 1;
        match score_against_baseline(instance, chunk, nll_without, backend, prompt_cfg) {
            Ok(score) => outcome.labeled.push(LabeledChunk {
                chunk: chunk.clone(),
                label: classify(score, cfg),
                retrieval_rank: rank,
            }),
            Err(LabelError::LikelihoodUnavailable { source, .. }) => outcome.unavailable.push(UnavailableChunk {
                path: chunk.path.clone(),
                start_line: chunk.start_line,
                retrieval_rank: rank,
                reason: alloc::string::ToString::to_string(&source),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarityCounts {
    pub positive: usize,
    pub neutral: usize,
    pub negative: usize,
}

impl PolarityCounts {
    pub fn of(labeled: &[LabeledChunk]) -> Self {
        let mut c = Self::default();
        for l in labeled {
            c.add(l.polarity());
        }
        c
    }

    pub fn add(&mut self, p: Polarity) {
        match p {
            Polarity::Positive => self.positive += 1,
            Polarity::Neutral => self.neutral += 1,
            Polarity::Negative => self.negative += 1,
        }
    }

    pub fn get(&self, p: Polarity) -> usize {
        match p {
            Polarity::Positive => self.positive,
            Polarity::Neutral => self.neutral,
            Polarity::Negative => self.negative,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolarityHistogram {
    pub per_instance: Vec<(String, PolarityCounts)>,
    pub totals: PolarityCounts,
    /// `(polarity, chunks of that polarity in an instance)` -> instance count.
    pub buckets: BTreeMap<(Polarity, usize), usize>,
}

impl PolarityHistogram {
    pub fn instances_with(&self, polarity: Polarity, count: usize) -> usize {
        self.buckets.get(&(polarity, count)).copied().unwrap_or(0)
    }
}

pub fn polarity_distribution(outcomes: &[LabelingOutcome]) -> PolarityHistogram {
    let mut hist = PolarityHistogram::default();
    for o in outcomes {
        let counts = PolarityCounts::of(&o.labeled);
        for p in [Polarity::Positive, Polarity::Neutral, Polarity::Negative] {
            *hist.buckets.entry((p, counts.get(p))).or_default() += 1;
            for _ in 0..counts.get(p) {
                hist.totals.add(p);
            }
        }
        hist.per_instance.push((o.instance_id.clone(), counts));
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(s: f64) -> ContributionScore {
        ContributionScore {
            s,
            nll_without: 1.0,
            nll_with: 1.0 - s,
        }
    }

    #[test]
    fn forced_arithmetic() {
        let a = ContributionScore::from_nll(10.0, 8.0);
        assert!((a.s - 0.20).abs() < 1e-12);
        let b = ContributionScore::from_nll(10.0, 10.6);
        assert!((b.s + 0.06).abs() < 1e-12);
    }

    #[test]
    fn classification_boundaries() {
        let cfg = LabelerConfig::default();
        assert_eq!(classify(score(0.20), &cfg).value, Polarity::Positive);
        assert_eq!(classify(score(0.10), &cfg).value, Polarity::Neutral);
        assert_eq!(classify(score(-0.05), &cfg).value, Polarity::Neutral);
        assert_eq!(classify(score(-0.06), &cfg).value, Polarity::Negative);
        assert_eq!(classify(score(0.0), &cfg).value, Polarity::Neutral);
    }

    #[test]
    fn threshold_validation() {
        assert!(LabelerConfig::default().validate().is_ok());
        assert!(LabelerConfig { t_pos: -0.1, t_neg: -0.2 }.validate().is_err());
    }

    #[test]
    fn empty_histogram() {
        let h = polarity_distribution(&[]);
        assert!(h.buckets.is_empty());
        assert_eq!(h.totals, PolarityCounts::default());
    }
}
