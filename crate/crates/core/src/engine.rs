//! Filter-then-generate inference.
//!
//! The policy first decides whether the in-file context suffices (`<EC>`) or
//! more context is needed (`<MC>`). On `<MC>` the retrieved candidates are
//! judged one at a time in rank order. A `<pos>` chunk is kept and the
//! sufficiency decision is taken again; the loop ends on `<EC>` or when the
//! candidates run out. Rejected chunks are removed from the policy sequence
//! before the next judgment unless `keep_judged_inline` is set.
//!
//! Generation always uses the export layout built from the kept chunks, so
//! [`export_filtered_prompt`] and [`run`] produce the same prompt.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Generator, SignalDistribution};
use crate::chunk::{CodeChunk, Retriever};
use crate::corpus::CompletionInstance;
use crate::label::Polarity;
use crate::prompt::{assemble_prompt, PromptChunk, PromptConfig, PromptError, PromptMode, PromptPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// `<MC>` is chosen when its probability is at least `t_c`.
    pub t_c: f64,
    pub t_p: f64,
    pub t_n: f64,
    pub prompt: PromptConfig,
    pub top_k: usize,
    pub max_generation_tokens: usize,
    pub stop_sequences: Vec<String>,
    /// Answer `<MC>` when the sufficiency distribution is unavailable.
    pub retrieve_on_unavailable: bool,
    /// Judgment assumed when the polarity distribution is unavailable.
    pub unavailable_polarity: Polarity,
    /// Leave judged non-positive chunks, with their polarity token, in the
    /// policy sequence.
    pub keep_judged_inline: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            t_c: 0.3,
            t_p: 0.3,
            t_n: 0.3,
            prompt: PromptConfig::default(),
            top_k: 10,
            max_generation_tokens: 128,
            stop_sequences: vec!["\n\n".to_string()],
            retrieve_on_unavailable: true,
            unavailable_polarity: Polarity::Neutral,
            keep_judged_inline: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        for (name, t) in [("t_c", self.t_c), ("t_p", self.t_p), ("t_n", self.t_n)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(EngineError::BadConfig(alloc::format!("{name} = {t} is outside [0, 1]")));
            }
        }
        self.prompt.budget.validate()?;
        self.prompt.signals.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("instance {instance_id}: {source}")]
    Completion {
        instance_id: String,
        #[source]
        source: BackendError,
    },
    #[error("invalid engine config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum DecisionKind {
    /// Sufficiency of the in-file context alone.
    Initial,
    /// Polarity of the candidate with this retrieval rank.
    Judge { rank: usize },
    /// Sufficiency after keeping the candidate with this rank.
    Reassess { after_rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: DecisionKind,
    /// `None` when the backend could not provide a distribution.
    pub distribution: Option<SignalDistribution>,
    pub chosen: String,
    /// Why the fallback was used, if it was.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    InitialEC,
    SufficientAfterChunk,
    CandidatesExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedChunk {
    pub chunk: CodeChunk,
    pub retrieval_rank: usize,
    pub retrieval_score: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineTrace {
    pub decisions: Vec<Decision>,
    pub judged: Vec<JudgedChunk>,
    /// The `<pos>` subset of `judged`, in judgment order.
    pub kept_chunks: Vec<JudgedChunk>,
    pub stopped_reason: StopReason,
    /// Ranks of candidates skipped because they did not fit the cross-file
    /// budget next to the chunks already in the policy sequence.
    pub skipped_over_budget: Vec<usize>,
}

impl EngineTrace {
    pub fn signal_tokens_generated(&self) -> usize {
        self.decisions.len()
    }

    pub fn kept_ranks(&self) -> Vec<usize> {
        self.kept_chunks.iter().map(|k| k.retrieval_rank).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredPrompt {
    pub instance_id: String,
    pub prompt: PromptPlan,
    pub trace: EngineTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub instance_id: String,
    pub generated: String,
    pub trace: EngineTrace,
    pub prompt: PromptPlan,
}

fn query_signal<G: Generator + ?Sized>(
    backend: &G,
    prompt: &str,
    candidates: &[String],
) -> (Option<SignalDistribution>, Option<String>) {
    match backend.next_token_distribution(prompt, candidates) {
        Ok(d) => (Some(d), None),
        Err(e) => (None, Some(e.to_string())),
    }
}

/// Sufficiency decision over `{<EC>, <MC>}`.
pub fn decide_retrieval<G: Generator + ?Sized>(
    prompt: &PromptPlan,
    backend: &G,
    cfg: &EngineConfig,
    kind: DecisionKind,
) -> Decision {
    let s = &cfg.prompt.signals;
    let (distribution, fallback) = query_signal(backend, &prompt.text(), &s.adaptive());
    let more = match &distribution {
        Some(d) => d.get(&s.mc) >= cfg.t_c,
        None => cfg.retrieve_on_unavailable,
    };
    Decision {
        kind,
        distribution,
        chosen: if more { s.mc.clone() } else { s.ec.clone() },
        fallback,
    }
}

/// Polarity decision for the pending chunk at the end of `prompt`; `<pos>`
/// wins whenever it meets its threshold.
pub fn judge_chunk<G: Generator + ?Sized>(
    prompt: &PromptPlan,
    backend: &G,
    cfg: &EngineConfig,
    rank: usize,
) -> (Decision, Polarity) {
    let s = &cfg.prompt.signals;
    let (distribution, fallback) = query_signal(backend, &prompt.text(), &s.polarity_set());
    let polarity = match &distribution {
        Some(d) if d.get(&s.pos) >= cfg.t_p => Polarity::Positive,
        Some(d) if d.get(&s.neg) >= cfg.t_n => Polarity::Negative,
        Some(_) => Polarity::Neutral,
        None => cfg.unavailable_polarity,
    };
    let decision = Decision {
        kind: DecisionKind::Judge { rank },
        distribution,
        chosen: s.polarity_token(polarity).to_string(),
        fallback,
    };
    (decision, polarity)
}

fn policy_chunks<'a>(inline: &'a [JudgedChunk], pending: Option<(&'a CodeChunk, usize)>) -> Vec<PromptChunk<'a>> {
    inline
        .iter()
        .map(|j| PromptChunk {
            chunk: &j.chunk,
            rank: j.retrieval_rank,
            polarity: Some(j.polarity),
        })
        .chain(pending.map(|(chunk, rank)| PromptChunk {
            chunk,
            rank,
            polarity: None,
        }))
        .collect()
}

/// Runs the filtering policy and assembles the generation prompt from the
/// kept chunks, without generating.
pub fn export_filtered_prompt<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    retriever: &dyn Retriever,
    backend: &G,
    cfg: &EngineConfig,
) -> Result<FilteredPrompt, EngineError> {
    cfg.validate()?;
    let mc = cfg.prompt.signals.mc.as_str();
    let mut decisions = Vec::new();
    let mut judged: Vec<JudgedChunk> = Vec::new();
    let mut kept: Vec<JudgedChunk> = Vec::new();
    // chunks currently visible in the policy sequence
    let mut inline: Vec<JudgedChunk> = Vec::new();
    let mut skipped_over_budget = Vec::new();

    let initial_plan = assemble_prompt(instance, &[], &cfg.prompt, PromptMode::Inference, &backend)?;
    let initial = decide_retrieval(&initial_plan, backend, cfg, DecisionKind::Initial);
    let retrieve = initial.chosen == mc;
    decisions.push(initial);

    let stopped_reason = if !retrieve {
        StopReason::InitialEC
    } else {
        let candidates = retriever.retrieve(&instance.prefix_lines, cfg.top_k);
        let mut reason = StopReason::CandidatesExhausted;
        for (i, scored) in candidates.ranked.iter().enumerate() {
            let rank = i + 1;
            let offered = policy_chunks(&inline, Some((&scored.chunk, rank)));
            let plan = assemble_prompt(instance, &offered, &cfg.prompt, PromptMode::Inference, &backend)?;
            if !plan.includes_rank(rank) {
                skipped_over_budget.push(rank);
                continue;
            }
            let (decision, polarity) = judge_chunk(&plan, backend, cfg, rank);
            decisions.push(decision);
            let record = JudgedChunk {
                chunk: scored.chunk.clone(),
                retrieval_rank: rank,
                retrieval_score: scored.score,
                polarity,
            };
            judged.push(record.clone());
            if polarity == Polarity::Positive {
                kept.push(record.clone());
                inline.push(record);
                let offered = policy_chunks(&inline, None);
                let plan = assemble_prompt(instance, &offered, &cfg.prompt, PromptMode::Inference, &backend)?;
                let again = decide_retrieval(&plan, backend, cfg, DecisionKind::Reassess { after_rank: rank });
                let more = again.chosen == mc;
                decisions.push(again);
                if !more {
                    reason = StopReason::SufficientAfterChunk;
                    break;
                }
            } else if cfg.keep_judged_inline {
                inline.push(record);
            }
        }
        reason
    };

    let final_chunks: Vec<PromptChunk<'_>> = kept
        .iter()
        .map(|k| PromptChunk {
            chunk: &k.chunk,
            rank: k.retrieval_rank,
            polarity: None,
        })
        .collect();
    let prompt = assemble_prompt(instance, &final_chunks, &cfg.prompt, PromptMode::Export, &backend)?;
    Ok(FilteredPrompt {
        instance_id: instance.id.clone(),
        prompt,
        trace: EngineTrace {
            decisions,
            judged,
            kept_chunks: kept,
            stopped_reason,
            skipped_over_budget,
        },
    })
}

/// Filters, then completes from exactly the exported prompt.
pub fn run<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    retriever: &dyn Retriever,
    backend: &G,
    cfg: &EngineConfig,
) -> Result<CompletionResult, EngineError> {
    let filtered = export_filtered_prompt(instance, retriever, backend, cfg)?;
    let generated = generate(instance, &filtered.prompt, backend, cfg)?;
    Ok(CompletionResult {
        instance_id: filtered.instance_id,
        generated,
        trace: filtered.trace,
        prompt: filtered.prompt,
    })
}

/// Completes `plan` with the configured length and stop sequences.
pub fn generate<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    plan: &PromptPlan,
    backend: &G,
    cfg: &EngineConfig,
) -> Result<String, EngineError> {
    backend
        .complete(&plan.text(), cfg.max_generation_tokens, &cfg.stop_sequences)
        .map_err(|source| EngineError::Completion {
            instance_id: instance.id.clone(),
            source,
        })
}
