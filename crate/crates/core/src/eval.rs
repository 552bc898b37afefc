//! Strategy comparison: per-instance rows, aggregates and length statistics.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Generator;
use crate::chunk::{CrossFileIndex, Retriever};
use crate::corpus::CompletionInstance;
use crate::engine::{self, EngineConfig};
use crate::label::{LabelingOutcome, Polarity};
use crate::metrics::{edit_similarity, exact_match};
use crate::prompt::{assemble_prompt, PromptChunk, PromptMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    NoRetrieve,
    FullRetrieve,
    Filtered,
    /// Generation from prompts produced elsewhere (e.g. exported filtered
    /// prompts fed to another model).
    ExternalPromptReplay,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::NoRetrieve => "none",
            StrategyKind::FullRetrieve => "full",
            StrategyKind::Filtered => "filter",
            StrategyKind::ExternalPromptReplay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "no_retrieve" => Some(StrategyKind::NoRetrieve),
            "full" | "full_retrieve" => Some(StrategyKind::FullRetrieve),
            "filter" | "filtered" => Some(StrategyKind::Filtered),
            "replay" | "external" => Some(StrategyKind::ExternalPromptReplay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub engine: EngineConfig,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub strategy: StrategyKind,
    pub em: bool,
    pub es: f64,
    pub cross_file_tokens: usize,
    pub signal_tokens_generated: usize,
    pub generated: String,
    pub error: Option<String>,
}

impl EvalRow {
    fn failed(id: &str, strategy: StrategyKind, error: String) -> Self {
        Self {
            id: id.to_string(),
            strategy,
            em: false,
            es: 0.0,
            cross_file_tokens: 0,
            signal_tokens_generated: 0,
            generated: String::new(),
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scored: usize,
    pub failed: usize,
    pub em_pct: f64,
    pub es_mean_pct: f64,
    pub mean_cross_file_tokens: f64,
    pub mean_signal_tokens: f64,
}

impl Aggregates {
    /// Means over rows without an error; failed rows are only counted.
    pub fn of(rows: &[EvalRow]) -> Self {
        let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let failed = rows.len() - ok.len();
        if ok.is_empty() {
            return Self {
                failed,
                ..Self::default()
            };
        }
        let n = ok.len() as f64;
        Self {
            scored: ok.len(),
            failed,
            em_pct: 100.0 * ok.iter().filter(|r| r.em).count() as f64 / n,
            es_mean_pct: 100.0 * ok.iter().map(|r| r.es).sum::<f64>() / n,
            mean_cross_file_tokens: ok.iter().map(|r| r.cross_file_tokens as f64).sum::<f64>() / n,
            mean_signal_tokens: ok.iter().map(|r| r.signal_tokens_generated as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: StrategyKind,
    pub rows: Vec<EvalRow>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    /// Sorts rows by instance id, then aggregates.
    pub fn from_rows(strategy: StrategyKind, mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let aggregates = Aggregates::of(&rows);
        Self {
            strategy,
            rows,
            aggregates,
        }
    }

    /// Report restricted to the given instance ids.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Self {
        Self::from_rows(
            self.strategy,
            self.rows.iter().filter(|r| ids.contains(&r.id)).cloned().collect(),
        )
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }
}

/// Produces the retriever used for one instance, typically an index view
/// that excludes the instance's own file.
pub trait RetrieverSource {
    fn retriever_for<'a>(&'a self, instance: &'a CompletionInstance) -> Box<dyn Retriever + 'a>;
}

pub struct IndexRetrieval<'a> {
    pub index: &'a CrossFileIndex,
    pub query_window: usize,
}

impl RetrieverSource for IndexRetrieval<'_> {
    fn retriever_for<'a>(&'a self, instance: &'a CompletionInstance) -> Box<dyn Retriever + 'a> {
        Box::new(self.index.excluding(&instance.target_path, self.query_window))
    }
}

fn score(instance: &CompletionInstance, strategy: StrategyKind, generated: String, cross: usize, signals: usize) -> EvalRow {
    let reference = instance.target_text();
    EvalRow {
        id: instance.id.clone(),
        strategy,
        em: exact_match(&generated, &reference),
        es: edit_similarity(&generated, &reference),
        cross_file_tokens: cross,
        signal_tokens_generated: signals,
        generated,
        error: None,
    }
}

/// Evaluates one instance. `external_prompt` is required for
/// [`StrategyKind::ExternalPromptReplay`] and ignored otherwise.
pub fn evaluate_instance<G: Generator + ?Sized>(
    instance: &CompletionInstance,
    retriever: &dyn Retriever,
    backend: &G,
    spec: &StrategySpec,
    external_prompt: Option<&str>,
) -> EvalRow {
    let cfg = &spec.engine;
    let fail = |e: String| EvalRow::failed(&instance.id, spec.kind, e);
    match spec.kind {
        StrategyKind::NoRetrieve | StrategyKind::FullRetrieve => {
            let ranked = if spec.kind == StrategyKind::FullRetrieve {
                retriever.retrieve(&instance.prefix_lines, cfg.top_k).ranked
            } else {
                Vec::new()
            };
            let offered: Vec<PromptChunk<'_>> = ranked
                .iter()
                .enumerate()
                .map(|(i, s)| PromptChunk {
                    chunk: &s.chunk,
                    rank: i + 1,
                    polarity: None,
                })
                .collect();
            let plan = match assemble_prompt(instance, &offered, &cfg.prompt, PromptMode::Export, &backend) {
                Ok(p) => p,
                Err(e) => return fail(e.to_string()),
            };
            match engine::generate(instance, &plan, backend, cfg) {
                Ok(g) => score(instance, spec.kind, g, plan.token_counts.cross_file, 0),
                Err(e) => fail(e.to_string()),
            }
        }
        StrategyKind::Filtered => match engine::run(instance, retriever, backend, cfg) {
            Ok(r) => score(
                instance,
                spec.kind,
                r.generated,
                r.prompt.token_counts.cross_file,
                r.trace.signal_tokens_generated(),
            ),
            Err(e) => fail(e.to_string()),
        },
        StrategyKind::ExternalPromptReplay => {
            let Some(prompt) = external_prompt else {
                return fail("no external prompt for instance".into());
            };
            let cross_text = prompt
                .find(cfg.prompt.markers.prefix.as_str())
                .map_or("", |at| &prompt[..at]);
            let cross = backend.count_tokens(cross_text);
            match backend.complete(prompt, cfg.max_generation_tokens, &cfg.stop_sequences) {
                Ok(g) => score(instance, spec.kind, g, cross, 0),
                Err(e) => fail(e.to_string()),
            }
        }
    }
}

/// Sequential strategy run; see the `ctxfilter` crate for a parallel one.
pub fn run_strategy<G: Generator + ?Sized>(
    instances: &[CompletionInstance],
    retrievers: &dyn RetrieverSource,
    backend: &G,
    spec: &StrategySpec,
) -> EvalReport {
    let rows = instances
        .iter()
        .map(|inst| {
            let retriever = retrievers.retriever_for(inst);
            evaluate_instance(inst, retriever.as_ref(), backend, spec, None)
        })
        .collect();
    EvalReport::from_rows(spec.kind, rows)
}

/// Ids of instances with at least one negative chunk.
pub fn negative_subset(outcomes: &[LabelingOutcome]) -> BTreeSet<String> {
    outcomes
        .iter()
        .filter(|o| o.labeled.iter().any(|l| l.polarity() == Polarity::Negative))
        .map(|o| o.instance_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("reports cover different instance sets ({0:?} vs {1:?})")]
    MismatchedInstances(StrategyKind, StrategyKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub means: Vec<(StrategyKind, f64)>,
    /// Filtered mean over full-retrieve mean, when both are present and the
    /// latter is non-zero.
    pub filtered_over_full: Option<f64>,
}

pub fn length_report(reports: &[EvalReport]) -> Result<LengthReport, EvalError> {
    if let Some(first) = reports.first() {
        let ids = first.ids();
        if let Some(other) = reports.iter().find(|r| r.ids() != ids) {
            return Err(EvalError::MismatchedInstances(first.strategy, other.strategy));
        }
    }
    let means: Vec<(StrategyKind, f64)> = reports
        .iter()
        .map(|r| (r.strategy, r.aggregates.mean_cross_file_tokens))
        .collect();
    let mean_of = |k| means.iter().find(|(s, _)| *s == k).map(|(_, m)| *m);
    let filtered_over_full = match (mean_of(StrategyKind::Filtered), mean_of(StrategyKind::FullRetrieve)) {
        (Some(f), Some(full)) if full > 0.0 => Some(f / full),
        _ => None,
    };
    Ok(LengthReport {
        means,
        filtered_over_full,
    })
}
