//! Deterministic backends for tests, the synthetic corpus and offline runs.
//!
//! [`OverlapOracle`] models a generator whose target NLL falls as the prompt
//! covers more of the target's identifiers:
//!
//! ```text
//! nll = T * base_nll * (1 - gain * overlap + conflict_penalty * conflict)
//! ```
//!
//! where `T` is the target's fallback token count, `overlap` the fraction of
//! target identifiers present in the prompt's code lines and `conflict` the
//! fraction with a near-miss (same `_` stem, different identifier) there.
//! With `conflict_penalty = 0` a chunk's contribution score over an in-file
//! context disjoint from the target is exactly `gain * overlap`.
//!
//! [`ScriptedBackend`] answers from a fingerprint table first, then from
//! per-operation queues consumed in call order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::backend::{
    restricted_softmax, truncate_at_stop, BackendError, BackendRequest, Generator, LikelihoodQuery,
    SequenceLogprob, SignalDistribution, TokenCounter,
};
use crate::label::{classify, ContributionScore, LabelerConfig, Polarity};
use crate::prompt::{strip_scaffolding, PromptConfig};
use crate::tokens::{fallback_token_count, identifier_runs, identifier_set, stem, truncate_to_tokens, TokenSet};

/// Placeholder emitted for target identifiers the context never mentions.
pub const UNKNOWN_IDENT: &str = "__unk__";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapParams {
    /// NLL per target token with no helpful context, in nats.
    pub base_nll: f64,
    /// Helpfulness gain `g`.
    pub gain: f64,
    /// Penalty per unit of conflicting context.
    pub conflict_penalty: f64,
}

impl Default for OverlapParams {
    fn default() -> Self {
        Self {
            base_nll: 2.0,
            gain: 0.5,
            conflict_penalty: 0.0,
        }
    }
}

/// Ties a prompt to a ground truth. `anchor` is the instance's last prefix
/// line; the first entry whose anchor ends the left context of a prompt
/// decides which target the oracle knows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub anchor: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapOracle {
    pub params: OverlapParams,
    pub layout: PromptConfig,
    /// Thresholds the simulated policy applies to judge a pending chunk.
    pub judge: LabelerConfig,
    /// Probability mass on the preferred polarity token.
    pub confidence: f64,
    pub entries: Vec<OracleEntry>,
}

impl Default for OverlapOracle {
    fn default() -> Self {
        Self::new(OverlapParams::default())
    }
}

/// Overlap statistics of a target against a context token set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub overlap: f64,
    pub conflict: f64,
}

pub fn coverage(target_ids: &TokenSet, context: &TokenSet) -> Coverage {
    if target_ids.is_empty() {
        return Coverage {
            overlap: 0.0,
            conflict: 0.0,
        };
    }
    let n = target_ids.len() as f64;
    let covered = target_ids.iter().filter(|t| context.contains(*t)).count();
    let conflicted = target_ids
        .iter()
        .filter(|t| first_conflict(t, target_ids, context).is_some())
        .count();
    Coverage {
        overlap: covered as f64 / n,
        conflict: conflicted as f64 / n,
    }
}

/// Smallest context identifier that shares `token`'s stem without being a
/// target identifier.
fn first_conflict<'a>(token: &str, target_ids: &TokenSet, context: &'a TokenSet) -> Option<&'a str> {
    let s = stem(token)?;
    context
        .iter()
        .map(String::as_str)
        .find(|c| !target_ids.contains(*c) && stem(c) == Some(s))
}

impl OverlapOracle {
    pub fn new(params: OverlapParams) -> Self {
        Self {
            params,
            layout: PromptConfig::default(),
            judge: LabelerConfig::default(),
            confidence: 0.8,
            entries: Vec::new(),
        }
    }

    pub fn with_entries(mut self, entries: Vec<OracleEntry>) -> Self {
        self.entries = entries;
        self
    }

    pub fn with_layout(mut self, layout: PromptConfig) -> Self {
        self.layout = layout;
        self
    }

    pub fn context_tokens(&self, prompt: &str) -> TokenSet {
        identifier_set(&strip_scaffolding(prompt, &self.layout))
    }

    /// Target NLL under `prompt`, in nats.
    pub fn nll(&self, prompt: &str, target: &str) -> f64 {
        let t = fallback_token_count(target) as f64;
        let cov = coverage(&identifier_set(target), &self.context_tokens(prompt));
        let p = &self.params;
        t * p.base_nll * (1.0 - p.gain * cov.overlap + p.conflict_penalty * cov.conflict)
    }

    /// Target of the entry whose anchor is the last left-context line.
    fn target_for(&self, prompt: &str) -> Option<&str> {
        let cut = prompt.rfind(self.layout.markers.suffix.as_str())?;
        let left = prompt[..cut].strip_suffix('\n')?;
        self.entries
            .iter()
            .find(|e| {
                let a = e.anchor.as_str();
                !a.is_empty() && left.ends_with(a) && (left.len() == a.len() || left[..left.len() - a.len()].ends_with('\n'))
            })
            .map(|e| e.target.as_str())
    }

    fn polarity_of_pending(&self, prompt: &str, target: &str) -> Polarity {
        let mc = self.layout.signals.mc.as_str();
        let Some(cut) = prompt.rfind(mc) else {
            return Polarity::Neutral;
        };
        let without = self.nll(&prompt[..cut], target);
        if without < crate::label::MIN_BASELINE_NLL {
            return Polarity::Neutral;
        }
        let with = self.nll(prompt, target);
        classify(ContributionScore::from_nll(without, with), &self.judge).value
    }

    /// What a context-copying generator would write for `target`.
    pub fn imitate(&self, prompt: &str, target: &str) -> String {
        let context = self.context_tokens(prompt);
        let target_ids = identifier_set(target);
        let mut out = String::with_capacity(target.len());
        let mut rest = target;
        for ident in identifier_runs(target) {
            let at = rest.find(ident).expect("identifier comes from target");
            out.push_str(&rest[..at]);
            let replacement = if let Some(decoy) = first_conflict(ident, &target_ids, &context) {
                decoy
            } else if context.contains(ident) {
                ident
            } else {
                UNKNOWN_IDENT
            };
            out.push_str(replacement);
            rest = &rest[at + ident.len()..];
        }
        out.push_str(rest);
        out
    }
}

impl TokenCounter for OverlapOracle {
    fn count_tokens(&self, text: &str) -> usize {
        fallback_token_count(text)
    }
}

impl Generator for OverlapOracle {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        let t = fallback_token_count(&query.target);
        if t == 0 {
            return Err(BackendError::LikelihoodUnavailable("empty target".into()));
        }
        let per = -self.nll(&query.prompt, &query.target) / t as f64;
        Ok(SequenceLogprob::from_tokens(vec![per; t]))
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        if candidates.is_empty() {
            return Err(BackendError::SignalUnavailable("no candidates".into()));
        }
        let signals = &self.layout.signals;
        let uniform = || {
            let p = 1.0 / candidates.len() as f64;
            SignalDistribution {
                probabilities: candidates.iter().map(|c| (c.clone(), p)).collect(),
            }
        };
        let Some(target) = self.target_for(prompt) else {
            return Ok(uniform());
        };
        let mut probs: BTreeMap<String, f64> = candidates.iter().map(|c| (c.clone(), 0.0)).collect();
        if candidates.contains(&signals.mc) {
            let cov = coverage(&identifier_set(target), &self.context_tokens(prompt));
            let p_mc = (1.0 - cov.overlap).clamp(0.0, 1.0);
            probs.insert(signals.mc.clone(), p_mc);
            if candidates.contains(&signals.ec) {
                probs.insert(signals.ec.clone(), 1.0 - p_mc);
            } else {
                probs.insert(signals.mc.clone(), 1.0);
            }
        } else if candidates.contains(&signals.pos) {
            let chosen = signals.polarity_token(self.polarity_of_pending(prompt, target));
            let present: Vec<&String> = candidates.iter().filter(|c| signals.polarity_set().contains(c)).collect();
            if !present.iter().any(|c| c.as_str() == chosen) {
                return Ok(uniform());
            }
            let rest = (1.0 - self.confidence) / (present.len().max(2) - 1) as f64;
            for c in present {
                probs.insert(c.clone(), if c == chosen { self.confidence } else { rest });
            }
        } else {
            return Ok(uniform());
        }
        let dist = SignalDistribution { probabilities: probs };
        // renormalize away rounding
        let z = dist.sum();
        Ok(SignalDistribution {
            probabilities: dist.probabilities.into_iter().map(|(k, v)| (k, v / z)).collect(),
        })
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        let text = match self.target_for(prompt) {
            Some(target) => self.imitate(prompt, target),
            None => String::new(),
        };
        let text = truncate_to_tokens(&text, max_tokens);
        Ok(truncate_at_stop(text, stop).to_string())
    }
}

/// One scripted answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ScriptedResponse {
    /// Total log-probability (single pseudo-token).
    Logprob(f64),
    /// Probabilities returned verbatim (validated against the candidates).
    Distribution(Vec<(String, f64)>),
    /// Raw log-scores, softmaxed over the candidates.
    Scores(Vec<(String, f64)>),
    Text(String),
    Unavailable(String),
}

/// Backend that replays hand-written answers.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_fingerprint: BTreeMap<u64, ScriptedResponse>,
    logprobs: Vec<ScriptedResponse>,
    signals: Vec<ScriptedResponse>,
    completions: Vec<ScriptedResponse>,
    logprob_cursor: AtomicUsize,
    signal_cursor: AtomicUsize,
    completion_cursor: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(mut self, request: &BackendRequest, response: ScriptedResponse) -> Self {
        self.by_fingerprint.insert(request.fingerprint(), response);
        self
    }

    pub fn on_fingerprint(mut self, fingerprint: u64, response: ScriptedResponse) -> Self {
        self.by_fingerprint.insert(fingerprint, response);
        self
    }

    pub fn then_logprob(mut self, r: ScriptedResponse) -> Self {
        self.logprobs.push(r);
        self
    }

    pub fn then_signal(mut self, r: ScriptedResponse) -> Self {
        self.signals.push(r);
        self
    }

    /// Convenience for `then_signal(Distribution(..))`.
    pub fn then_probs(self, pairs: &[(&str, f64)]) -> Self {
        self.then_signal(ScriptedResponse::Distribution(
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        ))
    }

    pub fn then_text(mut self, text: impl Into<String>) -> Self {
        self.completions.push(ScriptedResponse::Text(text.into()));
        self
    }

    pub fn then_completion(mut self, r: ScriptedResponse) -> Self {
        self.completions.push(r);
        self
    }

    /// Number of queued answers consumed so far, per operation.
    pub fn consumed(&self) -> (usize, usize, usize) {
        (
            self.logprob_cursor.load(Ordering::SeqCst),
            self.signal_cursor.load(Ordering::SeqCst),
            self.completion_cursor.load(Ordering::SeqCst),
        )
    }

    fn lookup(&self, request: &BackendRequest) -> Option<ScriptedResponse> {
        if let Some(r) = self.by_fingerprint.get(&request.fingerprint()) {
            return Some(r.clone());
        }
        let (queue, cursor) = match request {
            BackendRequest::Logprob { .. } => (&self.logprobs, &self.logprob_cursor),
            BackendRequest::Signal { .. } => (&self.signals, &self.signal_cursor),
            BackendRequest::Complete { .. } => (&self.completions, &self.completion_cursor),
            BackendRequest::CountTokens { .. } => return None,
        };
        let i = cursor.fetch_add(1, Ordering::SeqCst);
        queue.get(i).cloned()
    }
}

impl TokenCounter for ScriptedBackend {
    fn count_tokens(&self, text: &str) -> usize {
        fallback_token_count(text)
    }
}

impl Generator for ScriptedBackend {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        let req = BackendRequest::Logprob {
            prompt: query.prompt.clone(),
            target: query.target.clone(),
        };
        match self.lookup(&req) {
            Some(ScriptedResponse::Logprob(v)) if v <= 0.0 => Ok(SequenceLogprob::from_tokens(vec![v])),
            Some(ScriptedResponse::Unavailable(why)) => Err(BackendError::LikelihoodUnavailable(why)),
            Some(other) => Err(BackendError::LikelihoodUnavailable(alloc::format!("unexpected script entry {other:?}"))),
            None => Err(BackendError::LikelihoodUnavailable("script exhausted".into())),
        }
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        let req = BackendRequest::Signal {
            prompt: prompt.to_string(),
            candidates: candidates.to_vec(),
        };
        match self.lookup(&req) {
            Some(ScriptedResponse::Distribution(pairs)) => SignalDistribution::checked(candidates, &pairs),
            Some(ScriptedResponse::Scores(pairs)) => {
                let scores: Vec<f64> = candidates
                    .iter()
                    .map(|c| {
                        pairs
                            .iter()
                            .find(|(k, _)| k == c)
                            .map_or(f64::NEG_INFINITY, |(_, v)| *v)
                    })
                    .collect();
                restricted_softmax(candidates, &scores)
            }
            Some(ScriptedResponse::Unavailable(why)) => Err(BackendError::SignalUnavailable(why)),
            Some(other) => Err(BackendError::SignalUnavailable(alloc::format!("unexpected script entry {other:?}"))),
            None => Err(BackendError::SignalUnavailable("script exhausted".into())),
        }
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        let req = BackendRequest::Complete {
            prompt: prompt.to_string(),
            max_tokens,
            stop: stop.to_vec(),
        };
        match self.lookup(&req) {
            Some(ScriptedResponse::Text(t)) => {
                let t = truncate_to_tokens(&t, max_tokens);
                Ok(truncate_at_stop(t, stop).to_string())
            }
            Some(ScriptedResponse::Unavailable(why)) => Err(BackendError::CompletionUnavailable(why)),
            Some(other) => Err(BackendError::CompletionUnavailable(alloc::format!("unexpected script entry {other:?}"))),
            None => Err(BackendError::CompletionUnavailable("script exhausted".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(prompt: &str, target: &str) -> LikelihoodQuery {
        LikelihoodQuery {
            prompt: prompt.into(),
            target: target.into(),
        }
    }

    #[test]
    fn zero_overlap_five_tokens() {
        let o = OverlapOracle::default();
        let lp = o.sequence_logprob(&q("<PREFIX>zzz\n<SUFFIX><MIDDLE>", "a b c d e")).unwrap();
        assert_eq!(lp.total, -10.0);
        assert_eq!(lp.per_token.len(), 5);
    }

    #[test]
    fn full_overlap_halves_nll() {
        let o = OverlapOracle::default();
        let lp = o.sequence_logprob(&q("<PREFIX>a b c d e\n<SUFFIX><MIDDLE>", "a b c d e")).unwrap();
        assert_eq!(lp.total, -5.0);
    }

    #[test]
    fn conflicts_raise_nll() {
        let mut p = OverlapParams::default();
        p.conflict_penalty = 0.5;
        let o = OverlapOracle::new(p);
        let base = o.nll("", "run_job_new(x)");
        let misled = o.nll("run_job_old", "run_job_new(x)");
        assert!(misled > base);
    }

    #[test]
    fn imitate_substitutes() {
        let o = OverlapOracle::default();
        let out = o.imitate("alpha = 1\nfetch_v_old(alpha)", "res = fetch_v_new(alpha)");
        assert_eq!(out, "__unk__ = fetch_v_old(alpha)");
        assert_eq!(o.imitate("res fetch_v_new alpha", "res = fetch_v_new(alpha)"), "res = fetch_v_new(alpha)");
    }

    #[test]
    fn scripted_echo() {
        let b = ScriptedBackend::new()
            .then_logprob(ScriptedResponse::Logprob(-3.2))
            .then_probs(&[("<EC>", 0.7), ("<MC>", 0.3)])
            .then_text("x = 1\n");
        assert_eq!(b.sequence_logprob(&q("p", "t")).unwrap().total, -3.2);
        let d = b
            .next_token_distribution("p", &["<EC>".to_string(), "<MC>".to_string()])
            .unwrap();
        assert_eq!(d.get("<EC>"), 0.7);
        assert!((d.sum() - 1.0).abs() < 1e-9);
        assert_eq!(b.complete("p", 100, &["\n\n".to_string()]).unwrap(), "x = 1\n");
        assert!(b.complete("p", 100, &[]).is_err());
    }

    #[test]
    fn scripted_fingerprint_wins() {
        let req = BackendRequest::Complete {
            prompt: "hello".into(),
            max_tokens: 5,
            stop: vec![],
        };
        let b = ScriptedBackend::new()
            .on(&req, ScriptedResponse::Text("fp".into()))
            .then_text("queued");
        assert_eq!(b.complete("hello", 5, &[]).unwrap(), "fp");
        assert_eq!(b.complete("other", 5, &[]).unwrap(), "queued");
    }

    #[test]
    fn stop_and_max_tokens() {
        let b = ScriptedBackend::new().then_text("a = 1\n\nb = 2").then_text("a = 1");
        assert_eq!(b.complete("p", 50, &["\n\n".to_string()]).unwrap(), "a = 1");
        assert_eq!(b.complete("p", 0, &[]).unwrap(), "");
    }
}
