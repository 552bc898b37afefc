//! Code-model backend abstraction.
//!
//! A [`Generator`] exposes the four capabilities the pipeline needs: token
//! counting, target log-likelihood under a prompt, a next-token distribution
//! restricted to a candidate set, and greedy completion.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::fallback_token_count;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reason")]
pub enum BackendError {
    #[error("likelihood unavailable: {0}")]
    LikelihoodUnavailable(String),
    #[error("signal distribution unavailable: {0}")]
    SignalUnavailable(String),
    #[error("completion unavailable: {0}")]
    CompletionUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikelihoodQuery {
    pub prompt: String,
    pub target: String,
}

/// Log-probability of a target sequence, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLogprob {
    pub total: f64,
    pub per_token: Vec<f64>,
}

impl SequenceLogprob {
    /// Builds from per-token values; `total` is their sum.
    pub fn from_tokens(per_token: Vec<f64>) -> Self {
        Self {
            total: per_token.iter().sum(),
            per_token,
        }
    }

    /// Negative log-likelihood (>= 0).
    pub fn nll(&self) -> f64 {
        -self.total
    }
}

/// Probabilities over exactly the requested candidate tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDistribution {
    pub probabilities: BTreeMap<String, f64>,
}

impl SignalDistribution {
    pub fn get(&self, token: &str) -> f64 {
        self.probabilities.get(token).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.probabilities.values().sum()
    }

    /// Accepts a distribution only if its keys are exactly `candidates` and it
    /// sums to one within 1e-9.
    pub fn checked(candidates: &[String], pairs: &[(String, f64)]) -> Result<Self, BackendError> {
        let probabilities: BTreeMap<String, f64> = pairs.iter().cloned().collect();
        let keys_match = probabilities.len() == candidates.len()
            && candidates.iter().all(|c| probabilities.contains_key(c));
        if !keys_match {
            return Err(BackendError::SignalUnavailable("candidate set mismatch".into()));
        }
        if probabilities.values().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(BackendError::SignalUnavailable("probability out of range".into()));
        }
        let dist = Self { probabilities };
        if (dist.sum() - 1.0).abs() > 1e-9 {
            return Err(BackendError::SignalUnavailable("distribution does not sum to 1".into()));
        }
        Ok(dist)
    }
}

/// Softmax over raw scores (logits or log-probabilities), one per candidate.
///
/// Scores of `-inf` get probability zero; at least one must be finite.
pub fn restricted_softmax(candidates: &[String], scores: &[f64]) -> Result<SignalDistribution, BackendError> {
    if candidates.is_empty() || candidates.len() != scores.len() {
        return Err(BackendError::SignalUnavailable("candidate/score length mismatch".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(BackendError::SignalUnavailable("no finite candidate score".into()));
    }
    let exps: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
    let z: f64 = exps.iter().sum();
    let probabilities = candidates
        .iter()
        .cloned()
        .zip(exps.iter().map(|e| e / z))
        .collect();
    Ok(SignalDistribution { probabilities })
}

/// Text before the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> usize;

    /// True when counting never leaves the process.
    fn counts_locally(&self) -> bool {
        true
    }
}

/// Punctuation-aware whitespace splitter used when no tokenizer is available.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackCounter;

impl TokenCounter for FallbackCounter {
    fn count_tokens(&self, text: &str) -> usize {
        fallback_token_count(text)
    }
}

pub trait Generator: TokenCounter {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError>;

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError>;

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError>;
}

impl<T: TokenCounter + ?Sized> TokenCounter for &T {
    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }

    fn counts_locally(&self) -> bool {
        (**self).counts_locally()
    }
}

impl<T: Generator + ?Sized> Generator for &T {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        (**self).sequence_logprob(query)
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        (**self).next_token_distribution(prompt, candidates)
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        (**self).complete(prompt, max_tokens, stop)
    }
}

impl<T: TokenCounter + ?Sized> TokenCounter for alloc::boxed::Box<T> {
    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }

    fn counts_locally(&self) -> bool {
        (**self).counts_locally()
    }
}

impl<T: Generator + ?Sized> Generator for alloc::boxed::Box<T> {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        (**self).sequence_logprob(query)
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        (**self).next_token_distribution(prompt, candidates)
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        (**self).complete(prompt, max_tokens, stop)
    }
}

/// A backend call, in a form that can be logged and replayed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BackendRequest {
    CountTokens { text: String },
    Logprob { prompt: String, target: String },
    Signal { prompt: String, candidates: Vec<String> },
    Complete { prompt: String, max_tokens: usize, stop: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BackendResponse {
    Count(usize),
    Logprob(SequenceLogprob),
    Signal(SignalDistribution),
    Text(String),
    Error(BackendError),
}

impl BackendRequest {
    /// Stable 64-bit FNV-1a fingerprint of the request.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        match self {
            BackendRequest::CountTokens { text } => {
                h.write_str("count");
                h.write_str(text);
            }
            BackendRequest::Logprob { prompt, target } => {
                h.write_str("logprob");
                h.write_str(prompt);
                h.write_str(target);
            }
            BackendRequest::Signal { prompt, candidates } => {
                h.write_str("signal");
                h.write_str(prompt);
                for c in candidates {
                    h.write_str(c);
                }
            }
            BackendRequest::Complete { prompt, max_tokens, stop } => {
                h.write_str("complete");
                h.write_str(prompt);
                h.write_str(&max_tokens.to_string());
                for s in stop {
                    h.write_str(s);
                }
            }
        }
        h.finish()
    }
}

/// Dispatches a request against a generator and captures the response.
pub fn execute<G: Generator + ?Sized>(backend: &G, request: &BackendRequest) -> BackendResponse {
    match request {
        BackendRequest::CountTokens { text } => BackendResponse::Count(backend.count_tokens(text)),
        BackendRequest::Logprob { prompt, target } => {
            let q = LikelihoodQuery {
                prompt: prompt.clone(),
                target: target.clone(),
            };
            backend
                .sequence_logprob(&q)
                .map_or_else(BackendResponse::Error, BackendResponse::Logprob)
        }
        BackendRequest::Signal { prompt, candidates } => backend
            .next_token_distribution(prompt, candidates)
            .map_or_else(BackendResponse::Error, BackendResponse::Signal),
        BackendRequest::Complete { prompt, max_tokens, stop } => backend
            .complete(prompt, *max_tokens, stop)
            .map_or_else(BackendResponse::Error, BackendResponse::Text),
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write_str(&mut self, s: &str) {
        for b in s.bytes().chain(core::iter::once(0xff)) {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cands(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn softmax_symmetric() {
        let d = restricted_softmax(&cands(&["<EC>", "<MC>"]), &[2.0, 2.0]).unwrap();
        assert_eq!(d.get("<EC>"), 0.5);
        assert_eq!(d.get("<MC>"), 0.5);
    }

    #[test]
    fn softmax_hand_computed() {
        let d = restricted_softmax(&cands(&["a", "b"]), &[0.0, -libm::log(3.0)]).unwrap();
        assert!((d.get("a") - 0.75).abs() < 1e-12);
        assert!((d.get("b") - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_tolerates_neg_infinity() {
        let d = restricted_softmax(&cands(&["a", "b"]), &[f64::NEG_INFINITY, -1.0]).unwrap();
        assert_eq!(d.get("a"), 0.0);
        assert_eq!(d.get("b"), 1.0);
        assert!(restricted_softmax(&cands(&["a"]), &[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn checked_distribution() {
        let c = cands(&["<EC>", "<MC>"]);
        let ok = SignalDistribution::checked(&c, &[("<EC>".into(), 0.7), ("<MC>".into(), 0.3)]).unwrap();
        assert_eq!(ok.get("<EC>"), 0.7);
        assert!(SignalDistribution::checked(&c, &[("<EC>".into(), 1.0)]).is_err());
        assert!(SignalDistribution::checked(&c, &[("<EC>".into(), 0.7), ("<MC>".into(), 0.4)]).is_err());
    }

    #[test]
    fn stop_truncation() {
        let stop = vec!["\n\n".to_string()];
        assert_eq!(truncate_at_stop("x = 1\n", &stop), "x = 1\n");
        assert_eq!(truncate_at_stop("x = 1\n\ny = 2", &stop), "x = 1");
        assert_eq!(truncate_at_stop("abc", &[]), "abc");
    }

    #[test]
    fn logprob_total_is_sum() {
        let lp = SequenceLogprob::from_tokens(vec![-1.0, -0.5]);
        assert_eq!(lp.total, -1.5);
        assert_eq!(lp.nll(), 1.5);
    }

    #[test]
    fn fingerprints_differ_by_field() {
        let a = BackendRequest::Logprob { prompt: "ab".into(), target: "c".into() };
        let b = BackendRequest::Logprob { prompt: "a".into(), target: "bc".into() };
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}
