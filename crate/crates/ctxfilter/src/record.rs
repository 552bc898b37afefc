//! Recording, replaying and counting wrappers around a backend, plus the
//! script file format for the scripted backend.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ctxfilter_core::backend::{
    execute, BackendError, BackendRequest, BackendResponse, FallbackCounter, Generator, LikelihoodQuery,
    SequenceLogprob, SignalDistribution, TokenCounter,
};
use ctxfilter_core::mock::{ScriptedBackend, ScriptedResponse};
use serde::{Deserialize, Serialize};

use crate::formats::{io_err, read_jsonl, write_jsonl, FormatError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: BackendRequest,
    pub response: BackendResponse,
}

/// Passes calls through and remembers every distinct request.
///
/// Token counts are only logged when the inner backend counts remotely, since
/// local counts are recomputed on replay.
pub struct RecordingBackend<G> {
    inner: G,
    log: Mutex<BTreeMap<BackendRequest, BackendResponse>>,
}

impl<G: Generator> RecordingBackend<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    fn call(&self, request: BackendRequest) -> BackendResponse {
        let response = execute(&self.inner, &request);
        self.log
            .lock()
            .expect("recording log poisoned")
            .entry(request)
            .or_insert_with(|| response.clone());
        response
    }

    /// Exchanges sorted by request, so equal runs give identical logs.
    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log
            .lock()
            .expect("recording log poisoned")
            .iter()
            .map(|(request, response)| Exchange {
                request: request.clone(),
                response: response.clone(),
            })
            .collect()
    }

    pub fn write_log<W: Write>(&self, out: W) -> io::Result<()> {
        write_jsonl(out, self.exchanges())
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut buf = Vec::new();
        self.write_log(&mut buf).map_err(io_err(path))?;
        fs::write(path, buf).map_err(io_err(path))
    }
}

impl<G: Generator> TokenCounter for RecordingBackend<G> {
    fn count_tokens(&self, text: &str) -> usize {
        if self.inner.counts_locally() {
            return self.inner.count_tokens(text);
        }
        match self.call(BackendRequest::CountTokens { text: text.to_string() }) {
            BackendResponse::Count(n) => n,
            _ => unreachable!("count request yields a count"),
        }
    }

    fn counts_locally(&self) -> bool {
        self.inner.counts_locally()
    }
}

impl<G: Generator> Generator for RecordingBackend<G> {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        match self.call(BackendRequest::Logprob {
            prompt: query.prompt.clone(),
            target: query.target.clone(),
        }) {
            BackendResponse::Logprob(l) => Ok(l),
            BackendResponse::Error(e) => Err(e),
            _ => unreachable!("logprob request yields a logprob"),
        }
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        match self.call(BackendRequest::Signal {
            prompt: prompt.to_string(),
            candidates: candidates.to_vec(),
        }) {
            BackendResponse::Signal(d) => Ok(d),
            BackendResponse::Error(e) => Err(e),
            _ => unreachable!("signal request yields a distribution"),
        }
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        match self.call(BackendRequest::Complete {
            prompt: prompt.to_string(),
            max_tokens,
            stop: stop.to_vec(),
        }) {
            BackendResponse::Text(t) => Ok(t),
            BackendResponse::Error(e) => Err(e),
            _ => unreachable!("completion request yields text"),
        }
    }
}

/// Answers from a recorded log. Unrecorded requests fail as unavailable;
/// unrecorded token counts fall back to the local counter.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    log: BTreeMap<BackendRequest, BackendResponse>,
    misses: AtomicUsize,
}

impl ReplayBackend {
    pub fn from_exchanges(exchanges: Vec<Exchange>) -> Self {
        Self {
            log: exchanges.into_iter().map(|e| (e.request, e.response)).collect(),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Ok(Self::from_exchanges(read_jsonl(path)?))
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    /// Requests that had no recorded answer.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    fn get(&self, request: &BackendRequest) -> Option<&BackendResponse> {
        let r = self.log.get(request);
        if r.is_none() {
            self.misses.fetch_add(1, Ordering::SeqCst);
        }
        r
    }
}

impl TokenCounter for ReplayBackend {
    fn count_tokens(&self, text: &str) -> usize {
        match self.log.get(&BackendRequest::CountTokens { text: text.to_string() }) {
            Some(BackendResponse::Count(n)) => *n,
            _ => FallbackCounter.count_tokens(text),
        }
    }
}

const NOT_RECORDED: &str = "request not in replay log";

impl Generator for ReplayBackend {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        let req = BackendRequest::Logprob {
            prompt: query.prompt.clone(),
            target: query.target.clone(),
        };
        match self.get(&req) {
            Some(BackendResponse::Logprob(l)) => Ok(l.clone()),
            Some(BackendResponse::Error(e)) => Err(e.clone()),
            _ => Err(BackendError::LikelihoodUnavailable(NOT_RECORDED.into())),
        }
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        let req = BackendRequest::Signal {
            prompt: prompt.to_string(),
            candidates: candidates.to_vec(),
        };
        match self.get(&req) {
            Some(BackendResponse::Signal(d)) => Ok(d.clone()),
            Some(BackendResponse::Error(e)) => Err(e.clone()),
            _ => Err(BackendError::SignalUnavailable(NOT_RECORDED.into())),
        }
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        let req = BackendRequest::Complete {
            prompt: prompt.to_string(),
            max_tokens,
            stop: stop.to_vec(),
        };
        match self.get(&req) {
            Some(BackendResponse::Text(t)) => Ok(t.clone()),
            Some(BackendResponse::Error(e)) => Err(e.clone()),
            _ => Err(BackendError::CompletionUnavailable(NOT_RECORDED.into())),
        }
    }
}

/// Per-operation call counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    pub logprob: usize,
    pub signal: usize,
    pub complete: usize,
}

pub struct CountingBackend<G> {
    inner: G,
    logprob: AtomicUsize,
    signal: AtomicUsize,
    complete: AtomicUsize,
}

impl<G: Generator> CountingBackend<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            logprob: AtomicUsize::new(0),
            signal: AtomicUsize::new(0),
            complete: AtomicUsize::new(0),
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            logprob: self.logprob.load(Ordering::SeqCst),
            signal: self.signal.load(Ordering::SeqCst),
            complete: self.complete.load(Ordering::SeqCst),
        }
    }
}

impl<G: Generator> TokenCounter for CountingBackend<G> {
    fn count_tokens(&self, text: &str) -> usize {
        self.inner.count_tokens(text)
    }

    fn counts_locally(&self) -> bool {
        self.inner.counts_locally()
    }
}

impl<G: Generator> Generator for CountingBackend<G> {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        self.logprob.fetch_add(1, Ordering::SeqCst);
        self.inner.sequence_logprob(query)
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        self.signal.fetch_add(1, Ordering::SeqCst);
        self.inner.next_token_distribution(prompt, candidates)
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        self.complete.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, max_tokens, stop)
    }
}

/// Script for the scripted backend. Keyed answers win over the queues.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptFile {
    pub keyed: Vec<KeyedResponse>,
    pub logprobs: Vec<ScriptedResponse>,
    pub signals: Vec<ScriptedResponse>,
    pub completions: Vec<ScriptedResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyedResponse {
    pub request: BackendRequest,
    pub response: ScriptedResponse,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| FormatError::Json { line: 1, source })
    }

    pub fn into_backend(self) -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        for k in self.keyed {
            b = b.on(&k.request, k.response);
        }
        for r in self.logprobs {
            b = b.then_logprob(r);
        }
        for r in self.signals {
            b = b.then_signal(r);
        }
        for r in self.completions {
            b = b.then_completion(r);
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctxfilter_core::mock::OverlapOracle;

    struct RemoteCounter;

    impl TokenCounter for RemoteCounter {
        fn count_tokens(&self, text: &str) -> usize {
            text.len()
        }

        fn counts_locally(&self) -> bool {
            false
        }
    }

    impl Generator for RemoteCounter {
        fn sequence_logprob(&self, _: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
            Err(BackendError::LikelihoodUnavailable("none".into()))
        }

        fn next_token_distribution(&self, _: &str, _: &[String]) -> Result<SignalDistribution, BackendError> {
            Err(BackendError::SignalUnavailable("none".into()))
        }

        fn complete(&self, prompt: &str, _: usize, _: &[String]) -> Result<String, BackendError> {
            Ok(prompt.to_uppercase())
        }
    }

    fn query(p: &str) -> LikelihoodQuery {
        LikelihoodQuery {
            prompt: p.into(),
            target: "t = 1".into(),
        }
    }

    #[test]
    fn replay_answers_like_the_recorded_backend() {
        let rec = RecordingBackend::new(OverlapOracle::default());
        let a = rec.sequence_logprob(&query("x")).unwrap();
        let b = rec.next_token_distribution("p", &["<EC>".into(), "<MC>".into()]).unwrap();
        let c = rec.complete("q = 1", 8, &[]).unwrap();
        rec.count_tokens("not logged");
        assert_eq!(rec.exchanges().len(), 3);

        let mut buf = Vec::new();
        rec.write_log(&mut buf).unwrap();
        let exchanges: Vec<Exchange> = crate::formats::JsonLines::new(io::Cursor::new(&buf))
            .collect::<Result<_, _>>()
            .unwrap();
        let replay = ReplayBackend::from_exchanges(exchanges);
        assert_eq!(replay.sequence_logprob(&query("x")).unwrap(), a);
        assert_eq!(replay.next_token_distribution("p", &["<EC>".into(), "<MC>".into()]).unwrap(), b);
        assert_eq!(replay.complete("q = 1", 8, &[]).unwrap(), c);
        assert_eq!(replay.misses(), 0);
        assert!(replay.complete("other", 8, &[]).is_err());
        assert_eq!(replay.misses(), 1);
    }

    #[test]
    fn remote_counts_and_errors_are_recorded() {
        let rec = RecordingBackend::new(RemoteCounter);
        assert_eq!(rec.count_tokens("abcd"), 4);
        assert!(rec.sequence_logprob(&query("x")).is_err());
        let replay = ReplayBackend::from_exchanges(rec.exchanges());
        assert_eq!(replay.count_tokens("abcd"), 4);
        assert_eq!(
            replay.sequence_logprob(&query("x")),
            Err(BackendError::LikelihoodUnavailable("none".into()))
        );
    }

    #[test]
    fn log_order_is_independent_of_call_order() {
        let one = RecordingBackend::new(OverlapOracle::default());
        let two = RecordingBackend::new(OverlapOracle::default());
        for p in ["a", "b", "c"] {
            one.complete(p, 4, &[]).unwrap();
        }
        for p in ["c", "a", "b", "a"] {
            two.complete(p, 4, &[]).unwrap();
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        one.write_log(&mut x).unwrap();
        two.write_log(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn counting_wrapper_counts() {
        let c = CountingBackend::new(OverlapOracle::default());
        c.complete("a", 1, &[]).unwrap();
        c.sequence_logprob(&query("b")).unwrap();
        c.sequence_logprob(&query("c")).unwrap();
        assert_eq!(
            c.counts(),
            CallCounts {
                logprob: 2,
                signal: 0,
                complete: 1
            }
        );
    }

    #[test]
    fn script_file_builds_backend() {
        let text = r#"{"signals": [{"kind": "distribution", "value": [["<EC>", 0.25], ["<MC>", 0.75]]}],
                       "completions": [{"kind": "text", "value": "x = 1\n\ny"}]}"#;
        let script: ScriptFile = serde_json::from_str(text).unwrap();
        let b = script.into_backend();
        let d = b.next_token_distribution("p", &["<EC>".into(), "<MC>".into()]).unwrap();
        assert_eq!(d.get("<MC>"), 0.75);
        assert_eq!(b.complete("p", 16, &["\n\n".into()]).unwrap(), "x = 1");
    }
}
