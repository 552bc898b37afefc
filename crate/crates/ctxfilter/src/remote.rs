//! Backend for an OpenAI-style `/v1/completions` server.
//!
//! Likelihoods use `echo` with `max_tokens = 0`; signal distributions read the
//! top log-probabilities of the first generated token.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use ctxfilter_core::backend::{
    restricted_softmax, truncate_at_stop, BackendError, Generator, LikelihoodQuery, SequenceLogprob,
    SignalDistribution, TokenCounter,
};
use ctxfilter_core::tokens::fallback_token_count;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub path: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub top_logprobs: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            path: "/v1/completions".into(),
            model: String::new(),
            api_key: None,
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 200,
            max_in_flight: 8,
            top_logprobs: 20,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().expect("gate poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate poisoned");
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    gate: Gate,
}

#[derive(Debug, Deserialize)]
struct Completions {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Default, Deserialize)]
struct Logprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
    #[serde(default)]
    top_logprobs: Vec<Option<BTreeMap<String, f64>>>,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

fn redact(key: &Option<String>) -> &'static str {
    if key.is_some() {
        "Bearer ***"
    } else {
        "none"
    }
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate::new(cfg.max_in_flight);
        Self { cfg, agent, gate }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}{}", self.cfg.base_url.trim_end_matches('/'), self.cfg.path)
    }

    fn attempt(&self, body: &Value) -> Result<Completions, Failure> {
        let _slot = self.gate.enter();
        let mut req = self.agent.post(self.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {detail}")));
        }
        resp.body_mut()
            .read_json::<Completions>()
            .map_err(|e| Failure::Fatal(format!("malformed response: {e}")))
    }

    /// Sends with retries on transport errors, 429 and 5xx.
    fn post(&self, mut body: Value) -> Result<Choice, String> {
        body["model"] = json!(self.cfg.model);
        log::debug!("POST {} auth={} body={body}", self.url(), redact(&self.cfg.api_key));
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(c) => return c.choices.into_iter().next().ok_or_else(|| "response has no choices".into()),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) if attempt >= self.cfg.max_retries => {
                    return Err(format!("{e} after {} attempts", attempt + 1))
                }
                Err(Failure::Retryable(e)) => {
                    let wait = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("retrying in {wait} ms: {e}");
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
            }
        }
    }
}

/// Top log-probabilities keyed by candidate. An exact key wins; otherwise a
/// key that is a prefix of exactly one candidate counts for that candidate.
pub fn candidate_scores(top: &BTreeMap<String, f64>, candidates: &[String]) -> Vec<f64> {
    candidates
        .iter()
        .map(|c| {
            if let Some(v) = top.get(c) {
                return *v;
            }
            top.iter()
                .filter(|(k, _)| {
                    let k = k.trim_start();
                    !k.is_empty()
                        && c.starts_with(k)
                        && candidates.iter().filter(|o| o.starts_with(k)).count() == 1
                })
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Log-probabilities of the tokens starting at or after `prompt_chars`.
pub fn target_logprobs(text_offset: &[usize], token_logprobs: &[Option<f64>], prompt_chars: usize) -> Option<Vec<f64>> {
    let per: Vec<f64> = text_offset
        .iter()
        .zip(token_logprobs)
        .filter(|(off, _)| **off >= prompt_chars)
        .filter_map(|(_, v)| *v)
        .collect();
    (!per.is_empty()).then_some(per)
}

impl TokenCounter for RemoteBackend {
    fn count_tokens(&self, text: &str) -> usize {
        fallback_token_count(text)
    }
}

impl Generator for RemoteBackend {
    fn sequence_logprob(&self, query: &LikelihoodQuery) -> Result<SequenceLogprob, BackendError> {
        let body = json!({
            "prompt": format!("{}{}", query.prompt, query.target),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0,
        });
        let choice = self.post(body).map_err(BackendError::LikelihoodUnavailable)?;
        let lp = choice.logprobs.unwrap_or_default();
        target_logprobs(&lp.text_offset, &lp.token_logprobs, query.prompt.chars().count())
            .map(SequenceLogprob::from_tokens)
            .ok_or_else(|| BackendError::LikelihoodUnavailable("no target tokens in echoed log-probabilities".into()))
    }

    fn next_token_distribution(&self, prompt: &str, candidates: &[String]) -> Result<SignalDistribution, BackendError> {
        let body = json!({
            "prompt": prompt,
            "max_tokens": 1,
            "logprobs": self.cfg.top_logprobs,
            "temperature": 0,
        });
        let choice = self.post(body).map_err(BackendError::SignalUnavailable)?;
        let top = choice
            .logprobs
            .and_then(|lp| lp.top_logprobs.into_iter().next().flatten())
            .ok_or_else(|| BackendError::SignalUnavailable("response has no top log-probabilities".into()))?;
        restricted_softmax(candidates, &candidate_scores(&top, candidates))
    }

    fn complete(&self, prompt: &str, max_tokens: usize, stop: &[String]) -> Result<String, BackendError> {
        let mut body = json!({
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": 0,
        });
        if !stop.is_empty() {
            body["stop"] = json!(stop);
        }
        let choice = self.post(body).map_err(BackendError::CompletionUnavailable)?;
        Ok(truncate_at_stop(&choice.text, stop).to_string())
    }
}
