//! Text-generation and token-scoring backends.
//!
//! Two implementations share the [`Backend`] trait: [`RemoteChatBackend`]
//! speaks an OpenAI-style HTTP JSON protocol, and [`ReferenceBackend`] is a
//! deterministic in-process bigram model used as a test oracle.

mod fault;
mod reference;
mod remote;

use std::fmt;
use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::RenderedPrompt;

pub use fault::{FaultInjector, FaultPlan, ScriptedBackend};
pub use reference::{
    reference_stylize, ModelError, ReferenceBackend, ReferenceModel, Stylizer, SENTENCE_START, UNKNOWN_WORD,
};
pub use remote::RemoteChatBackend;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("prompt of {prompt_tokens} tokens exceeds max_length {limit}")]
    ContextOverflow { attempts: u32, prompt_tokens: usize, limit: usize },
    #[error("backend refused with status {status} after {attempts} attempt(s): {message}")]
    Refusal { attempts: u32, status: u16, message: String },
    #[error("token scoring unsupported: {0}")]
    ScoringUnsupported(String),
    #[error("tokenization mismatch: {0}")]
    TokenizationMismatch(String),
}

impl BackendError {
    /// Short label used in outcome histograms.
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Transport { .. } => "transport",
            BackendError::ContextOverflow { .. } => "context_overflow",
            BackendError::Refusal { .. } => "refusal",
            BackendError::ScoringUnsupported(_) => "scoring_unsupported",
            BackendError::TokenizationMismatch(_) => "tokenization_mismatch",
        }
    }

    pub fn attempts(&self) -> u32 {
        match self {
            BackendError::Transport { attempts, .. }
            | BackendError::ContextOverflow { attempts, .. }
            | BackendError::Refusal { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

/// Decoding parameters sent with every completion request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// `None` means unlimited.
    pub top_k: Option<u32>,
    pub max_length: usize,
    pub sampling_enabled: bool,
}

impl SamplingConfig {
    /// Rewrite-stage defaults for Vicuna-family models.
    pub const VICUNA_REWRITE: SamplingConfig =
        SamplingConfig { temperature: 0.4, top_p: 0.6, top_k: Some(5), max_length: 2048, sampling_enabled: true };

    /// Rewrite-stage defaults for Qwen-family models.
    pub const QWEN_REWRITE: SamplingConfig =
        SamplingConfig { temperature: 0.2, top_p: 0.6, top_k: Some(5), max_length: 2048, sampling_enabled: true };

    /// Greedy decoding used by the review stage.
    pub const REVIEW: SamplingConfig =
        SamplingConfig { temperature: 0.0, top_p: 1.0, top_k: Some(1), max_length: 2048, sampling_enabled: false };

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "vicuna" => Some(Self::VICUNA_REWRITE),
            "qwen" => Some(Self::QWEN_REWRITE),
            _ => None,
        }
    }

    /// The parameters actually sent: disabled sampling forces greedy.
    pub fn effective(&self) -> SamplingConfig {
        if self.sampling_enabled {
            *self
        } else {
            SamplingConfig { temperature: 0.0, top_k: Some(1), ..*self }
        }
    }

    /// Same limits with sampling switched off.
    pub fn greedy(&self) -> SamplingConfig {
        SamplingConfig { sampling_enabled: false, ..*self }.effective()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.top_k == Some(0) {
            return Err("top_k must be positive".into());
        }
        if self.max_length == 0 {
            return Err("max_length must be positive".into());
        }
        Ok(())
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::VICUNA_REWRITE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token_text: String,
    pub logprob: f64,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Result<String, BackendError>;

    /// Per-token log-likelihoods of `continuation` given `context`. The
    /// returned tokens concatenate to exactly `continuation`.
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<ScoredToken>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Result<String, BackendError> {
        (**self).complete(prompt, config)
    }
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<ScoredToken>, BackendError> {
        (**self).score_tokens(context, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Result<String, BackendError> {
        (**self).complete(prompt, config)
    }
    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<ScoredToken>, BackendError> {
        (**self).score_tokens(context, continuation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_backoff: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    /// Exponential backoff before attempt `attempt + 1` (1-based `attempt`).
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base_backoff.saturating_mul(1u32 << (attempt.saturating_sub(1)).min(16))
    }
}

/// Failure of a single attempt, before retry bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptFailure {
    Transient(String),
    Refusal { status: u16, message: String },
    Overflow { prompt_tokens: usize, limit: usize },
    Unsupported(String),
}

/// Runs `op` until it succeeds, fails fatally, or `max_attempts` transient
/// failures have happened.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    sleep: impl Fn(Duration),
    mut op: impl FnMut(u32) -> Result<T, AttemptFailure>,
) -> Result<T, BackendError> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(AttemptFailure::Transient(message)) => {
                if attempt >= max {
                    return Err(BackendError::Transport { attempts: attempt, message });
                }
                sleep(policy.backoff(attempt));
                attempt += 1;
            }
            Err(AttemptFailure::Refusal { status, message }) => {
                return Err(BackendError::Refusal { attempts: attempt, status, message })
            }
            Err(AttemptFailure::Overflow { prompt_tokens, limit }) => {
                return Err(BackendError::ContextOverflow { attempts: attempt, prompt_tokens, limit })
            }
            Err(AttemptFailure::Unsupported(m)) => return Err(BackendError::ScoringUnsupported(m)),
        }
    }
}

/// FIFO-fair limit on concurrent in-flight requests.
#[derive(Debug)]
pub struct FairLimiter {
    limit: usize,
    state: Mutex<LimiterState>,
    cv: Condvar,
}

#[derive(Debug, Default)]
struct LimiterState {
    next_ticket: u64,
    now_serving: u64,
    in_flight: usize,
}

pub struct LimiterPermit<'a>(&'a FairLimiter);

impl Drop for LimiterPermit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        st.in_flight -= 1;
        self.0.cv.notify_all();
    }
}

impl FairLimiter {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), state: Mutex::default(), cv: Condvar::new() }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    /// Blocks until this caller's ticket is next and a slot is free.
    pub fn acquire(&self) -> LimiterPermit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        while st.now_serving != ticket || st.in_flight >= self.limit {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.now_serving += 1;
        st.in_flight += 1;
        self.cv.notify_all();
        LimiterPermit(self)
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).in_flight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    RemoteChat,
    Reference,
}

/// Parsed `--backend` value.
///
/// Accepted forms: `reference`, `reference:<model-file>` and
/// `remote:<model>@<base-url>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub model_name: String,
    pub endpoint: Option<String>,
    pub retry_policy: RetryPolicy,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl BackendDescriptor {
    pub fn reference(model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Reference,
            model_name: model_name.into(),
            endpoint: None,
            retry_policy: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
            max_in_flight: 8,
        }
    }

    pub fn remote(model_name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::RemoteChat,
            endpoint: Some(endpoint.into()),
            ..Self::reference(model_name)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.kind, &self.endpoint) {
            (BackendKind::RemoteChat, None) => Err("remote backend requires an endpoint".into()),
            (BackendKind::Reference, Some(_)) => Err("reference backend takes no endpoint".into()),
            _ if self.retry_policy.max_attempts == 0 => Err("max_attempts must be >= 1".into()),
            _ => Ok(()),
        }
    }
}

impl FromStr for BackendDescriptor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "reference" {
            return Ok(Self::reference("reference"));
        }
        if let Some(path) = s.strip_prefix("reference:") {
            return Ok(Self::reference(path));
        }
        if let Some(rest) = s.strip_prefix("remote:") {
            let (model, url) = rest
                .split_once('@')
                .ok_or_else(|| format!("expected remote:<model>@<url>, got `{s}`"))?;
            if model.is_empty() || url.is_empty() {
                return Err(format!("expected remote:<model>@<url>, got `{s}`"));
            }
            return Ok(Self::remote(model, url));
        }
        Err(format!("unknown backend descriptor `{s}`"))
    }
}

impl fmt::Display for BackendDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, &self.endpoint) {
            (BackendKind::Reference, _) if self.model_name == "reference" => f.write_str("reference"),
            (BackendKind::Reference, _) => write!(f, "reference:{}", self.model_name),
            (BackendKind::RemoteChat, Some(url)) => write!(f, "remote:{}@{}", self.model_name, url),
            (BackendKind::RemoteChat, None) => write!(f, "remote:{}@?", self.model_name),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn flaky(fail_times: u32, policy: &RetryPolicy) -> Result<u32, BackendError> {
        let calls = Cell::new(0);
        with_retry(policy, |_| {}, |attempt| {
            calls.set(calls.get() + 1);
            if attempt <= fail_times {
                Err(AttemptFailure::Transient(format!("boom {attempt}")))
            } else {
                Ok(attempt)
            }
        })
    }

    #[test]
    fn retry_boundary() {
        for max in 1..6 {
            let policy = RetryPolicy { max_attempts: max, base_backoff: Duration::ZERO };
            assert_eq!(flaky(max - 1, &policy), Ok(max));
            assert_eq!(
                flaky(max, &policy),
                Err(BackendError::Transport { attempts: max, message: format!("boom {max}") })
            );
        }
    }

    #[test]
    fn fatal_failures_do_not_retry() {
        let policy = RetryPolicy::default();
        let r: Result<(), _> =
            with_retry(&policy, |_| panic!("no sleep expected"), |_| Err(AttemptFailure::Refusal { status: 401, message: "no".into() }));
        assert_eq!(r, Err(BackendError::Refusal { attempts: 1, status: 401, message: "no".into() }));
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy { max_attempts: 4, base_backoff: Duration::from_millis(100) };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(3), Duration::from_millis(400));
    }

    #[test]
    fn greedy_forces_top_k_one() {
        let cfg = SamplingConfig { sampling_enabled: false, ..SamplingConfig::VICUNA_REWRITE };
        let eff = cfg.effective();
        assert_eq!((eff.temperature, eff.top_k), (0.0, Some(1)));
        assert_eq!(SamplingConfig::VICUNA_REWRITE.effective(), SamplingConfig::VICUNA_REWRITE);
        assert_eq!(SamplingConfig::QWEN_REWRITE.temperature, 0.2);
        assert!(SamplingConfig { top_p: 0.0, ..SamplingConfig::REVIEW }.validate().is_err());
    }

    #[test]
    fn descriptor_forms() {
        let d: BackendDescriptor = "remote:vicuna-7b@http://localhost:8000/v1".parse().unwrap();
        assert_eq!(d.kind, BackendKind::RemoteChat);
        assert_eq!(d.endpoint.as_deref(), Some("http://localhost:8000/v1"));
        assert_eq!(d.to_string(), "remote:vicuna-7b@http://localhost:8000/v1");
        assert!(d.validate().is_ok());
        let r: BackendDescriptor = "reference".parse().unwrap();
        assert!(r.validate().is_ok());
        assert!("remote:nourl".parse::<BackendDescriptor>().is_err());
        assert!("gpt".parse::<BackendDescriptor>().is_err());
        let bad = BackendDescriptor { endpoint: Some("x".into()), ..r };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn limiter_caps_in_flight() {
        let limiter = Arc::new(FairLimiter::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let limiter = limiter.clone();
                let peak = peak.clone();
                std::thread::spawn(move || {
                    let _p = limiter.acquire();
                    peak.fetch_max(limiter.in_flight(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(limiter.in_flight(), 0);
    }
}
