//! Backends for fault-injection and scripted tests.

use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{with_retry, AttemptFailure, Backend, BackendError, RetryPolicy, SamplingConfig, ScoredToken};
use crate::prompts::{dissect, PromptParts, RenderedPrompt};

/// Fractions of rounds that get each fault. Selection hashes the round's
/// question with the seed, so it is deterministic and independent of
/// scheduling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultPlan {
    pub seed: u64,
    pub transport_rate: f64,
    pub parse_failure_rate: f64,
    pub review_reject_rate: f64,
    pub retry_policy: RetryPolicy,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self {
            seed: 0,
            transport_rate: 0.0,
            parse_failure_rate: 0.0,
            review_reject_rate: 0.0,
            retry_policy: RetryPolicy { max_attempts: 3, base_backoff: Duration::ZERO },
        }
    }

    fn draw(&self, stream: &str, question: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stream.as_bytes());
        h.update([0]);
        h.update(question.as_bytes());
        let bytes: [u8; 8] = h.finalize()[..8].try_into().unwrap();
        (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn transport_fails(&self, question: &str) -> bool {
        self.draw("transport", question) < self.transport_rate
    }

    pub fn parse_fails(&self, question: &str) -> bool {
        !self.transport_fails(question) && self.draw("parse", question) < self.parse_failure_rate
    }

    pub fn review_rejects(&self, question: &str) -> bool {
        !self.transport_fails(question)
            && !self.parse_fails(question)
            && self.draw("review", question) < self.review_reject_rate
    }
}

pub const RIGGED_PARSE_FAILURE: &str = "Sure! Here's a better answer.";
pub const RIGGED_REJECTION: &str = "The Revised Answer leaves out part of the Original Answer.";

/// Wraps a backend and injects transport failures, unparsable rewrites and
/// review rejections according to a [`FaultPlan`].
pub struct FaultInjector<B> {
    inner: B,
    plan: FaultPlan,
}

impl<B: Backend> FaultInjector<B> {
    pub fn new(inner: B, plan: FaultPlan) -> Self {
        Self { inner, plan }
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }
}

impl<B: Backend> Backend for FaultInjector<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Result<String, BackendError> {
        let Some(parts) = dissect(&prompt.text) else {
            return self.inner.complete(prompt, config);
        };
        let q = parts.question();
        if self.plan.transport_fails(q) {
            return with_retry(&self.plan.retry_policy, |_| {}, |attempt| {
                Err::<String, _>(AttemptFailure::Transient(format!("injected connection reset (attempt {attempt})")))
            });
        }
        match parts {
            PromptParts::Rewrite { .. } if self.plan.parse_fails(q) => Ok(RIGGED_PARSE_FAILURE.to_string()),
            PromptParts::Review { .. } if self.plan.review_rejects(q) => Ok(RIGGED_REJECTION.to_string()),
            _ => self.inner.complete(prompt, config),
        }
    }

    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<ScoredToken>, BackendError> {
        self.inner.score_tokens(context, continuation)
    }
}

/// Backend whose completions come from a closure; scoring is unsupported.
pub struct ScriptedBackend<F> {
    name: String,
    script: F,
}

impl<F> ScriptedBackend<F>
where
    F: Fn(&RenderedPrompt, &SamplingConfig) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, script: F) -> Self {
        Self { name: name.into(), script }
    }
}

impl<F> Backend for ScriptedBackend<F>
where
    F: Fn(&RenderedPrompt, &SamplingConfig) -> Result<String, BackendError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Result<String, BackendError> {
        (self.script)(prompt, config)
    }

    fn score_tokens(&self, _context: &str, _continuation: &str) -> Result<Vec<ScoredToken>, BackendError> {
        Err(BackendError::ScoringUnsupported(format!("{} does not score tokens", self.name)))
    }
}
