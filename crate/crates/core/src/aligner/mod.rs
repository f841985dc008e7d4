//! Two-stage alignment of soft-format answers.
//!
//! Each round is rewritten by the backend, the revised answer is cut out of
//! the response and screened for leaked instruction words, and the revision
//! is then reviewed with greedy decoding. A revision replaces the original
//! answer only when the review accepts it; every other path keeps the
//! original.

mod checkpoint;
mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError, SamplingConfig};
use crate::corpus::{reassemble, soft_rounds, CorpusError, InstructionRecord, QARound, RoundKey, TagMap};
use crate::parallel::WorkerPool;
use crate::prompts::{PromptSet, RewriteVariant};

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use report::{compute_stats, format_percent, percent_hundredths, AlignmentReport};

/// Outcomes are flushed to the checkpoint in batches of this size.
pub const CHECKPOINT_BATCH: usize = 64;

pub const REVISED_MARKER: &str = "Revised Answer:";
pub const EXPLANATION_MARKERS: [&str; 2] = ["Explanation:", "Explanations:"];
pub const SENSITIVE_WORDS: [&str; 5] = ["revised answer", "original answer", "revision", "semantic meaning", "Question"];
pub const ACCEPT_SENTENCE: &str = "The Revised Answer is fine";

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("checkpoint belongs to a different run (config hash {expected}, current {found})")]
    ChecksumMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewriteStatus {
    Success,
    ParseFailure,
    SensitiveWordFailure,
    BackendError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewStatus {
    Accepted,
    Rejected,
    BackendError,
}

/// Verdict of a review response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeCategory {
    Accepted,
    Unchanged,
    Unqualified,
    RewriteFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: QARound,
    pub rewrite_status: RewriteStatus,
    pub revised_answer: Option<String>,
    pub review_status: Option<ReviewStatus>,
    pub final_answer: String,
    /// Backend calls made, retries included.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RoundOutcome {
    fn kept(round: &QARound, rewrite_status: RewriteStatus, attempts: u32, error: Option<String>) -> Self {
        Self {
            round: round.clone(),
            rewrite_status,
            revised_answer: None,
            review_status: None,
            final_answer: round.answer.clone(),
            attempts,
            error,
        }
    }

    pub fn category(&self) -> OutcomeCategory {
        match (self.rewrite_status, self.review_status) {
            (RewriteStatus::Success, Some(ReviewStatus::Accepted)) => {
                if self.revised_answer.as_deref() == Some(self.round.answer.as_str()) {
                    OutcomeCategory::Unchanged
                } else {
                    OutcomeCategory::Accepted
                }
            }
            (RewriteStatus::Success, _) => OutcomeCategory::Unqualified,
            _ => OutcomeCategory::RewriteFailure,
        }
    }

    fn failure_label(&self) -> String {
        let backend = || format!("backend:{}", self.error.as_deref().unwrap_or("unknown"));
        match (self.rewrite_status, self.review_status) {
            (RewriteStatus::ParseFailure, _) => "parse_failure".into(),
            (RewriteStatus::SensitiveWordFailure, _) => "sensitive_word".into(),
            (RewriteStatus::BackendError, _) | (_, Some(ReviewStatus::BackendError)) => backend(),
            (_, Some(ReviewStatus::Rejected)) => "rejected".into(),
            _ => "none".into(),
        }
    }
}

/// How sensitive words are matched against a revised answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SensitiveMatch {
    #[default]
    CaseInsensitive,
    /// Match exactly as listed ("Question" capitalised, the rest lower case).
    Strict,
}

fn find_explanation(text: &str) -> Option<usize> {
    EXPLANATION_MARKERS.iter().filter_map(|m| text.find(m)).min()
}

/// Cuts the revised answer out of a rewrite response and screens it.
pub fn post_process_rewrite_with(response: &str, mode: SensitiveMatch) -> (Option<String>, RewriteStatus) {
    let Some(start) = response.find(REVISED_MARKER) else {
        return (None, RewriteStatus::ParseFailure);
    };
    let rest = &response[start + REVISED_MARKER.len()..];
    let Some(end) = find_explanation(rest) else {
        return (None, RewriteStatus::ParseFailure);
    };
    let candidate = rest[..end].trim();
    if candidate.is_empty() {
        return (None, RewriteStatus::ParseFailure);
    }
    let leaked = match mode {
        SensitiveMatch::CaseInsensitive => {
            let lower = candidate.to_lowercase();
            SENSITIVE_WORDS.iter().any(|w| lower.contains(&w.to_lowercase()))
        }
        SensitiveMatch::Strict => SENSITIVE_WORDS.iter().any(|w| candidate.contains(w)),
    };
    if leaked {
        (None, RewriteStatus::SensitiveWordFailure)
    } else {
        (Some(candidate.to_string()), RewriteStatus::Success)
    }
}

pub fn post_process_rewrite(response: &str) -> (Option<String>, RewriteStatus) {
    post_process_rewrite_with(response, SensitiveMatch::CaseInsensitive)
}

/// Case-sensitive substring test for the acceptance sentence.
pub fn review_verdict(response: &str) -> Verdict {
    if response.contains(ACCEPT_SENTENCE) {
        Verdict::Accepted
    } else {
        Verdict::Rejected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub rewrite: SamplingConfig,
    pub review: SamplingConfig,
    pub variant: RewriteVariant,
    pub concurrency: usize,
    pub sensitive_match: SensitiveMatch,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            rewrite: SamplingConfig::VICUNA_REWRITE,
            review: SamplingConfig::VICUNA_REWRITE.greedy(),
            variant: RewriteVariant::No1,
            concurrency: 1,
            sensitive_match: SensitiveMatch::CaseInsensitive,
        }
    }
}

/// Aligned corpus, per-round outcomes in corpus order, and the report.
#[derive(Debug, Clone)]
pub struct AlignedCorpus {
    pub records: Vec<InstructionRecord>,
    pub outcomes: Vec<RoundOutcome>,
    pub report: AlignmentReport,
}

#[derive(Debug)]
pub enum RunState {
    Complete(AlignedCorpus),
    /// Stopped after the round budget; resume from the checkpoint.
    Interrupted { processed: usize, remaining: usize },
}

pub struct Aligner<'a> {
    backend: &'a dyn Backend,
    prompts: PromptSet,
    config: AlignConfig,
}

impl<'a> Aligner<'a> {
    pub fn new(backend: &'a dyn Backend, prompts: PromptSet, config: AlignConfig) -> Result<Self, AlignError> {
        config.rewrite.validate().map_err(AlignError::Config)?;
        config.review.validate().map_err(AlignError::Config)?;
        if config.review.sampling_enabled {
            return Err(AlignError::Config("review stage must run with sampling disabled".into()));
        }
        if config.concurrency == 0 {
            return Err(AlignError::Config("concurrency must be >= 1".into()));
        }
        Ok(Self { backend, prompts, config })
    }

    pub fn config(&self) -> &AlignConfig {
        &self.config
    }

    pub fn align_round(&self, round: &QARound) -> RoundOutcome {
        let rewrite_prompt = match self.prompts.render_rewrite(self.config.variant, &round.question, &round.answer) {
            Ok(p) => p,
            Err(e) => return RoundOutcome::kept(round, RewriteStatus::ParseFailure, 0, Some(e.to_string())),
        };
        let response = match self.backend.complete(&rewrite_prompt, &self.config.rewrite) {
            Ok(r) => r,
            Err(e) => return backend_failure(round, &e),
        };
        let mut attempts = 1;
        let (revised, status) = post_process_rewrite_with(&response, self.config.sensitive_match);
        let Some(revised) = revised else {
            return RoundOutcome::kept(round, status, attempts, None);
        };

        let review_prompt = self
            .prompts
            .render_review(&round.question, &round.answer, &revised)
            .expect("inputs already checked non-empty");
        let review_cfg = self.config.review.greedy();
        let (review_status, error) = match self.backend.complete(&review_prompt, &review_cfg) {
            Ok(text) => {
                attempts += 1;
                match review_verdict(&text) {
                    Verdict::Accepted => (ReviewStatus::Accepted, None),
                    Verdict::Rejected => (ReviewStatus::Rejected, None),
                }
            }
            Err(e) => {
                attempts += e.attempts();
                (ReviewStatus::BackendError, Some(e.kind().to_string()))
            }
        };
        let final_answer =
            if review_status == ReviewStatus::Accepted { revised.clone() } else { round.answer.clone() };
        RoundOutcome {
            round: round.clone(),
            rewrite_status: RewriteStatus::Success,
            revised_answer: Some(revised),
            review_status: Some(review_status),
            final_answer,
            attempts,
            error,
        }
    }

    /// Digest of everything that determines the outcomes of a run.
    pub fn config_hash(&self, rounds: &[QARound]) -> String {
        let mut corpus = Sha256::new();
        for r in rounds {
            for field in [r.record_id.as_bytes(), &r.round_index.to_le_bytes(), r.question.as_bytes(), r.answer.as_bytes()] {
                corpus.update((field.len() as u64).to_le_bytes());
                corpus.update(field);
            }
        }
        let canonical = serde_json::json!({
            "backend": self.backend.name(),
            "corpus": hex::encode(corpus.finalize()),
            "prompts": self.prompts.digests(),
            "review": self.config.review,
            "rewrite": self.config.rewrite,
            "sensitive_match": self.config.sensitive_match,
            "variant": self.config.variant,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    /// Opens (or starts) the checkpoint file for aligning `records`.
    pub fn open_checkpoint(
        &self,
        path: &std::path::Path,
        records: &[InstructionRecord],
        tag_map: &TagMap,
    ) -> Result<Checkpoint, AlignError> {
        let hash = self.config_hash(&soft_rounds(records, tag_map));
        Checkpoint::open(path, &hash[..12], &hash)
    }

    pub fn align_corpus(
        &self,
        records: &[InstructionRecord],
        tag_map: &TagMap,
        checkpoint: Option<&mut Checkpoint>,
    ) -> Result<AlignedCorpus, AlignError> {
        match self.run(records, tag_map, checkpoint, None)? {
            RunState::Complete(c) => Ok(c),
            RunState::Interrupted { .. } => unreachable!("no budget given"),
        }
    }

    /// Like [`Aligner::align_corpus`] but stops after `budget` newly
    /// processed rounds, leaving the rest for a resumed run.
    pub fn run(
        &self,
        records: &[InstructionRecord],
        tag_map: &TagMap,
        checkpoint: Option<&mut Checkpoint>,
        budget: Option<usize>,
    ) -> Result<RunState, AlignError> {
        let rounds = soft_rounds(records, tag_map);
        let hash = self.config_hash(&rounds);
        let mut scratch;
        let checkpoint = match checkpoint {
            Some(cp) => {
                if cp.config_hash() != hash {
                    return Err(AlignError::ChecksumMismatch { expected: cp.config_hash().into(), found: hash });
                }
                cp
            }
            None => {
                scratch = Checkpoint::in_memory(&hash[..12], &hash);
                &mut scratch
            }
        };

        let pending: Vec<&QARound> = rounds.iter().filter(|r| checkpoint.get(&r.key()).is_none()).collect();
        let take = budget.map_or(pending.len(), |b| b.min(pending.len()));
        let pool = WorkerPool::new(self.config.concurrency);
        for batch in pending[..take].chunks(CHECKPOINT_BATCH) {
            let outcomes = pool.map(batch, |r| self.align_round(r));
            checkpoint.commit(&outcomes)?;
        }
        if take < pending.len() {
            return Ok(RunState::Interrupted { processed: take, remaining: pending.len() - take });
        }

        let outcomes: Vec<RoundOutcome> = rounds
            .iter()
            .map(|r| checkpoint.get(&r.key()).cloned().expect("every round processed"))
            .collect();
        let replacements: BTreeMap<RoundKey, String> = outcomes
            .iter()
            .filter(|o| o.final_answer != o.round.answer)
            .map(|o| (o.round.key(), o.final_answer.clone()))
            .collect();
        let aligned = reassemble(records, tag_map, &replacements)?;
        let report = compute_stats(&outcomes);
        Ok(RunState::Complete(AlignedCorpus { records: aligned, outcomes, report }))
    }
}

fn backend_failure(round: &QARound, e: &BackendError) -> RoundOutcome {
    RoundOutcome::kept(round, RewriteStatus::BackendError, e.attempts(), Some(e.kind().to_string()))
}

/// Answers keyed by round, for checking a reassembled corpus.
pub fn final_answers(outcomes: &[RoundOutcome]) -> HashMap<RoundKey, &str> {
    outcomes.iter().map(|o| (o.round.key(), o.final_answer.as_str())).collect()
}
