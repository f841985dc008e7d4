//! Perplexity indicator of the writing-manner gap.
//!
//! The perplexity of a token sequence is `exp(-(1/t) * sum(log p))`. For a
//! corpus, answers of the evaluation split are scored conditioned on their
//! question, and the corpus value aggregates per token rather than per
//! round so long answers are not underweighted.
//!
//! This is the direct variant: answers are scored under the backend as-is,
//! without first adapting a multimodal model to the training split.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ScoredToken};
use crate::corpus::{split_rounds, InstructionRecord, QARound};
use crate::parallel::{pairwise_sum, WorkerPool};

pub const METRIC_VARIANT: &str = "direct-PPL variant";
pub const AGGREGATION: &str = "token-weighted";

/// Conversation template used as scoring context. `{question}` is replaced
/// by the round's question; the answer follows as the continuation.
pub const CONTEXT_TEMPLATE: &str = "USER: {question} ASSISTANT:";

#[derive(Debug, Error, PartialEq)]
pub enum GapError {
    #[error("scoring {source_key}: {error}")]
    Scoring { source_key: String, error: BackendError },
    #[error("empty token sequence for {0}")]
    EmptySequence(String),
    #[error("eval_count {eval_count} exceeds corpus size {corpus_size}")]
    BadSplit { eval_count: usize, corpus_size: usize },
}

/// Last `eval_count` records form the evaluation side; the rest is the
/// training side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub eval_count: usize,
}

impl SplitSpec {
    /// Default size of the evaluation tail.
    pub const DEFAULT_EVAL_COUNT: usize = 3000;

    pub fn apply<'a, T>(&self, items: &'a [T]) -> Result<(&'a [T], &'a [T]), GapError> {
        if self.eval_count == 0 || self.eval_count > items.len() {
            return Err(GapError::BadSplit { eval_count: self.eval_count, corpus_size: items.len() });
        }
        Ok(items.split_at(items.len() - self.eval_count))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<ScoredToken>,
    pub source: (String, usize),
}

pub fn sequence_ppl(logprobs: &[f64]) -> f64 {
    let t = logprobs.len() as f64;
    (-logprobs.iter().sum::<f64>() / t).exp()
}

impl TokenSequence {
    pub fn new(tokens: Vec<ScoredToken>, source: (String, usize)) -> Result<Self, GapError> {
        if tokens.is_empty() {
            return Err(GapError::EmptySequence(format!("{}#{}", source.0, source.1)));
        }
        Ok(Self { tokens, source })
    }

    pub fn logprob_sum(&self) -> f64 {
        self.tokens.iter().map(|t| t.logprob).sum()
    }

    pub fn ppl(&self) -> f64 {
        (-self.logprob_sum() / self.tokens.len() as f64).exp()
    }
}

pub fn render_context(question: &str) -> String {
    CONTEXT_TEMPLATE.replace("{question}", question)
}

/// Scores one round's answer given its question.
pub fn score_round(round: &QARound, backend: &dyn Backend) -> Result<TokenSequence, GapError> {
    let key = format!("{}#{}", round.record_id, round.round_index);
    let tokens = backend
        .score_tokens(&render_context(&round.question), &round.answer)
        .map_err(|error| GapError::Scoring { source_key: key, error })?;
    TokenSequence::new(tokens, (round.record_id.clone(), round.round_index))
}

pub fn answer_ppl(round: &QARound, backend: &dyn Backend) -> Result<f64, GapError> {
    Ok(score_round(round, backend)?.ppl())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPpl {
    pub record_id: String,
    pub round_index: usize,
    pub ppl: f64,
    pub tokens: usize,
    pub logprob_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub backend_name: String,
    pub eval_count: usize,
    pub token_total: usize,
    pub corpus_ppl: f64,
    pub metric: String,
    pub aggregation: String,
    pub context_template: String,
    pub per_round: Vec<RoundPpl>,
}

/// Scores every round of the last `split.eval_count` records. Any scoring
/// error aborts the report.
pub fn corpus_gap_report(
    records: &[InstructionRecord],
    backend: &dyn Backend,
    split: SplitSpec,
    pool: &WorkerPool,
) -> Result<PplReport, GapError> {
    let (_, eval) = split.apply(records)?;
    let rounds: Vec<QARound> = eval.iter().flat_map(split_rounds).collect();
    let scored = pool.map(&rounds, |r| score_round(r, backend));
    let mut per_round = Vec::with_capacity(scored.len());
    for seq in scored {
        let seq = seq?;
        per_round.push(RoundPpl {
            record_id: seq.source.0.clone(),
            round_index: seq.source.1,
            ppl: seq.ppl(),
            tokens: seq.tokens.len(),
            logprob_sum: seq.logprob_sum(),
        });
    }
    let sums: Vec<f64> = per_round.iter().map(|r| r.logprob_sum).collect();
    let token_total: usize = per_round.iter().map(|r| r.tokens).sum();
    let corpus_ppl = if token_total == 0 { f64::NAN } else { (-pairwise_sum(&sums) / token_total as f64).exp() };
    Ok(PplReport {
        backend_name: backend.name().to_string(),
        eval_count: split.eval_count,
        token_total,
        corpus_ppl,
        metric: METRIC_VARIANT.into(),
        aggregation: AGGREGATION.into(),
        context_template: CONTEXT_TEMPLATE.into(),
        per_round,
    })
}

/// Two-column original vs aligned comparison.
pub fn render_comparison(rows: &[(&str, f64, f64)]) -> String {
    let mut out = format!("{:<16} {:>10} {:>12}\n", "Model", "Original", "LLM-aligned");
    for (model, original, aligned) in rows {
        out.push_str(&format!("{model:<16} {original:>10.3} {aligned:>12.3}\n"));
    }
    out
}
