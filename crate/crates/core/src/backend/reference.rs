//! Deterministic in-process backend.
//!
//! Generation: a rewrite prompt is answered with the stylized answer in the
//! `Revised Answer:` / `Explanation:` layout; a review prompt is accepted
//! iff the content-word multisets of the original and revised answers
//! agree after stopword removal and synonym normalization.
//!
//! Scoring: whitespace-tokenized bigram table with optional add-alpha
//! smoothing. A token carries its leading whitespace so the tokens of a
//! continuation tile it exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use super::{Backend, BackendError, SamplingConfig, ScoredToken};
use crate::prompts::{dissect, PromptParts, RenderedPrompt};

pub const SENTENCE_START: &str = "<s>";
pub const UNKNOWN_WORD: &str = "<unk>";

const BUILTIN_MODEL: &str = include_str!("../../assets/reference_model.txt");
const ROW_MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("model line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("synonym chain: `{0}` is both a source and a target")]
    SynonymChain(String),
    #[error("bigram row `{prev}` has total probability {mass}")]
    RowMass { prev: String, mass: f64 },
}

/// Bigram table plus the normalization tables used by generation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReferenceModel {
    bigrams: BTreeMap<String, BTreeMap<String, f64>>,
    synonyms: BTreeMap<String, String>,
    stopwords: BTreeSet<String>,
    smoothing: Option<f64>,
    vocab: BTreeSet<String>,
}

impl ReferenceModel {
    pub fn builtin() -> &'static ReferenceModel {
        static MODEL: OnceLock<ReferenceModel> = OnceLock::new();
        MODEL.get_or_init(|| ReferenceModel::parse(BUILTIN_MODEL).expect("builtin reference model is valid"))
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut model = ReferenceModel::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| ModelError::Line { line: n + 1, reason: reason.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["BIGRAM", prev, word, prob] => {
                    let p: f64 = prob.parse().map_err(|_| err("probability is not a number"))?;
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(err("probability must be in (0, 1]"));
                    }
                    model.bigrams.entry(prev.to_string()).or_default().insert(word.to_string(), p);
                }
                ["SYNONYM", from, to] => {
                    model.synonyms.insert(from.to_lowercase(), to.to_lowercase());
                }
                ["STOPWORD", w] => {
                    model.stopwords.insert(w.to_lowercase());
                }
                ["SMOOTHING", alpha] => {
                    let a: f64 = alpha.parse().map_err(|_| err("alpha is not a number"))?;
                    if !(a > 0.0 && a.is_finite()) {
                        return Err(err("alpha must be positive"));
                    }
                    model.smoothing = Some(a);
                }
                _ => return Err(err("unrecognised line")),
            }
        }
        model.finish()
    }

    fn finish(mut self) -> Result<Self, ModelError> {
        if let Some(to) = self.synonyms.values().find(|to| self.synonyms.contains_key(*to)) {
            return Err(ModelError::SynonymChain(to.clone()));
        }
        for (prev, row) in &self.bigrams {
            let mass: f64 = row.values().sum();
            if mass > 1.0 + ROW_MASS_TOLERANCE {
                return Err(ModelError::RowMass { prev: prev.clone(), mass });
            }
        }
        self.vocab = self
            .bigrams
            .iter()
            .flat_map(|(prev, row)| std::iter::once(prev).chain(row.keys()))
            .filter(|w| w.as_str() != SENTENCE_START)
            .cloned()
            .collect();
        Ok(self)
    }

    /// Serializes to the asset format; `parse(to_asset())` is the identity.
    pub fn to_asset(&self) -> String {
        let mut out = String::new();
        if let Some(a) = self.smoothing {
            writeln!(out, "SMOOTHING {a}").unwrap();
        }
        for (from, to) in &self.synonyms {
            writeln!(out, "SYNONYM {from} {to}").unwrap();
        }
        for w in &self.stopwords {
            writeln!(out, "STOPWORD {w}").unwrap();
        }
        for (prev, row) in &self.bigrams {
            for (word, p) in row {
                writeln!(out, "BIGRAM {prev} {word} {p}").unwrap();
            }
        }
        out
    }

    /// Maximum-likelihood bigram table fitted on `(context, continuation)`
    /// pairs, keeping this model's synonyms and stopwords.
    pub fn refit<'a>(
        &self,
        samples: impl IntoIterator<Item = (&'a str, &'a str)>,
        smoothing: Option<f64>,
    ) -> ReferenceModel {
        let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for (context, continuation) in samples {
            let mut prev = last_word(context).to_string();
            for word in continuation.split_whitespace() {
                *counts.entry(prev).or_default().entry(word.to_string()).or_default() += 1;
                prev = word.to_string();
            }
        }
        let bigrams = counts
            .into_iter()
            .map(|(prev, row)| {
                let total: u64 = row.values().sum();
                let row = row.into_iter().map(|(w, c)| (w, c as f64 / total as f64)).collect();
                (prev, row)
            })
            .collect();
        ReferenceModel {
            bigrams,
            synonyms: self.synonyms.clone(),
            stopwords: self.stopwords.clone(),
            smoothing,
            vocab: BTreeSet::new(),
        }
        .finish()
        .expect("fitted rows are normalized")
    }

    pub fn smoothing(&self) -> Option<f64> {
        self.smoothing
    }

    pub fn synonyms(&self) -> &BTreeMap<String, String> {
        &self.synonyms
    }

    /// Vocabulary size used by smoothing: every table word plus `<unk>`.
    pub fn smoothing_vocab_size(&self) -> usize {
        self.vocab.len() + usize::from(!self.vocab.contains(UNKNOWN_WORD))
    }

    /// P(word | prev), or `None` outside the model's support.
    ///
    /// With smoothing alpha, a row of total mass m becomes
    /// `(p + alpha) / (m + alpha * |V|)`; out-of-vocabulary words score as
    /// `<unk>` and unseen histories are uniform.
    pub fn prob(&self, prev: &str, word: &str) -> Option<f64> {
        let row = self.bigrams.get(prev);
        let p = row.and_then(|r| r.get(word)).copied();
        match self.smoothing {
            None => p,
            Some(alpha) => {
                let mass: f64 = row.map(|r| r.values().sum()).unwrap_or(0.0);
                let v = self.smoothing_vocab_size() as f64;
                Some((p.unwrap_or(0.0) + alpha) / (mass + alpha * v))
            }
        }
    }

    /// Lowercased content words, synonym-normalized, stopwords removed,
    /// sorted so equal multisets compare equal.
    pub fn content_words(&self, text: &str) -> Vec<String> {
        let mut words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let lower = w.to_lowercase();
                self.synonyms.get(&lower).cloned().unwrap_or(lower)
            })
            .filter(|w| !self.stopwords.contains(w))
            .collect();
        words.sort();
        words
    }
}

fn last_word(context: &str) -> &str {
    context.split_whitespace().last().unwrap_or(SENTENCE_START)
}

/// Splits `text` into tokens of (leading whitespace + word); trailing
/// whitespace joins the last token.
pub(crate) fn tile(text: &str) -> Vec<(&str, &str)> {
    let mut tokens: Vec<(usize, usize, usize)> = Vec::new(); // start, word_start, end
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let word_start = i;
        let mut end = text.len();
        while let Some(&(j, c)) = chars.peek() {
            if c.is_whitespace() {
                end = j;
                break;
            }
            chars.next();
        }
        tokens.push((start, word_start, end));
        start = end;
    }
    if let Some(last) = tokens.last_mut() {
        last.2 = text.len();
    }
    tokens
        .into_iter()
        .map(|(s, w, e)| (&text[s..e], text[w..e].trim_end()))
        .collect()
}

/// Deterministic answer restyler: British to American spelling through the
/// synonym table and "the X of the Y is" to "the Y's X is", applied until
/// nothing changes.
#[derive(Debug, Clone)]
pub struct Stylizer {
    synonyms: BTreeMap<String, String>,
    possessive: Regex,
    word: Regex,
}

const MAX_STYLE_PASSES: usize = 64;

impl Stylizer {
    pub fn new(synonyms: BTreeMap<String, String>) -> Self {
        Self {
            synonyms,
            possessive: Regex::new(r"\b([Tt]he) ([A-Za-z]+) of the ([A-Za-z]+) is\b").unwrap(),
            word: Regex::new(r"[A-Za-z]+").unwrap(),
        }
    }

    fn pass(&self, text: &str) -> String {
        let text = self.possessive.replace_all(text, "$1 $3's $2 is");
        self.word
            .replace_all(&text, |caps: &regex::Captures<'_>| {
                let w = &caps[0];
                match self.synonyms.get(&w.to_lowercase()) {
                    None => w.to_string(),
                    Some(to) => match_case(w, to),
                }
            })
            .into_owned()
    }

    pub fn stylize(&self, text: &str) -> String {
        let mut current = text.to_string();
        for _ in 0..MAX_STYLE_PASSES {
            let next = self.pass(&current);
            if next == current {
                break;
            }
            current = next;
        }
        current
    }
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.len() > 1 && original.chars().all(|c| c.is_ascii_uppercase()) {
        replacement.to_uppercase()
    } else if original.starts_with(|c: char| c.is_ascii_uppercase()) {
        let mut chars = replacement.chars();
        chars.next().map(|f| f.to_uppercase().chain(chars).collect()).unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

/// Stylizes with the built-in synonym table.
pub fn reference_stylize(answer: &str) -> String {
    static STYLIZER: OnceLock<Stylizer> = OnceLock::new();
    STYLIZER
        .get_or_init(|| Stylizer::new(ReferenceModel::builtin().synonyms.clone()))
        .stylize(answer)
}

pub const REVIEW_ACCEPT: &str = "The Revised Answer is fine.";
pub const REVIEW_REJECT: &str = "The Revised Answer changes the content words of the Original Answer.";
const EXPLAIN_CHANGED: &str = "Reworded to match my style.";
const EXPLAIN_UNCHANGED: &str = "The answer already matches my style.";

#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    name: String,
    model: ReferenceModel,
    stylizer: Stylizer,
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        Self::new("reference", ReferenceModel::builtin().clone())
    }
}

impl ReferenceBackend {
    pub fn new(name: impl Into<String>, model: ReferenceModel) -> Self {
        let stylizer = Stylizer::new(model.synonyms.clone());
        Self { name: name.into(), model, stylizer }
    }

    pub fn model(&self) -> &ReferenceModel {
        &self.model
    }

    pub fn stylize(&self, text: &str) -> String {
        self.stylizer.stylize(text)
    }

    pub fn same_content(&self, original: &str, revised: &str) -> bool {
        self.model.content_words(original) == self.model.content_words(revised)
    }
}

impl Backend for ReferenceBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &RenderedPrompt, config: &SamplingConfig) -> Result<String, BackendError> {
        let prompt_tokens = prompt.text.split_whitespace().count();
        if prompt_tokens > config.max_length {
            return Err(BackendError::ContextOverflow { attempts: 1, prompt_tokens, limit: config.max_length });
        }
        match dissect(&prompt.text) {
            Some(PromptParts::Rewrite { answer, .. }) => {
                let revised = self.stylize(answer);
                let explanation = if revised == answer { EXPLAIN_UNCHANGED } else { EXPLAIN_CHANGED };
                Ok(format!("Revised Answer: {revised}\nExplanation: {explanation}"))
            }
            Some(PromptParts::Review { original, revised, .. }) => Ok(if self.same_content(original, revised) {
                REVIEW_ACCEPT.to_string()
            } else {
                REVIEW_REJECT.to_string()
            }),
            None => Err(BackendError::Refusal {
                attempts: 1,
                status: 400,
                message: "prompt has no Question/Answer blocks".into(),
            }),
        }
    }

    fn score_tokens(&self, context: &str, continuation: &str) -> Result<Vec<ScoredToken>, BackendError> {
        let tokens = tile(continuation);
        if tokens.is_empty() {
            return Err(BackendError::TokenizationMismatch("continuation has no tokens".into()));
        }
        let mut prev = last_word(context);
        let mut out = Vec::with_capacity(tokens.len());
        for (token_text, word) in tokens {
            let p = self.model.prob(prev, word).ok_or_else(|| {
                BackendError::TokenizationMismatch(format!("`{word}` after `{prev}` is outside the model support"))
            })?;
            out.push(ScoredToken { token_text: token_text.to_string(), logprob: p.ln() });
            prev = word;
        }
        Ok(out)
    }
}
