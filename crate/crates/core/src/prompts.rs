//! Rewrite and review prompt rendering.
//!
//! Requirement paragraphs are plain-text assets (one per rewrite variant
//! plus one for review). The built-in copies are compiled in; a directory
//! of same-named files overrides them. Every asset's SHA-256 is exposed so
//! run reports can record exactly which wording produced a corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const QUESTION_LABEL: &str = "Question: ";
pub const ANSWER_LABEL: &str = "Answer: ";
pub const ORIGINAL_LABEL: &str = "Original Answer: ";
pub const REVISED_LABEL: &str = "Revised Answer: ";
const BLOCK_SEP: &str = "\n\n";

/// Canonical review wording version, bumped whenever review.txt changes.
pub const REVIEW_ASSET_VERSION: &str = "review-v1";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{0} is empty")]
    EmptyField(&'static str),
    #[error("reading prompt asset {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum RewriteVariant {
    #[default]
    No1,
    No2,
    No3,
    PlainEnglish,
    NoAlign,
}

impl RewriteVariant {
    pub const ALL: [RewriteVariant; 5] = [
        RewriteVariant::No1,
        RewriteVariant::No2,
        RewriteVariant::No3,
        RewriteVariant::PlainEnglish,
        RewriteVariant::NoAlign,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            RewriteVariant::No1 => "no1",
            RewriteVariant::No2 => "no2",
            RewriteVariant::No3 => "no3",
            RewriteVariant::PlainEnglish => "plain",
            RewriteVariant::NoAlign => "noalign",
        }
    }

    fn asset_file(self) -> &'static str {
        match self {
            RewriteVariant::No1 => "rewrite_no1.txt",
            RewriteVariant::No2 => "rewrite_no2.txt",
            RewriteVariant::No3 => "rewrite_no3.txt",
            RewriteVariant::PlainEnglish => "rewrite_plain.txt",
            RewriteVariant::NoAlign => "rewrite_noalign.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            RewriteVariant::No1 => include_str!("../assets/prompts/rewrite_no1.txt"),
            RewriteVariant::No2 => include_str!("../assets/prompts/rewrite_no2.txt"),
            RewriteVariant::No3 => include_str!("../assets/prompts/rewrite_no3.txt"),
            RewriteVariant::PlainEnglish => include_str!("../assets/prompts/rewrite_plain.txt"),
            RewriteVariant::NoAlign => include_str!("../assets/prompts/rewrite_noalign.txt"),
        }
    }
}

impl fmt::Display for RewriteVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for RewriteVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RewriteVariant::ALL
            .into_iter()
            .find(|v| v.cli_name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected no1|no2|no3|plain|noalign)"))
    }
}

const REVIEW_FILE: &str = "review.txt";
const REVIEW_BUILTIN: &str = include_str!("../assets/prompts/review.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleLayout {
    /// Whole prompt as one user-role message, no system message.
    SingleUserMessage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub role_layout: RoleLayout,
}

impl RenderedPrompt {
    fn single(text: String) -> Self {
        Self { text, role_layout: RoleLayout::SingleUserMessage }
    }
}

/// Requirement paragraphs for every variant plus review.
#[derive(Debug, Clone)]
pub struct PromptSet {
    rewrite: BTreeMap<RewriteVariant, String>,
    review: String,
}

fn clean(asset: &str) -> String {
    asset.trim_end_matches(['\n', '\r']).to_string()
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            rewrite: RewriteVariant::ALL.iter().map(|v| (*v, clean(v.builtin()))).collect(),
            review: clean(REVIEW_BUILTIN),
        }
    }

    /// Built-in assets, overridden by any same-named file found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            match std::fs::read_to_string(&path) {
                Ok(text) => Ok(Some(clean(&text))),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(PromptError::Io { path: path.display().to_string(), source }),
            }
        };
        let mut set = Self::builtin();
        for v in RewriteVariant::ALL {
            if let Some(text) = read(v.asset_file())? {
                set.rewrite.insert(v, text);
            }
        }
        if let Some(text) = read(REVIEW_FILE)? {
            set.review = text;
        }
        Ok(set)
    }

    pub fn rewrite_requirement(&self, variant: RewriteVariant) -> &str {
        &self.rewrite[&variant]
    }

    pub fn review_requirement(&self) -> &str {
        &self.review
    }

    /// Asset file name -> SHA-256 hex, for run provenance.
    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self
            .rewrite
            .iter()
            .map(|(v, text)| (v.asset_file().to_string(), sha256_hex(text)))
            .collect();
        out.insert(REVIEW_FILE.to_string(), sha256_hex(&self.review));
        out
    }

    pub fn render_rewrite(
        &self,
        variant: RewriteVariant,
        question: &str,
        answer: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        non_empty(question, "question")?;
        non_empty(answer, "answer")?;
        Ok(RenderedPrompt::single(format!(
            "{req}{BLOCK_SEP}{QUESTION_LABEL}{question}{BLOCK_SEP}{ANSWER_LABEL}{answer}",
            req = self.rewrite_requirement(variant),
        )))
    }

    pub fn render_review(
        &self,
        question: &str,
        original: &str,
        revised: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        non_empty(question, "question")?;
        non_empty(original, "original answer")?;
        non_empty(revised, "revised answer")?;
        Ok(RenderedPrompt::single(format!(
            "{req}{BLOCK_SEP}{QUESTION_LABEL}{question}{BLOCK_SEP}{ORIGINAL_LABEL}{original}{BLOCK_SEP}{REVISED_LABEL}{revised}",
            req = self.review,
        )))
    }
}

fn non_empty(text: &str, what: &'static str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        Err(PromptError::EmptyField(what))
    } else {
        Ok(())
    }
}

/// Renders a rewrite prompt with the built-in assets.
pub fn render_rewrite_prompt(
    variant: RewriteVariant,
    question: &str,
    answer: &str,
) -> Result<RenderedPrompt, PromptError> {
    PromptSet::builtin().render_rewrite(variant, question, answer)
}

/// Renders a review prompt with the built-in assets.
pub fn render_review_prompt(question: &str, original: &str, revised: &str) -> Result<RenderedPrompt, PromptError> {
    PromptSet::builtin().render_review(question, original, revised)
}

/// A rendered prompt taken apart again. Used by in-process backends that
/// have to act on the content of a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptParts<'a> {
    Rewrite { requirement: &'a str, question: &'a str, answer: &'a str },
    Review { requirement: &'a str, question: &'a str, original: &'a str, revised: &'a str },
}

impl<'a> PromptParts<'a> {
    pub fn question(&self) -> &'a str {
        match self {
            PromptParts::Rewrite { question, .. } | PromptParts::Review { question, .. } => question,
        }
    }
}

/// Splits prompt text at the first occurrence of each block label, so a
/// question that itself contains a block label is split ambiguously.
pub fn dissect(text: &str) -> Option<PromptParts<'_>> {
    let q_marker = format!("{BLOCK_SEP}{QUESTION_LABEL}");
    let (requirement, rest) = text.split_once(q_marker.as_str())?;
    let o_marker = format!("{BLOCK_SEP}{ORIGINAL_LABEL}");
    if let Some((question, rest)) = rest.split_once(o_marker.as_str()) {
        let r_marker = format!("{BLOCK_SEP}{REVISED_LABEL}");
        let (original, revised) = rest.split_once(r_marker.as_str())?;
        return Some(PromptParts::Review { requirement, question, original, revised });
    }
    let a_marker = format!("{BLOCK_SEP}{ANSWER_LABEL}");
    let (question, answer) = rest.split_once(a_marker.as_str())?;
    Some(PromptParts::Rewrite { requirement, question, answer })
}
