//! Blind human assessment of writing manner.
//!
//! A session holds two anchor pools (responses written by the inner LLM and
//! answers from the original dataset) and a set of accepted rewrites to be
//! judged. Raters see the anchors as two anonymous panels, "Style A" and
//! "Style B", whose assignment is drawn per session; they never see where
//! an evaluation sample came from.

mod api;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aligner::{OutcomeCategory, RoundOutcome};
use crate::corpus::RoundKey;

pub use api::{serve, ApiResponse, AssessmentService, ServerHandle};

pub const SESSION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum AssessError {
    #[error("insufficient {pool} pool: need {needed}, have {available}")]
    InsufficientPool { pool: &'static str, needed: usize, available: usize },
    #[error("unknown sample `{0}`")]
    UnknownSample(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("rater id is empty")]
    EmptyRater,
    #[error("{missing} ballot(s) missing; request partial aggregation to proceed")]
    IncompleteBallots { missing: usize },
    #[error("no ballots cast")]
    NoBallots,
    #[error("session file: {0}")]
    Io(String),
    #[error("session file schema {found}, expected {expected}")]
    Schema { found: u32, expected: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoteOption {
    InnerLLM,
    OriginalDataset,
    NoneOfBoth,
}

impl VoteOption {
    pub const ALL: [VoteOption; 3] = [VoteOption::InnerLLM, VoteOption::OriginalDataset, VoteOption::NoneOfBoth];

    fn index(self) -> usize {
        self as usize
    }
}

/// What a rater clicks: a panel label, never a provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelChoice {
    StyleA,
    StyleB,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionSizes {
    pub llm_anchors: usize,
    pub dataset_anchors: usize,
    pub eval_samples: usize,
}

impl Default for SessionSizes {
    fn default() -> Self {
        Self { llm_anchors: 20, dataset_anchors: 20, eval_samples: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub sample_id: String,
    pub text: String,
    pub source: RoundKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub rater_id: String,
    pub sample_id: String,
    pub previous: VoteOption,
    pub new: VoteOption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentSession {
    pub schema_version: u32,
    pub session_id: String,
    pub seed: u64,
    #[serde(default)]
    pub model_label: String,
    pub llm_anchors: Vec<PoolItem>,
    pub dataset_anchors: Vec<PoolItem>,
    pub eval_samples: Vec<EvalSample>,
    /// Indices into `eval_samples` in the order raters see them.
    pub presentation_order: Vec<usize>,
    /// Whether the inner-LLM anchors are shown as "Style A".
    pub llm_is_style_a: bool,
    /// rater -> sample -> vote
    pub ballots: BTreeMap<String, BTreeMap<String, VoteOption>>,
    pub audit: Vec<AuditEntry>,
    pub closed: bool,
}

fn draw(rng: &mut ChaCha8Rng, items: usize, amount: usize, pool: &'static str) -> Result<Vec<usize>, AssessError> {
    if items < amount {
        return Err(AssessError::InsufficientPool { pool, needed: amount, available: items });
    }
    Ok(sample(rng, items, amount).into_vec())
}

fn opaque_id(session_id: &str, index: usize) -> String {
    let digest = Sha256::digest(format!("{session_id}/{index}").as_bytes());
    format!("s{}", &hex::encode(digest)[..10])
}

/// Builds a session by seeded sampling without replacement.
///
/// Evaluation samples come only from accepted rewrites; dataset anchors
/// whose id names one of the chosen rounds (`record#round`) are excluded so
/// anchors and evaluation samples stay disjoint.
pub fn build_session(
    llm_pool: &[PoolItem],
    dataset_pool: &[PoolItem],
    outcome_log: &[RoundOutcome],
    seed: u64,
    sizes: SessionSizes,
) -> Result<AssessmentSession, AssessError> {
    let session_id = format!("session-{seed}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accepted: Vec<&RoundOutcome> =
        outcome_log.iter().filter(|o| o.category() == OutcomeCategory::Accepted).collect();
    let eval_idx = draw(&mut rng, accepted.len(), sizes.eval_samples, "accepted outcome")?;
    let mut eval_samples: Vec<EvalSample> = eval_idx
        .iter()
        .enumerate()
        .map(|(i, &j)| EvalSample {
            sample_id: opaque_id(&session_id, i),
            text: accepted[j].final_answer.clone(),
            source: accepted[j].round.key(),
        })
        .collect();
    let mut seen = HashSet::new();
    for (i, s) in eval_samples.iter_mut().enumerate() {
        if !seen.insert(s.sample_id.clone()) {
            s.sample_id = format!("{}-{i}", s.sample_id);
            seen.insert(s.sample_id.clone());
        }
    }

    let chosen: BTreeSet<String> = eval_samples.iter().map(|s| s.source.to_string()).collect();
    let dataset_candidates: Vec<&PoolItem> = dataset_pool.iter().filter(|p| !chosen.contains(&p.id)).collect();
    let dataset_idx = draw(&mut rng, dataset_candidates.len(), sizes.dataset_anchors, "dataset anchor")?;
    let llm_idx = draw(&mut rng, llm_pool.len(), sizes.llm_anchors, "LLM anchor")?;

    let mut presentation_order: Vec<usize> = (0..eval_samples.len()).collect();
    rand::seq::SliceRandom::shuffle(presentation_order.as_mut_slice(), &mut rng);
    let llm_is_style_a = rng.gen_bool(0.5);

    Ok(AssessmentSession {
        schema_version: SESSION_SCHEMA_VERSION,
        session_id,
        seed,
        model_label: String::new(),
        llm_anchors: llm_idx.into_iter().map(|i| llm_pool[i].clone()).collect(),
        dataset_anchors: dataset_idx.into_iter().map(|i| dataset_candidates[i].clone()).collect(),
        eval_samples,
        presentation_order,
        llm_is_style_a,
        ballots: BTreeMap::new(),
        audit: Vec::new(),
        closed: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteReceipt {
    pub overwrote: bool,
    pub ballot_count: usize,
}

/// Percentages per option in tenths of a percent, summing to exactly 1000.
///
/// Each share is floored, then the leftover tenths go to the largest
/// remainders (ties to the earlier option). Whenever plain half-up rounding
/// already sums to 100.0 this gives the same result.
pub fn percent_tenths(counts: [usize; 3]) -> [u32; 3] {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return [0; 3];
    }
    let mut tenths = [0u32; 3];
    let mut remainders = [(0u128, 0usize); 3];
    for (i, &c) in counts.iter().enumerate() {
        let scaled = c as u128 * 1000;
        tenths[i] = (scaled / total) as u32;
        remainders[i] = (scaled % total, i);
    }
    let leftover = 1000 - tenths.iter().sum::<u32>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(leftover as usize) {
        tenths[i] += 1;
    }
    tenths
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteAggregate {
    pub inner_llm: f64,
    pub original_dataset: f64,
    pub none_of_both: f64,
    pub counts: [usize; 3],
    pub total_votes: usize,
    pub rater_count: usize,
    pub sample_count: usize,
    /// Ballots still missing for complete coverage.
    pub incomplete: usize,
}

impl VoteAggregate {
    pub fn from_counts(counts: [usize; 3], rater_count: usize, sample_count: usize) -> Self {
        let t = percent_tenths(counts);
        let total_votes = counts.iter().sum();
        Self {
            inner_llm: t[0] as f64 / 10.0,
            original_dataset: t[1] as f64 / 10.0,
            none_of_both: t[2] as f64 / 10.0,
            counts,
            total_votes,
            rater_count,
            sample_count,
            incomplete: (rater_count * sample_count).saturating_sub(total_votes),
        }
    }

    pub fn percentages(&self) -> [f64; 3] {
        [self.inner_llm, self.original_dataset, self.none_of_both]
    }

    pub fn render_text(&self, model: &str) -> String {
        let mut out = format!("{:<16} {:>10} {:>17} {:>13}\n", "Model", "inner LLM", "original dataset", "none of both");
        out.push_str(&format!(
            "{model:<16} {:>9.1}% {:>16.1}% {:>12.1}%\n",
            self.inner_llm, self.original_dataset, self.none_of_both
        ));
        if self.incomplete > 0 {
            out.push_str(&format!("partial: {} ballot(s) missing\n", self.incomplete));
        }
        out
    }
}

impl AssessmentSession {
    pub fn sample(&self, sample_id: &str) -> Option<&EvalSample> {
        self.eval_samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn ordered_samples(&self) -> impl Iterator<Item = &EvalSample> {
        self.presentation_order.iter().map(|&i| &self.eval_samples[i])
    }

    pub fn ballot_count(&self) -> usize {
        self.ballots.values().map(BTreeMap::len).sum()
    }

    pub fn panel_to_option(&self, choice: PanelChoice) -> VoteOption {
        match (choice, self.llm_is_style_a) {
            (PanelChoice::StyleA, true) | (PanelChoice::StyleB, false) => VoteOption::InnerLLM,
            (PanelChoice::StyleA, false) | (PanelChoice::StyleB, true) => VoteOption::OriginalDataset,
            (PanelChoice::None, _) => VoteOption::NoneOfBoth,
        }
    }

    pub fn record_vote(&mut self, sample_id: &str, rater_id: &str, option: VoteOption) -> Result<VoteReceipt, AssessError> {
        if self.closed {
            return Err(AssessError::SessionClosed);
        }
        if rater_id.trim().is_empty() {
            return Err(AssessError::EmptyRater);
        }
        if self.sample(sample_id).is_none() {
            return Err(AssessError::UnknownSample(sample_id.to_string()));
        }
        let previous = self.ballots.entry(rater_id.to_string()).or_default().insert(sample_id.to_string(), option);
        if let Some(previous) = previous {
            self.audit.push(AuditEntry {
                rater_id: rater_id.to_string(),
                sample_id: sample_id.to_string(),
                previous,
                new: option,
            });
        }
        Ok(VoteReceipt { overwrote: previous.is_some(), ballot_count: self.ballot_count() })
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Per-option percentages over all ballots. Unless `partial`, every
    /// rater who voted must have voted on every sample.
    pub fn aggregate(&self, partial: bool) -> Result<VoteAggregate, AssessError> {
        let mut counts = [0usize; 3];
        for votes in self.ballots.values() {
            for v in votes.values() {
                counts[v.index()] += 1;
            }
        }
        let agg = VoteAggregate::from_counts(counts, self.ballots.len(), self.eval_samples.len());
        if agg.total_votes == 0 {
            return Err(AssessError::NoBallots);
        }
        if agg.incomplete > 0 && !partial {
            return Err(AssessError::IncompleteBallots { missing: agg.incomplete });
        }
        Ok(agg)
    }

    pub fn save(&self, path: &Path) -> Result<(), AssessError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| AssessError::Io(e.to_string()))?;
        write_atomic(path, json.as_bytes()).map_err(|e| AssessError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, AssessError> {
        let text = std::fs::read_to_string(path).map_err(|e| AssessError::Io(format!("{}: {e}", path.display())))?;
        let probe: serde_json::Value = serde_json::from_str(&text).map_err(|e| AssessError::Io(e.to_string()))?;
        let found = probe.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SESSION_SCHEMA_VERSION {
            return Err(AssessError::Schema { found, expected: SESSION_SCHEMA_VERSION });
        }
        serde_json::from_value(probe).map_err(|e| AssessError::Io(e.to_string()))
    }
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
