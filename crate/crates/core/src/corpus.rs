//! Instruction dataset model: parsing, format classification, round
//! splitting and reassembly.
//!
//! Datasets use the LLaVA-style JSON list layout:
//!
//! ```json
//! [{"id": "...", "image": "...", "conversations": [{"from": "human", "value": "..."}, ...]}]
//! ```
//!
//! Only answers of soft-format records may ever be replaced; every other
//! byte of a dataset survives a parse/serialize cycle unchanged.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("malformed input at record {index}: {reason}")]
    MalformedInput { index: usize, reason: String },
    #[error("malformed input: {0}")]
    MalformedJson(String),
    #[error("illegal replacement for {key}: {reason}")]
    IllegalReplacement { key: RoundKey, reason: String },
    #[error("tag map line {line}: {reason}")]
    TagMap { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    Human,
    Assistant,
}

impl Speaker {
    fn wire_label(self) -> &'static str {
        match self {
            Speaker::Human => "human",
            Speaker::Assistant => "gpt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationTurn {
    pub speaker: Speaker,
    pub text: String,
}

/// Where a record's source tag came from. Only tags read from the record
/// itself are written back out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagOrigin {
    Record,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionRecord {
    pub id: String,
    pub image_ref: Option<String>,
    pub turns: Vec<ConversationTurn>,
    pub source_tag: String,
    pub tag_origin: TagOrigin,
    /// Unrecognised top-level fields, kept in input order.
    pub extra: Map<String, Value>,
}

impl InstructionRecord {
    pub fn pair_count(&self) -> usize {
        self.turns.len() / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HardSubtype {
    WordPhraseVQA,
    Choice,
    ShortCaption,
    Grounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FormatClass {
    SoftFormat,
    HardFormat(HardSubtype),
    TextOnly,
}

impl FormatClass {
    pub const ALL: [FormatClass; 6] = [
        FormatClass::SoftFormat,
        FormatClass::HardFormat(HardSubtype::WordPhraseVQA),
        FormatClass::HardFormat(HardSubtype::Choice),
        FormatClass::HardFormat(HardSubtype::ShortCaption),
        FormatClass::HardFormat(HardSubtype::Grounding),
        FormatClass::TextOnly,
    ];

    /// Config-file name of the class.
    pub fn name(self) -> &'static str {
        match self {
            FormatClass::SoftFormat => "soft",
            FormatClass::HardFormat(HardSubtype::WordPhraseVQA) => "word_phrase",
            FormatClass::HardFormat(HardSubtype::Choice) => "choice",
            FormatClass::HardFormat(HardSubtype::ShortCaption) => "short_caption",
            FormatClass::HardFormat(HardSubtype::Grounding) => "grounding",
            FormatClass::TextOnly => "text_only",
        }
    }

    pub fn is_soft(self) -> bool {
        self == FormatClass::SoftFormat
    }

    /// Coarse group used in partition summaries: soft, hard or text_only.
    pub fn group(self) -> &'static str {
        match self {
            FormatClass::SoftFormat => "soft",
            FormatClass::HardFormat(_) => "hard",
            FormatClass::TextOnly => "text_only",
        }
    }
}

impl fmt::Display for FormatClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FormatClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown format class `{s}`"))
    }
}

/// Result of [`classify_format`]; `heuristic` is set when the source tag was
/// missing from the tag map and the content fallback decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub class: FormatClass,
    pub heuristic: bool,
}

/// Addresses one question/answer round inside a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoundKey {
    pub record_id: String,
    pub round_index: usize,
}

impl RoundKey {
    pub fn new(record_id: impl Into<String>, round_index: usize) -> Self {
        Self { record_id: record_id.into(), round_index }
    }
}

impl fmt::Display for RoundKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.record_id, self.round_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARound {
    pub record_id: String,
    pub round_index: usize,
    pub question: String,
    pub answer: String,
}

impl QARound {
    pub fn key(&self) -> RoundKey {
        RoundKey::new(self.record_id.clone(), self.round_index)
    }
}

#[derive(Deserialize)]
struct WireTurn {
    from: String,
    value: String,
}

/// Parses a dataset file. `file_tag` is the source tag used for records
/// without an explicit `source` field.
///
/// Parsing is all-or-nothing: the first bad record fails the whole file.
pub fn parse_dataset(raw: &[u8], file_tag: &str) -> Result<Vec<InstructionRecord>, CorpusError> {
    let value: Value =
        serde_json::from_slice(raw).map_err(|e| CorpusError::MalformedJson(e.to_string()))?;
    let Value::Array(items) = value else {
        return Err(CorpusError::MalformedJson("top level is not a JSON array".into()));
    };

    let mut seen = HashSet::with_capacity(items.len());
    let mut records = Vec::with_capacity(items.len());
    for (index, item) in items.into_iter().enumerate() {
        let bad = |reason: String| CorpusError::MalformedInput { index, reason };
        let Value::Object(mut obj) = item else {
            return Err(bad("record is not an object".into()));
        };
        let id = match obj.shift_remove("id") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(bad("`id` is not a string".into())),
            None => return Err(bad("missing `id`".into())),
        };
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id `{id}`")));
        }
        let image_ref = match obj.shift_remove("image") {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(bad("`image` is not a string".into())),
        };
        let conversations = obj
            .shift_remove("conversations")
            .ok_or_else(|| bad("missing `conversations`".into()))?;
        let wire: Vec<WireTurn> = serde_json::from_value(conversations)
            .map_err(|e| bad(format!("bad `conversations`: {e}")))?;
        let (source_tag, tag_origin) = match obj.shift_remove("source") {
            None => (file_tag.to_string(), TagOrigin::File),
            Some(Value::String(s)) => (s, TagOrigin::Record),
            Some(_) => return Err(bad("`source` is not a string".into())),
        };

        if wire.is_empty() {
            return Err(bad("empty conversation".into()));
        }
        if !wire.len().is_multiple_of(2) {
            return Err(bad(format!("odd turn count {}", wire.len())));
        }
        let mut turns = Vec::with_capacity(wire.len());
        for (pos, turn) in wire.into_iter().enumerate() {
            let speaker = match turn.from.as_str() {
                "human" => Speaker::Human,
                "gpt" => Speaker::Assistant,
                other => return Err(bad(format!("unknown speaker label `{other}` at turn {pos}"))),
            };
            let expected = if pos % 2 == 0 { Speaker::Human } else { Speaker::Assistant };
            if speaker != expected {
                return Err(bad(format!(
                    "turn {pos} is `{}` but speakers must alternate starting with human",
                    turn.from
                )));
            }
            turns.push(ConversationTurn { speaker, text: turn.value });
        }

        records.push(InstructionRecord { id, image_ref, turns, source_tag, tag_origin, extra: obj });
    }
    Ok(records)
}

fn record_to_value(record: &InstructionRecord) -> Value {
    let mut obj = Map::new();
    obj.insert("id".into(), Value::String(record.id.clone()));
    if let Some(image) = &record.image_ref {
        obj.insert("image".into(), Value::String(image.clone()));
    }
    let turns = record
        .turns
        .iter()
        .map(|t| {
            let mut turn = Map::new();
            turn.insert("from".into(), Value::String(t.speaker.wire_label().into()));
            turn.insert("value".into(), Value::String(t.text.clone()));
            Value::Object(turn)
        })
        .collect();
    obj.insert("conversations".into(), Value::Array(turns));
    if record.tag_origin == TagOrigin::Record {
        obj.insert("source".into(), Value::String(record.source_tag.clone()));
    }
    for (k, v) in &record.extra {
        obj.insert(k.clone(), v.clone());
    }
    Value::Object(obj)
}

/// Serializes records with the fixed field order id, image, conversations,
/// source. `pretty` selects two-space indentation.
pub fn serialize_dataset(records: &[InstructionRecord], pretty: bool) -> String {
    let value = Value::Array(records.iter().map(record_to_value).collect());
    let mut out = if pretty {
        serde_json::to_string_pretty(&value)
    } else {
        serde_json::to_string(&value)
    }
    .expect("JSON values always serialize");
    out.push('\n');
    out
}

/// Mapping from source tag to format class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagMap {
    entries: BTreeMap<String, FormatClass>,
}

impl TagMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: impl Into<String>, class: FormatClass) {
        self.entries.insert(tag.into(), class);
    }

    pub fn get(&self, tag: &str) -> Option<FormatClass> {
        self.entries.get(tag).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, FormatClass)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Tag map for the twelve LLaVA-1.5 mixture sources.
    pub fn llava_default() -> Self {
        let mut map = Self::new();
        for (tag, class) in LLAVA_SOURCES {
            map.insert(*tag, *class);
        }
        map
    }

    /// Parses `tag = class` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut map = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| CorpusError::TagMap { line: n + 1, reason };
            let (tag, class) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| err("expected `tag = class`".into()))?;
            let tag = tag.trim();
            if tag.is_empty() {
                return Err(err("empty tag".into()));
            }
            let class = class.trim().parse::<FormatClass>().map_err(err)?;
            map.insert(tag, class);
        }
        Ok(map)
    }
}

/// LLaVA-1.5 mixture sources and their classes.
pub const LLAVA_SOURCES: &[(&str, FormatClass)] = &[
    ("llava_conv", FormatClass::SoftFormat),
    ("llava_detail", FormatClass::SoftFormat),
    ("llava_complex", FormatClass::SoftFormat),
    ("vqav2", FormatClass::HardFormat(HardSubtype::WordPhraseVQA)),
    ("gqa", FormatClass::HardFormat(HardSubtype::WordPhraseVQA)),
    ("okvqa", FormatClass::HardFormat(HardSubtype::WordPhraseVQA)),
    ("ocrvqa", FormatClass::HardFormat(HardSubtype::WordPhraseVQA)),
    ("a_okvqa", FormatClass::HardFormat(HardSubtype::Choice)),
    ("textcaps", FormatClass::HardFormat(HardSubtype::ShortCaption)),
    ("refcoco", FormatClass::HardFormat(HardSubtype::Grounding)),
    ("vg", FormatClass::HardFormat(HardSubtype::Grounding)),
    ("sharegpt", FormatClass::TextOnly),
];

fn looks_like_choice(answer: &str) -> bool {
    let a = answer.trim().trim_end_matches('.');
    a.len() == 1 && matches!(a.as_bytes()[0], b'A'..=b'E')
}

fn looks_like_box(answer: &str) -> bool {
    let a = answer.trim();
    let Some(inner) = a.strip_prefix('[').and_then(|s| s.strip_suffix(']')) else {
        return false;
    };
    let parts: Vec<_> = inner.split(',').map(str::trim).collect();
    parts.len() == 4 && parts.iter().all(|p| p.parse::<f64>().is_ok())
}

fn heuristic_class(record: &InstructionRecord) -> FormatClass {
    if record.image_ref.is_none() {
        return FormatClass::TextOnly;
    }
    let answers: Vec<&str> = record
        .turns
        .iter()
        .filter(|t| t.speaker == Speaker::Assistant)
        .map(|t| t.text.as_str())
        .collect();
    if answers.iter().all(|a| looks_like_choice(a)) {
        FormatClass::HardFormat(HardSubtype::Choice)
    } else if answers.iter().all(|a| looks_like_box(a)) {
        FormatClass::HardFormat(HardSubtype::Grounding)
    } else if answers.iter().all(|a| a.split_whitespace().count() <= 5) {
        FormatClass::HardFormat(HardSubtype::WordPhraseVQA)
    } else {
        FormatClass::SoftFormat
    }
}

/// Tag-driven classification with a content fallback for unknown tags.
pub fn classify_format(record: &InstructionRecord, tag_map: &TagMap) -> Classification {
    match tag_map.get(&record.source_tag) {
        Some(class) => Classification { class, heuristic: false },
        None => Classification { class: heuristic_class(record), heuristic: true },
    }
}

/// One round per Human/Assistant pair, in order.
pub fn split_rounds(record: &InstructionRecord) -> Vec<QARound> {
    record
        .turns
        .chunks_exact(2)
        .enumerate()
        .map(|(round_index, pair)| QARound {
            record_id: record.id.clone(),
            round_index,
            question: pair[0].text.clone(),
            answer: pair[1].text.clone(),
        })
        .collect()
}

/// Rounds of every soft-format record, in corpus order.
pub fn soft_rounds(records: &[InstructionRecord], tag_map: &TagMap) -> Vec<QARound> {
    records
        .iter()
        .filter(|r| classify_format(r, tag_map).class.is_soft())
        .flat_map(split_rounds)
        .collect()
}

/// Applies answer replacements, keeping order and every untouched byte.
pub fn reassemble(
    records: &[InstructionRecord],
    tag_map: &TagMap,
    replacements: &BTreeMap<RoundKey, String>,
) -> Result<Vec<InstructionRecord>, CorpusError> {
    let index: BTreeMap<&str, usize> =
        records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut out = records.to_vec();
    for (key, answer) in replacements {
        let illegal = |reason: &str| CorpusError::IllegalReplacement {
            key: key.clone(),
            reason: reason.to_string(),
        };
        let &i = index.get(key.record_id.as_str()).ok_or_else(|| illegal("no such record"))?;
        let class = classify_format(&records[i], tag_map).class;
        if !class.is_soft() {
            return Err(illegal(&format!("record is {class}, only soft-format answers may change")));
        }
        let turn = out[i]
            .turns
            .get_mut(key.round_index * 2 + 1)
            .ok_or_else(|| illegal("no such round"))?;
        turn.text = answer.clone();
    }
    Ok(out)
}

/// Record counts per source tag and per class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PartitionCounts {
    pub by_tag: BTreeMap<String, (FormatClass, usize)>,
    pub soft: usize,
    pub hard: usize,
    pub text_only: usize,
    pub heuristic: usize,
}

impl PartitionCounts {
    pub fn total(&self) -> usize {
        self.soft + self.hard + self.text_only
    }

    /// Text table with one row per source, grouped by class, then class
    /// totals.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(&str, &str, usize)> = Vec::new();
        for class in FormatClass::ALL {
            for (tag, (c, n)) in &self.by_tag {
                if *c == class {
                    rows.push((class.name(), tag.as_str(), *n));
                }
            }
        }
        let mut out = format!("{:<14} {:<16} {:>8}\n", "class", "source", "records");
        for (class, tag, n) in rows {
            out.push_str(&format!("{class:<14} {tag:<16} {n:>8}\n"));
        }
        out.push_str(&format!("soft={}\nhard={}\ntext_only={}\n", self.soft, self.hard, self.text_only));
        out
    }
}

pub fn partition_counts(records: &[InstructionRecord], tag_map: &TagMap) -> PartitionCounts {
    let mut counts = PartitionCounts::default();
    for record in records {
        let c = classify_format(record, tag_map);
        if c.heuristic {
            counts.heuristic += 1;
        }
        match c.class.group() {
            "soft" => counts.soft += 1,
            "hard" => counts.hard += 1,
            _ => counts.text_only += 1,
        }
        counts.by_tag.entry(record.source_tag.clone()).or_insert((c.class, 0)).1 += 1;
    }
    counts
}
