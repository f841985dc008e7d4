//! Fixture corpora shared by the integration and acceptance tests.
#![allow(dead_code)]

use manner_align::corpus::parse_dataset;
use manner_align::{InstructionRecord, TagMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const NOUNS: &[&str] = &["car", "house", "kite", "boat", "bus", "dog", "lamp", "table", "automobile", "bicycle"];
const ATTRS: &[&str] = &["colour", "flavour", "behaviour", "size", "centre", "shape"];
const VALUES: &[&str] = &["red", "grey", "bright", "colourful", "large", "small", "unusual"];
const PLACES: &[&str] = &["theatre", "harbour", "kerb", "park", "neighbourhood", "window"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let noun = pick(rng, NOUNS);
    match rng.gen_range(0..5) {
        0 => format!("The {} of the {noun} is {}.", pick(rng, ATTRS), pick(rng, VALUES)),
        1 => format!("A {} {noun} stands near the {}.", pick(rng, VALUES), pick(rng, PLACES)),
        2 => format!("The {noun} is parked by the {}. Its {} looks {}.", pick(rng, PLACES), pick(rng, ATTRS), pick(rng, VALUES)),
        3 => format!("I can see a {noun} and a {} in the picture.", pick(rng, NOUNS)),
        _ => format!("The {noun} appears {} in the light.", pick(rng, VALUES)),
    }
}

fn answer(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| sentence(rng)).collect::<Vec<_>>().join(" ")
}

fn turns(pairs: &[(String, String)]) -> Value {
    Value::Array(
        pairs
            .iter()
            .flat_map(|(q, a)| [json!({"from": "human", "value": q}), json!({"from": "gpt", "value": a})])
            .collect(),
    )
}

/// JSON array with `soft_rounds` soft-format rounds spread over records of
/// one to three rounds, interleaved with short-answer records that must
/// pass through untouched.
pub fn soft_corpus_json(soft_rounds: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let mut left = soft_rounds;
    let mut rec = 0usize;
    while left > 0 {
        let n = rng.gen_range(1..=3).min(left);
        let pairs: Vec<(String, String)> = (0..n)
            .map(|k| (format!("<image>\nDescribe the scene in picture {rec}, part {k}."), answer(&mut rng)))
            .collect();
        items.push(json!({
            "id": format!("soft{rec:04}"),
            "image": format!("coco/{rec:06}.jpg"),
            "conversations": turns(&pairs),
            "source": "llava_conv",
        }));
        if rec % 4 == 3 {
            let q = format!("<image>\nWhat colour is the {} in picture {rec}?", pick(&mut rng, NOUNS));
            items.push(json!({
                "id": format!("vqa{rec:04}"),
                "image": format!("vqa/{rec:06}.jpg"),
                "conversations": turns(&[(q, "Grey".to_string())]),
                "source": "vqav2",
            }));
        }
        left -= n;
        rec += 1;
    }
    serde_json::to_string_pretty(&Value::Array(items)).unwrap()
}

pub fn soft_corpus(soft_rounds: usize, seed: u64) -> Vec<InstructionRecord> {
    parse_dataset(soft_corpus_json(soft_rounds, seed).as_bytes(), "fixture").unwrap()
}

/// Source files of the LLaVA-1.5 mixture at 1/1000 scale: soft 158, hard
/// 432, text-only 40.
pub const SCALED_MIXTURE: &[(&str, usize)] = &[
    ("llava_conv", 58),
    ("llava_detail", 23),
    ("llava_complex", 77),
    ("vqav2", 83),
    ("gqa", 72),
    ("okvqa", 9),
    ("ocrvqa", 80),
    ("a_okvqa", 50),
    ("textcaps", 22),
    ("refcoco", 30),
    ("vg", 86),
    ("sharegpt", 40),
];

/// One mini-corpus file without per-record `source` fields.
pub fn mixture_file(tag: &str, count: usize) -> String {
    let items: Vec<Value> = (0..count)
        .map(|i| {
            let (q, a) = match tag {
                "vqav2" | "gqa" | "okvqa" | "ocrvqa" => ("What is on the table?", "A red cup"),
                "a_okvqa" => ("Which fruit is shown? A. apple B. pear", "B"),
                "textcaps" => ("Provide a one-sentence caption.", "A shop sign reading OPEN."),
                "refcoco" | "vg" => ("Give the bounding box of the dog.", "[0.12, 0.30, 0.55, 0.91]"),
                "sharegpt" => ("How do I sort a list in Python?", "Use the sorted function or list.sort."),
                _ => ("Describe the image in detail.", "The colour of the car is red. A grey bus waits near the harbour."),
            };
            let mut rec = json!({
                "id": format!("{tag}-{i}"),
                "conversations": turns(&[(q.to_string(), a.to_string())]),
            });
            if tag != "sharegpt" {
                rec["image"] = json!(format!("{tag}/{i}.jpg"));
            }
            rec
        })
        .collect();
    serde_json::to_string(&Value::Array(items)).unwrap()
}

pub fn mixture_records() -> Vec<InstructionRecord> {
    SCALED_MIXTURE
        .iter()
        .flat_map(|(tag, n)| parse_dataset(mixture_file(tag, *n).as_bytes(), tag).unwrap())
        .collect()
}

pub fn tag_map() -> TagMap {
    TagMap::llava_default()
}
