//! Acceptance criteria for the primary pipeline. One PASS/FAIL line each;
//! the process exits non-zero if any criterion fails.

// `ensure!(a < b)` must fail on NaN, which the negated form does
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use manner_align::aligner::{
    compute_stats, post_process_rewrite, review_verdict, OutcomeCategory, ReviewStatus, RewriteStatus, RoundOutcome,
    RunState, Verdict,
};
use manner_align::assessment::{build_session, serve, AssessmentService, PoolItem, SessionSizes};
use manner_align::backend::{reference_stylize, Backend, FaultInjector, FaultPlan, ReferenceModel};
use manner_align::corpus::{partition_counts, serialize_dataset, soft_rounds, split_rounds};
use manner_align::gap::{corpus_gap_report, render_context, sequence_ppl, SplitSpec};
use manner_align::{AlignConfig, Aligner, PromptSet, QARound, ReferenceBackend, WorkerPool};
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn aligner(backend: &dyn Backend, concurrency: usize) -> Aligner<'_> {
    Aligner::new(backend, PromptSet::builtin(), AlignConfig { concurrency, ..AlignConfig::default() }).unwrap()
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(took)
}

fn parser_golden_suite() -> Outcome {
    use RewriteStatus::*;
    let ok = |s: &'static str| (Some(s), Success);
    let cases: &[(&str, (Option<&str>, RewriteStatus))] = &[
        ("Revised Answer: The cat naps.\nExplanation: shorter.", ok("The cat naps.")),
        ("Revised Answer: The cat naps.\nExplanations: shorter.", ok("The cat naps.")),
        ("Sure, here you go.\nRevised Answer:\n  The cat naps.  \n\nExplanation: x", ok("The cat naps.")),
        ("Revised Answer: A.\nExplanations: one\nExplanation: two", ok("A.")),
        ("Revised Answer: A.\nExplanation: one\nRevised Answer: B.\nExplanation: two", ok("A.")),
        ("Revised Answer: Questions remain open.\nExplanation: x", (None, SensitiveWordFailure)),
        ("The cat naps.", (None, ParseFailure)),
        ("Revised Answer: The cat naps.", (None, ParseFailure)),
        ("Explanation: reworded.\nThe cat naps.", (None, ParseFailure)),
        ("Explanation: first.\nRevised Answer: The cat naps.", (None, ParseFailure)),
        ("Revised Answer:\nExplanation: nothing", (None, ParseFailure)),
        ("revised answer: The cat naps.\nExplanation: x", (None, ParseFailure)),
        ("Revised Answer: The cat naps.\nexplanation: x", (None, ParseFailure)),
        ("Revised Answer: This revised answer is shorter.\nExplanation: x", (None, SensitiveWordFailure)),
        ("Revised Answer: Unlike the Revised Answer above, it naps.\nExplanation: x", (None, SensitiveWordFailure)),
        ("Revised Answer: As the original answer says, it naps.\nExplanation: x", (None, SensitiveWordFailure)),
        ("Revised Answer: ORIGINAL ANSWER kept.\nExplanations: x", (None, SensitiveWordFailure)),
        ("Revised Answer: After revision the cat naps.\nExplanation: x", (None, SensitiveWordFailure)),
        ("Revised Answer: Revision: the cat naps.\nExplanations: x", (None, SensitiveWordFailure)),
        ("Revised Answer: It keeps the semantic meaning.\nExplanation: x", (None, SensitiveWordFailure)),
        ("Revised Answer: Same Semantic Meaning, new words.\nExplanations: x", (None, SensitiveWordFailure)),
        ("Revised Answer: The Question asks about a cat.\nExplanation: x", (None, SensitiveWordFailure)),
        ("Revised Answer: That question is about a cat.\nExplanation: x", (None, SensitiveWordFailure)),
        ("Revised Answer: The cat is revising its nap.\nExplanation: x", ok("The cat is revising its nap.")),
        ("Revised Answer: Its meaning is semantic.\nExplanation: x", ok("Its meaning is semantic.")),
    ];
    let mut mismatches = Vec::new();
    for (i, (response, (answer, status))) in cases.iter().enumerate() {
        let got = post_process_rewrite(response);
        if got != (answer.map(str::to_string), *status) {
            mismatches.push(format!("case {i}: got {got:?}"));
        }
    }
    ensure!(cases.len() >= 20, "only {} cases", cases.len());
    ensure!(mismatches.is_empty(), "{}", mismatches.join("; "));
    Ok(format!("{} cases, 0 mismatches", cases.len()))
}

/// Rewrite, post-process, review, decide: stepped by hand for one round.
fn oracle_round(backend: &dyn Backend, prompts: &PromptSet, config: &AlignConfig, round: &QARound) -> (String, RewriteStatus, Option<ReviewStatus>) {
    let prompt = prompts.render_rewrite(config.variant, &round.question, &round.answer).unwrap();
    let response = match backend.complete(&prompt, &config.rewrite) {
        Ok(r) => r,
        Err(_) => return (round.answer.clone(), RewriteStatus::BackendError, None),
    };
    let (revised, status) = post_process_rewrite(&response);
    let Some(revised) = revised else {
        return (round.answer.clone(), status, None);
    };
    let review = prompts.render_review(&round.question, &round.answer, &revised).unwrap();
    match backend.complete(&review, &config.review).map(|r| review_verdict(&r)) {
        Ok(Verdict::Accepted) => (revised, status, Some(ReviewStatus::Accepted)),
        Ok(Verdict::Rejected) => (round.answer.clone(), status, Some(ReviewStatus::Rejected)),
        Err(_) => (round.answer.clone(), status, Some(ReviewStatus::BackendError)),
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let recs = common::soft_corpus(200, 2024);
    let map = common::tag_map();
    let backend = ReferenceBackend::default();
    let seq = aligner(&backend, 1).align_corpus(&recs, &map, None).map_err(|e| e.to_string())?;
    let par = aligner(&backend, 8).align_corpus(&recs, &map, None).map_err(|e| e.to_string())?;
    ensure!(seq.outcomes.len() == 200, "{} rounds", seq.outcomes.len());
    ensure!(serialize_dataset(&seq.records, true) == serialize_dataset(&par.records, true), "outputs differ");
    ensure!(seq.report == par.report, "reports differ");

    let config = AlignConfig::default();
    let prompts = PromptSet::builtin();
    for o in seq.outcomes.iter().step_by(10).take(20) {
        let (answer, rw, rv) = oracle_round(&backend, &prompts, &config, &o.round);
        ensure!(
            (answer.as_str(), rw, rv) == (o.final_answer.as_str(), o.rewrite_status, o.review_status),
            "oracle disagrees on {}",
            o.round.key()
        );
    }
    let took = within(start, Duration::from_secs(10))?;
    Ok(format!("200 rounds, concurrency 1 == 8, 20/20 oracle rounds agree, {took:.2?}"))
}

fn fallback_totality() -> Outcome {
    let recs = common::soft_corpus(400, 77);
    let map = common::tag_map();
    let plan = FaultPlan { seed: 1, transport_rate: 0.1, parse_failure_rate: 0.1, review_reject_rate: 0.1, ..FaultPlan::none() };
    let backend = FaultInjector::new(ReferenceBackend::default(), plan);
    let out = aligner(&backend, 4).align_corpus(&recs, &map, None).map_err(|e| e.to_string())?;
    let r = &out.report;
    ensure!(r.is_consistent(), "{} + {} + {} + {} != {}", r.accepted, r.rewrite_failures, r.unqualified, r.unchanged_by_choice, r.total_rounds);
    let originals: BTreeMap<_, _> = soft_rounds(&recs, &map).into_iter().map(|q| (q.key(), q.answer)).collect();
    let aligned: BTreeMap<_, _> = soft_rounds(&out.records, &map).into_iter().map(|q| (q.key(), q.answer)).collect();
    let mut failed = 0;
    for o in &out.outcomes {
        if matches!(o.category(), OutcomeCategory::RewriteFailure | OutcomeCategory::Unqualified) {
            failed += 1;
            let key = o.round.key();
            ensure!(aligned[&key] == originals[&key], "{key} lost its original answer");
        }
    }
    ensure!(r.rewrite_failure_histogram.get("backend:transport").is_some_and(|&n| n > 0), "no transport faults fired");
    ensure!(r.rewrite_failure_histogram.get("parse_failure").is_some_and(|&n| n > 0), "no parse faults fired");
    ensure!(r.review_histogram.get("rejected").is_some_and(|&n| n > 0), "no review faults fired");
    Ok(format!(
        "{failed} failed rounds kept originals; {} accepted + {} failures + {} unqualified + {} unchanged = {}",
        r.accepted, r.rewrite_failures, r.unqualified, r.unchanged_by_choice, r.total_rounds
    ))
}

fn synthetic_log(total: usize, failures: usize, unqualified: usize) -> Vec<RoundOutcome> {
    let round = QARound { record_id: "r".into(), round_index: 0, question: "q".into(), answer: "a".into() };
    let mk = |rw, rv: Option<ReviewStatus>, revised: Option<&str>| RoundOutcome {
        round: round.clone(),
        rewrite_status: rw,
        revised_answer: revised.map(str::to_string),
        review_status: rv,
        final_answer: "a".into(),
        attempts: 1,
        error: None,
    };
    let fail = mk(RewriteStatus::ParseFailure, None, None);
    let unq = mk(RewriteStatus::Success, Some(ReviewStatus::Rejected), Some("b"));
    let ok = mk(RewriteStatus::Success, Some(ReviewStatus::Accepted), Some("b"));
    let mut log = vec![fail; failures];
    log.extend(std::iter::repeat_n(unq, unqualified));
    log.extend(std::iter::repeat_n(ok, total - failures - unqualified));
    log
}

fn failure_rate_arithmetic() -> Outcome {
    let rows = [
        (361_000, 400, 2000, "0.11%", "0.55%"),
        (361_000, 700, 3500, "0.19%", "0.97%"),
        (361_000, 300, 800, "0.08%", "0.22%"),
    ];
    let mut shown = Vec::new();
    for (total, fail, unq, f, u) in rows {
        let report = compute_stats(&synthetic_log(total, fail, unq));
        let got = (report.failure_rate_display(), report.unqualified_rate_display());
        ensure!(got == (f.to_string(), u.to_string()), "({total}; {fail}; {unq}) -> {got:?}, want {f}/{u}");
        shown.push(format!("{}/{}", got.0, got.1));
    }
    Ok(shown.join(", "))
}

fn ppl_closed_form() -> Outcome {
    let q = 0.25f64.ln();
    let uniform = sequence_ppl(&[q, q, q]);
    ensure!(uniform == 4.0, "uniform-over-4 gave {uniform}");
    let v = sequence_ppl(&[0.5f64.ln(), 0.25f64.ln()]);
    let want = 2.0 * 2f64.sqrt();
    ensure!(((v - want) / want).abs() <= 1e-9, "{v} vs 2*sqrt(2)");

    let recs: Vec<_> = common::soft_corpus(500, 500).into_iter().filter(|r| r.source_tag == "llava_conv").collect();
    let backend = ReferenceBackend::default();
    let report = corpus_gap_report(&recs, &backend, SplitSpec { eval_count: recs.len() }, &WorkerPool::new(8))
        .map_err(|e| e.to_string())?;
    ensure!(report.per_round.len() == 500, "{} rounds scored", report.per_round.len());
    let model = backend.model();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for r in recs.iter().flat_map(split_rounds) {
        let mut prev = render_context(&r.question).split_whitespace().last().unwrap().to_string();
        for w in r.answer.split_whitespace() {
            sum += model.prob(&prev, w).ok_or("word outside support")?.ln();
            n += 1;
            prev = w.to_string();
        }
    }
    let brute = (-sum / n as f64).exp();
    let rel = ((report.corpus_ppl - brute) / brute).abs();
    ensure!(rel <= 1e-9, "corpus_ppl {} vs brute force {brute}", report.corpus_ppl);
    Ok(format!("4.0 exact, 2*sqrt(2) ok, corpus_ppl {:.6} over {n} tokens, rel err {rel:.1e}", report.corpus_ppl))
}

fn gap_direction() -> Outcome {
    let start = Instant::now();
    let recs = common::soft_corpus(600, 31);
    let map = common::tag_map();
    let split = SplitSpec { eval_count: 60 };
    let (train, _) = split.apply(&recs).map_err(|e| e.to_string())?;
    // the scorer stands in for the inner model: fit on its own manner
    let styled: Vec<(String, String)> = train
        .iter()
        .flat_map(split_rounds)
        .map(|r| (render_context(&r.question), reference_stylize(&r.answer)))
        .collect();
    let model = ReferenceModel::builtin().refit(styled.iter().map(|(c, a)| (c.as_str(), a.as_str())), Some(0.1));
    let scorer = ReferenceBackend::new("reference-refit", model);

    let rewriter = ReferenceBackend::default();
    let aligned = aligner(&rewriter, 4).align_corpus(&recs, &map, None).map_err(|e| e.to_string())?;
    let pool = WorkerPool::new(4);
    let original = corpus_gap_report(&recs, &scorer, split, &pool).map_err(|e| e.to_string())?.corpus_ppl;
    let after = corpus_gap_report(&aligned.records, &scorer, split, &pool).map_err(|e| e.to_string())?.corpus_ppl;
    ensure!(after < original, "aligned {after} is not below original {original}");
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!("original {original:.4} > aligned {after:.4}, margin {:.4}, {took:.2?}", original - after))
}

fn idempotence() -> Outcome {
    let recs = common::soft_corpus(200, 8);
    let map = common::tag_map();
    let backend = ReferenceBackend::default();
    let a = aligner(&backend, 4);
    let first = a.align_corpus(&recs, &map, None).map_err(|e| e.to_string())?;
    ensure!(first.report.accepted > 0, "first pass accepted nothing");
    let second = a.align_corpus(&first.records, &map, None).map_err(|e| e.to_string())?;
    let changed = second.outcomes.iter().filter(|o| o.final_answer != o.round.answer).count();
    ensure!(changed == 0, "{changed} answers changed on the second pass");
    ensure!(second.records == first.records, "records changed on the second pass");
    Ok(format!("first pass changed {}, second pass changed 0", first.report.accepted))
}

fn resume_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("align.ckpt");
    let recs = common::soft_corpus(250, 99);
    let map = common::tag_map();
    let backend = ReferenceBackend::default();
    let a = aligner(&backend, 4);
    let full = a.align_corpus(&recs, &map, None).map_err(|e| e.to_string())?;

    {
        let mut cp = a.open_checkpoint(&path, &recs, &map).map_err(|e| e.to_string())?;
        let state = a.run(&recs, &map, Some(&mut cp), Some(100)).map_err(|e| e.to_string())?;
        ensure!(matches!(state, RunState::Interrupted { processed: 100, .. }), "budget not honoured: {state:?}");
    }
    let mut cp = a.open_checkpoint(&path, &recs, &map).map_err(|e| e.to_string())?;
    ensure!(cp.len() == 100, "checkpoint holds {} rounds after the kill", cp.len());
    let resumed = a.align_corpus(&recs, &map, Some(&mut cp)).map_err(|e| e.to_string())?;
    ensure!(serialize_dataset(&resumed.records, true) == serialize_dataset(&full.records, true), "outputs differ");
    let report_json = |r| serde_json::to_string(r).unwrap();
    ensure!(report_json(&resumed.report) == report_json(&full.report), "reports differ");
    Ok("killed after 100 of 250 rounds; resumed output and report byte-identical".into())
}

fn vote_aggregation() -> Outcome {
    let mut shown = Vec::new();
    for (counts, want) in [([362usize, 34, 4], [90.5, 8.5, 1.0]), ([378, 22, 0], [94.5, 5.5, 0.0])] {
        let got = headless_vote(counts)?;
        ensure!(got == want, "{counts:?} -> {got:?}, want {want:?}");
        shown.push(format!("{}/{}/{} -> {}/{}/{}", counts[0], counts[1], counts[2], got[0], got[1], got[2]));
    }
    Ok(format!("{} (served API)", shown.join(", ")))
}

/// Casts `counts` ballots (inner LLM, dataset, neither) from four raters
/// over 100 samples through HTTP and reads the aggregate back.
fn headless_vote(counts: [usize; 3]) -> Result<[f64; 3], String> {
    let outcomes: Vec<RoundOutcome> = synthetic_log(150, 0, 0)
        .into_iter()
        .enumerate()
        .map(|(i, mut o)| {
            o.round.record_id = format!("rec{i}");
            o.final_answer = format!("aligned answer {i}");
            o.revised_answer = Some(o.final_answer.clone());
            o
        })
        .collect();
    let pool = |p: &str| (0..30).map(|i| PoolItem { id: format!("{p}{i}"), text: format!("{p} {i}") }).collect::<Vec<_>>();
    let session = build_session(&pool("llm"), &pool("ds"), &outcomes, 2, SessionSizes::default()).map_err(|e| e.to_string())?;
    let (llm_panel, ds_panel) = if session.llm_is_style_a { ("style_a", "style_b") } else { ("style_b", "style_a") };
    let service = Arc::new(AssessmentService::new());
    service.insert(session.clone(), None);
    let server = serve(service, "127.0.0.1:0").map_err(|e| e.to_string())?;
    let base = format!("http://{}/session/{}", server.addr(), session.session_id);

    let view: Value = ureq::get(&base).call().map_err(|e| e.to_string())?.body_mut().read_json().map_err(|e| e.to_string())?;
    let ids: Vec<String> = view["samples"]
        .as_array()
        .ok_or("no samples")?
        .iter()
        .map(|s| s["sample_id"].as_str().unwrap().to_string())
        .collect();
    let choices: Vec<&str> = [llm_panel, ds_panel, "none"]
        .iter()
        .zip(counts)
        .flat_map(|(c, n)| std::iter::repeat_n(*c, n))
        .collect();
    ensure!(choices.len() == 4 * ids.len(), "{} ballots for {} slots", choices.len(), 4 * ids.len());
    for (k, choice) in choices.iter().enumerate() {
        let body = json!({"sample_id": ids[k % ids.len()], "rater_id": format!("expert{}", k / ids.len()), "choice": choice});
        ureq::post(&format!("{base}/vote")).send_json(body).map_err(|e| e.to_string())?;
    }
    let agg: Value = ureq::get(&format!("{base}/aggregate"))
        .call()
        .map_err(|e| e.to_string())?
        .body_mut()
        .read_json()
        .map_err(|e| e.to_string())?;
    server.shutdown();
    let f = |k: &str| agg[k].as_f64().unwrap_or(f64::NAN);
    Ok([f("inner_llm"), f("original_dataset"), f("none_of_both")])
}

fn partition_counts_scaled() -> Outcome {
    let counts = partition_counts(&common::mixture_records(), &common::tag_map());
    let got = (counts.soft, counts.hard, counts.text_only);
    ensure!(got == (158, 432, 40), "soft/hard/text_only = {got:?}");
    ensure!(counts.heuristic == 0, "{} records classified heuristically", counts.heuristic);
    Ok("soft=158 hard=432 text_only=40".into())
}

fn main() -> ExitCode {
    let criteria: &[Check] = &[
        ("parser golden suite", parser_golden_suite),
        ("algorithm oracle equivalence", oracle_equivalence),
        ("fallback totality and conservation", fallback_totality),
        ("failure-rate arithmetic", failure_rate_arithmetic),
        ("perplexity closed form", ppl_closed_form),
        ("gap direction", gap_direction),
        ("idempotence", idempotence),
        ("resume equivalence", resume_equivalence),
        ("vote aggregation", vote_aggregation),
        ("partition counts", partition_counts_scaled),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
