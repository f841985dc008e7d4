mod common;

use manner_align::backend::{Backend, ReferenceModel};
use manner_align::corpus::split_rounds;
use manner_align::gap::{corpus_gap_report, render_context, SplitSpec};
use manner_align::{ReferenceBackend, WorkerPool};

/// Independent recomputation straight from the bigram table.
fn brute_force_ppl(model: &ReferenceModel, rounds: &[(String, String)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (q, a) in rounds {
        let ctx = render_context(q);
        let mut prev = ctx.split_whitespace().last().unwrap().to_string();
        for w in a.split_whitespace() {
            sum += model.prob(&prev, w).unwrap().ln();
            n += 1;
            prev = w.to_string();
        }
    }
    (-sum / n as f64).exp()
}

#[test]
fn corpus_ppl_matches_brute_force() {
    let recs = common::soft_corpus(300, 9);
    let backend = ReferenceBackend::default();
    let eval = 40;
    let report = corpus_gap_report(&recs, &backend, SplitSpec { eval_count: eval }, &WorkerPool::new(4)).unwrap();
    let rounds: Vec<(String, String)> =
        recs[recs.len() - eval..].iter().flat_map(split_rounds).map(|r| (r.question, r.answer)).collect();
    assert_eq!(report.per_round.len(), rounds.len());
    let expected = brute_force_ppl(backend.model(), &rounds);
    assert!((report.corpus_ppl - expected).abs() <= 1e-9 * expected, "{} vs {expected}", report.corpus_ppl);
}

#[test]
fn parallel_and_sequential_reports_agree() {
    let recs = common::soft_corpus(120, 4);
    let backend = ReferenceBackend::default();
    let split = SplitSpec { eval_count: recs.len() };
    let a = corpus_gap_report(&recs, &backend, split, &WorkerPool::sequential()).unwrap();
    let b = corpus_gap_report(&recs, &backend, split, &WorkerPool::new(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tokens_tile_the_answer() {
    let backend = ReferenceBackend::default();
    let answer = "The colour of the  car is\tred.";
    let tokens = backend.score_tokens(&render_context("q"), answer).unwrap();
    let joined: String = tokens.iter().map(|t| t.token_text.as_str()).collect();
    assert_eq!(joined.trim_start(), answer.trim_start());
}
