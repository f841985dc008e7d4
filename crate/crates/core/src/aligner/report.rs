use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{OutcomeCategory, RoundOutcome};

/// Aggregate counts over a run. `accepted + unqualified + rewrite_failures
/// + unchanged_by_choice == total_rounds` always holds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub total_rounds: usize,
    pub rewrite_failures: usize,
    pub unqualified: usize,
    pub accepted: usize,
    pub unchanged_by_choice: usize,
    pub failure_rate: f64,
    pub unqualified_rate: f64,
    /// parse_failure / sensitive_word / backend:<kind>
    pub rewrite_failure_histogram: BTreeMap<String, usize>,
    /// rejected / backend:<kind>
    pub review_histogram: BTreeMap<String, usize>,
}

/// `count / total` in percent, rounded half-up to two decimals, as an
/// integer number of hundredths of a percent.
pub fn percent_hundredths(count: usize, total: usize) -> u64 {
    if total == 0 {
        return 0;
    }
    let (c, t) = (count as u128, total as u128);
    ((c * 10_000 * 2 + t) / (2 * t)) as u64
}

pub fn format_percent(count: usize, total: usize) -> String {
    let h = percent_hundredths(count, total);
    format!("{}.{:02}%", h / 100, h % 100)
}

pub fn compute_stats(outcomes: &[RoundOutcome]) -> AlignmentReport {
    let mut r = AlignmentReport { total_rounds: outcomes.len(), ..Default::default() };
    for o in outcomes {
        match o.category() {
            OutcomeCategory::Accepted => r.accepted += 1,
            OutcomeCategory::Unchanged => r.unchanged_by_choice += 1,
            OutcomeCategory::Unqualified => {
                r.unqualified += 1;
                *r.review_histogram.entry(o.failure_label()).or_default() += 1;
            }
            OutcomeCategory::RewriteFailure => {
                r.rewrite_failures += 1;
                *r.rewrite_failure_histogram.entry(o.failure_label()).or_default() += 1;
            }
        }
    }
    if r.total_rounds > 0 {
        r.failure_rate = r.rewrite_failures as f64 / r.total_rounds as f64;
        r.unqualified_rate = r.unqualified as f64 / r.total_rounds as f64;
    }
    r
}

impl AlignmentReport {
    pub fn failure_rate_display(&self) -> String {
        format_percent(self.rewrite_failures, self.total_rounds)
    }

    pub fn unqualified_rate_display(&self) -> String {
        format_percent(self.unqualified, self.total_rounds)
    }

    pub fn is_consistent(&self) -> bool {
        self.accepted + self.unqualified + self.rewrite_failures + self.unchanged_by_choice == self.total_rounds
    }

    /// Human-readable table with the failure-statistics columns.
    pub fn render_text(&self) -> String {
        let failures = format!("{} ({})", self.rewrite_failures, self.failure_rate_display());
        let unqualified = format!("{} ({})", self.unqualified, self.unqualified_rate_display());
        let mut out = format!(
            "{:>10}  {:>18}  {:>20}  {:>10}  {:>10}\n",
            "Total QA", "Failures", "Unqualified Samples", "Accepted", "Unchanged"
        );
        out.push_str(&format!(
            "{:>10}  {:>18}  {:>20}  {:>10}  {:>10}\n",
            self.total_rounds, failures, unqualified, self.accepted, self.unchanged_by_choice
        ));
        for (label, hist) in [("rewrite failures", &self.rewrite_failure_histogram), ("review", &self.review_histogram)] {
            if !hist.is_empty() {
                let parts: Vec<String> = hist.iter().map(|(k, v)| format!("{k}={v}")).collect();
                out.push_str(&format!("{label}: {}\n", parts.join(", ")));
            }
        }
        out
    }
}
