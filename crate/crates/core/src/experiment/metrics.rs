use serde::{Deserialize, Serialize};

use super::config::Method;
use super::eval::EvalReport;
use crate::policy::{Answer, QuestionId};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardSummary {
    /// Trajectories that entered the update.
    pub n_train: usize,
    pub n_explorer: usize,
    pub mean: f64,
    pub n_one: usize,
    pub n_half: usize,
    pub n_zero: usize,
    /// Reward-1 trajectories whose answer is the true answer.
    pub n_one_correct: usize,
    pub degenerate: bool,
}

/// One question at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub question_id: QuestionId,
    pub rho_t: f64,
    pub mean_rho: f64,
    pub gate_open: bool,
    pub pseudo_label: Option<Answer>,
    pub anchor_majority: Option<Answer>,
    pub label_correct: bool,
    pub anchor_label_correct: bool,
    pub rewards: RewardSummary,
    pub anchor_entropy: f64,
    pub explorer_entropy: Option<f64>,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub n_questions: usize,
    pub n_records: usize,
    pub label_accuracy: f64,
    /// Over the last `n_questions` records, i.e. the final pass over the suite.
    pub final_label_accuracy: f64,
    pub anchor_label_accuracy: f64,
    pub final_anchor_label_accuracy: f64,
    /// Share of reward-1 trajectories whose answer is the true answer.
    pub reward_signal_correctness: f64,
    pub gate_open_fraction: f64,
    pub fallback_count: usize,
    pub mean_anchor_entropy: f64,
    pub mean_explorer_entropy: Option<f64>,
    pub eval: EvalReport,
}

fn mean_of<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn share(records: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> bool) -> f64 {
    mean_of(records.iter().map(|r| if f(r) { 1.0 } else { 0.0 }))
}

pub fn summarize(
    method: Method,
    seed: u64,
    steps: usize,
    n_questions: usize,
    records: &[MetricsRecord],
    eval: EvalReport,
) -> RunSummary {
    let tail = &records[records.len().saturating_sub(n_questions)..];
    let (one, one_correct) = records.iter().fold((0usize, 0usize), |(a, b), r| {
        (a + r.rewards.n_one, b + r.rewards.n_one_correct)
    });
    let explorer: Vec<f64> = records.iter().filter_map(|r| r.explorer_entropy).collect();
    RunSummary {
        method,
        seed,
        steps,
        n_questions,
        n_records: records.len(),
        label_accuracy: share(records, |r| r.label_correct),
        final_label_accuracy: share(tail, |r| r.label_correct),
        anchor_label_accuracy: share(records, |r| r.anchor_label_correct),
        final_anchor_label_accuracy: share(tail, |r| r.anchor_label_correct),
        reward_signal_correctness: if one == 0 { 0.0 } else { one_correct as f64 / one as f64 },
        gate_open_fraction: share(records, |r| r.gate_open),
        fallback_count: records.iter().filter(|r| r.fallback_used).count(),
        mean_anchor_entropy: mean_of(records.iter().map(|r| r.anchor_entropy)),
        mean_explorer_entropy: (!explorer.is_empty()).then(|| mean_of(explorer.into_iter())),
        eval,
    }
}
