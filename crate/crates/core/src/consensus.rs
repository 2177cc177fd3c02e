//! Answer histograms, harmonic election and the conservative reward.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{DcrlError, Result};
use crate::policy::{Answer, Trajectory};

/// Counts of valid answers in one rollout set. INVALID responses are left
/// out of `counts` but still count toward `total`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerHistogram {
    counts: BTreeMap<Answer, usize>,
    total: usize,
}

impl AnswerHistogram {
    pub fn from_counts(counts: BTreeMap<Answer, usize>, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(DcrlError::Empty("rollout set"));
        }
        let valid: usize = counts.values().sum();
        if valid > total {
            return Err(DcrlError::LengthMismatch {
                what: "valid answers exceed rollout total",
                left: valid,
                right: total,
            });
        }
        let counts = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        Ok(Self { counts, total })
    }

    pub fn counts(&self) -> &BTreeMap<Answer, usize> {
        &self.counts
    }

    pub fn count(&self, answer: &Answer) -> usize {
        self.counts.get(answer).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn valid(&self) -> usize {
        self.counts.values().sum()
    }

    /// Empirical probability `count / total`.
    pub fn prob(&self, answer: &Answer) -> f64 {
        self.count(answer) as f64 / self.total as f64
    }

    /// Most frequent valid answer; ties go to the lexicographically smallest.
    pub fn majority(&self) -> Option<Answer> {
        argmax(self.counts.iter().map(|(a, &c)| (a, c)))
    }

    /// Same histogram with every count and the total multiplied by `k`.
    pub fn scaled(&self, k: usize) -> Self {
        Self {
            counts: self.counts.iter().map(|(a, &c)| (a.clone(), c * k)).collect(),
            total: self.total * k,
        }
    }
}

pub fn histogram(rollouts: &[Trajectory]) -> Result<AnswerHistogram> {
    if rollouts.is_empty() {
        return Err(DcrlError::Empty("rollout set"));
    }
    let mut counts = BTreeMap::new();
    for answer in rollouts.iter().filter_map(|t| t.answer.as_ref()) {
        *counts.entry(answer.clone()).or_insert(0) += 1;
    }
    Ok(AnswerHistogram {
        counts,
        total: rollouts.len(),
    })
}

/// Strict-greater scan over keys in ascending order, so ties resolve to the
/// smallest key. Returns `None` on empty input or when the maximum is not
/// positive.
fn argmax<'a, V, I>(items: I) -> Option<Answer>
where
    V: PartialOrd + Default + Copy,
    I: IntoIterator<Item = (&'a Answer, V)>,
{
    let mut best: Option<(&Answer, V)> = None;
    for (a, v) in items {
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((a, v));
        }
    }
    best.filter(|&(_, v)| v > V::default()).map(|(a, _)| a.clone())
}

/// `2 p0 p1 / (p0 + p1)`, and 0 when both are 0.
pub fn harmonic_score(p0: f64, p1: f64) -> f64 {
    if p0 + p1 > 0.0 {
        2.0 * p0 * p1 / (p0 + p1)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    /// `None` only when neither rollout set produced a valid answer.
    pub pseudo_label: Option<Answer>,
    pub anchor_majority: Option<Answer>,
    #[serde(with = "crate::answer_map")]
    pub scores: BTreeMap<Answer, f64>,
    pub fallback_used: bool,
}

/// Harmonic election over every answer seen in either rollout set.
pub fn elect(h0: &AnswerHistogram, h1: &AnswerHistogram) -> Result<ConsensusOutcome> {
    if h0.total != h1.total {
        return Err(DcrlError::LengthMismatch {
            what: "anchor and explorer group sizes",
            left: h0.total,
            right: h1.total,
        });
    }
    let candidates: BTreeSet<&Answer> = h0.counts.keys().chain(h1.counts.keys()).collect();
    let scores: BTreeMap<Answer, f64> = candidates
        .into_iter()
        .map(|a| (a.clone(), harmonic_score(h0.prob(a), h1.prob(a))))
        .collect();
    let anchor_majority = h0.majority();
    if scores.is_empty() {
        return Ok(ConsensusOutcome {
            pseudo_label: None,
            anchor_majority,
            scores,
            fallback_used: false,
        });
    }
    let (pseudo_label, fallback_used) = match argmax(scores.iter().map(|(a, &s)| (a, s))) {
        Some(a) => (Some(a), false),
        None => (anchor_majority.clone(), true),
    };
    Ok(ConsensusOutcome {
        pseudo_label,
        anchor_majority,
        scores,
        fallback_used,
    })
}

/// Plain majority vote over the anchor set: the pseudo-label is the anchor
/// majority itself.
pub fn majority_outcome(h0: &AnswerHistogram) -> ConsensusOutcome {
    let majority = h0.majority();
    ConsensusOutcome {
        pseudo_label: majority.clone(),
        anchor_majority: majority,
        scores: BTreeMap::new(),
        fallback_used: false,
    }
}

/// Majority over the summed counts of both rollout sets.
pub fn pooled_majority(h0: &AnswerHistogram, h1: &AnswerHistogram) -> Option<Answer> {
    let mut pooled = h0.counts.clone();
    for (a, &c) in &h1.counts {
        *pooled.entry(a.clone()).or_insert(0) += c;
    }
    argmax(pooled.iter().map(|(a, &c)| (a, c)))
}

pub fn pooled_outcome(h0: &AnswerHistogram, h1: &AnswerHistogram) -> ConsensusOutcome {
    ConsensusOutcome {
        pseudo_label: pooled_majority(h0, h1),
        anchor_majority: h0.majority(),
        scores: BTreeMap::new(),
        fallback_used: false,
    }
}

/// 1 for the pseudo-label, 0.5 for the anchor majority, 0 otherwise
/// (including INVALID). The pseudo-label branch is checked first.
pub fn reward_for(answer: Option<&Answer>, outcome: &ConsensusOutcome) -> f64 {
    let Some(answer) = answer else {
        return 0.0;
    };
    if outcome.pseudo_label.as_ref() == Some(answer) {
        1.0
    } else if outcome.anchor_majority.as_ref() == Some(answer) {
        0.5
    } else {
        0.0
    }
}

pub fn assign_rewards(rollouts: &[Trajectory], outcome: &ConsensusOutcome) -> Vec<f64> {
    rollouts
        .iter()
        .map(|t| reward_for(t.answer.as_ref(), outcome))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusStrategy {
    AnchorMajority,
    PooledMajority,
    Harmonic,
}

impl ConsensusStrategy {
    pub const ALL: [ConsensusStrategy; 3] = [
        ConsensusStrategy::Harmonic,
        ConsensusStrategy::AnchorMajority,
        ConsensusStrategy::PooledMajority,
    ];
}

pub fn baseline_select(
    h0: &AnswerHistogram,
    h1: &AnswerHistogram,
    strategy: ConsensusStrategy,
) -> Result<Option<Answer>> {
    Ok(match strategy {
        ConsensusStrategy::AnchorMajority => h0.majority(),
        ConsensusStrategy::PooledMajority => pooled_majority(h0, h1),
        ConsensusStrategy::Harmonic => elect(h0, h1)?.pseudo_label,
    })
}
