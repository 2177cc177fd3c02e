//! Brute-force ground truth.
//!
//! Exact answer distributions come from walking every terminating path of
//! the policy trie. Closed-form harmonic scores and the theorem checker are
//! built on those exact marginals and never on sampled histograms, except
//! where a Monte Carlo pick is explicitly requested for comparison.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{elect, histogram};
use crate::error::{DcrlError, Result};
use crate::policy::{extract_answer, sample_group, Answer, PolicyParams, Source, Token};
use crate::taskgen::{build_task_calibrated, TaskSpec};
use crate::unlearning::{make_explorer_weighted, UnlearnConfig};

/// Upper bound on `V^(max_len + 1)` for full enumeration.
pub const ENUMERATION_BOUND: f64 = 1e7;

/// Paths lighter than this are dropped when building exact-mode rollouts.
pub const EXACT_ROLLOUT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    #[serde(with = "crate::answer_map")]
    pub probs: BTreeMap<Answer, f64>,
    pub invalid_mass: f64,
}

impl ExactDistribution {
    pub fn prob(&self, answer: &Answer) -> f64 {
        self.probs.get(answer).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum::<f64>() + self.invalid_mass
    }

    /// Most probable valid answer; ties go to the lexicographically smallest.
    pub fn mode(&self) -> Option<Answer> {
        let mut best: Option<(&Answer, f64)> = None;
        for (a, &p) in &self.probs {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((a, p));
            }
        }
        best.filter(|&(_, p)| p > 0.0).map(|(a, _)| a.clone())
    }

    /// Entropy in nats over the valid answers plus the INVALID outcome.
    pub fn entropy(&self) -> f64 {
        self.probs
            .values()
            .chain(std::iter::once(&self.invalid_mass))
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

pub fn check_enumeration_bound(params: &PolicyParams) -> Result<()> {
    let paths = (params.vocab().size as f64).powi(params.max_len() as i32 + 1);
    if paths > ENUMERATION_BOUND {
        return Err(DcrlError::EnumerationBound {
            paths,
            bound: ENUMERATION_BOUND,
        });
    }
    Ok(())
}

/// Calls `visit(tokens, prob)` for every terminating path whose probability
/// exceeds `min_prob`. Subtrees at or below `min_prob` are skipped whole.
pub fn for_each_path<F>(params: &PolicyParams, min_prob: f64, mut visit: F)
where
    F: FnMut(&[Token], f64),
{
    let mut prefix = Vec::with_capacity(params.max_len() + 1);
    walk(params, min_prob, &mut prefix, 1.0, &mut visit);
}

fn walk<F>(params: &PolicyParams, min_prob: f64, prefix: &mut Vec<Token>, mass: f64, visit: &mut F)
where
    F: FnMut(&[Token], f64),
{
    let eos = params.vocab().eos;
    let probs = params.probs_at(prefix);
    for (k, &p) in probs.iter().enumerate() {
        let q = mass * p;
        if q <= min_prob {
            continue;
        }
        prefix.push(k as Token);
        if k as Token == eos {
            visit(prefix, q);
        } else {
            walk(params, min_prob, prefix, q, visit);
        }
        prefix.pop();
    }
}

/// Every terminating path with its exact probability.
pub fn enumerate_paths(params: &PolicyParams) -> Result<Vec<(Vec<Token>, f64)>> {
    check_enumeration_bound(params)?;
    let mut out = Vec::new();
    for_each_path(params, 0.0, |tokens, p| out.push((tokens.to_vec(), p)));
    Ok(out)
}

/// Exact answer marginal by full trie enumeration.
pub fn exact_answer_distribution(params: &PolicyParams) -> Result<ExactDistribution> {
    check_enumeration_bound(params)?;
    Ok(answer_distribution_above(params, 0.0).0)
}

/// Answer marginal over paths heavier than `min_prob`; also returns the
/// mass that was skipped. With `min_prob = 0` this is exact.
pub fn answer_distribution_above(params: &PolicyParams, min_prob: f64) -> (ExactDistribution, f64) {
    let vocab = params.vocab();
    let mut probs = BTreeMap::new();
    let mut invalid_mass = 0.0;
    let mut seen = 0.0;
    for_each_path(params, min_prob, |tokens, p| {
        seen += p;
        match extract_answer(tokens, &vocab) {
            Some(a) => *probs.entry(a).or_insert(0.0) += p,
            None => invalid_mass += p,
        }
    });
    (ExactDistribution { probs, invalid_mass }, (1.0 - seen).max(0.0))
}

/// The G -> infinity limit of a rollout set: every path above `floor`,
/// weighted by its exact probability.
pub fn exact_rollouts(params: &PolicyParams, floor: f64) -> Vec<(Vec<Token>, f64)> {
    let mut out = Vec::new();
    for_each_path(params, floor, |tokens, p| out.push((tokens.to_vec(), p)));
    out
}

fn harmonic(p0: f64, p1: f64) -> f64 {
    if p0 + p1 > 0.0 {
        2.0 * p0 * p1 / (p0 + p1)
    } else {
        0.0
    }
}

/// Limit harmonic score for each answer in either support.
pub fn closed_form_scores(anchor: &ExactDistribution, explorer: &ExactDistribution) -> BTreeMap<Answer, f64> {
    let answers: BTreeSet<&Answer> = anchor.probs.keys().chain(explorer.probs.keys()).collect();
    answers
        .into_iter()
        .map(|a| (a.clone(), harmonic(anchor.prob(a), explorer.prob(a))))
        .collect()
}

/// Exact-limit election: argmax of the closed-form scores, falling back to
/// the anchor mode when no answer has positive score. Returns the pick and
/// whether the fallback fired.
pub fn exact_pick(anchor: &ExactDistribution, explorer: &ExactDistribution) -> (Option<Answer>, bool) {
    let scores = closed_form_scores(anchor, explorer);
    let mut best: Option<(&Answer, f64)> = None;
    for (a, &s) in &scores {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((a, s));
        }
    }
    match best {
        Some((a, s)) if s > 0.0 => (Some(a.clone()), false),
        _ => (anchor.mode(), true),
    }
}

/// Thresholds that turn the "much greater than" assumptions into checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremThresholds {
    /// Spurious majority holds when `pi_anchor(sp) >= gap * pi_anchor(true)`.
    pub gap: f64,
    /// Unlearning is effective when `r_true >= ratio * r_sp`.
    pub ratio: f64,
    /// Monte Carlo group size for the empirical pick.
    pub group_size: usize,
}

impl Default for TheoremThresholds {
    fn default() -> Self {
        Self {
            gap: 2.0,
            ratio: 4.0,
            group_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionChecks {
    pub spurious_majority: bool,
    pub effective_unlearning: bool,
    pub large_sample: bool,
    /// `pi_anchor(sp) / pi_anchor(true)`.
    pub gap: Option<f64>,
    pub r_true: f64,
    pub r_sp: Option<f64>,
    /// Largest |empirical - exact| over answers in either rollout set.
    pub max_sampling_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub question_id: u32,
    pub true_answer: Answer,
    pub spurious_answer: Option<Answer>,
    pub mv_pick: Option<Answer>,
    pub dc_pick_exact: Option<Answer>,
    pub dc_fallback_exact: bool,
    pub mv_pick_monte_carlo: Option<Answer>,
    pub dc_pick_monte_carlo: Option<Answer>,
    pub group_size: usize,
    pub score_true: f64,
    pub score_spurious: Option<f64>,
    pub anchor_dist: ExactDistribution,
    pub explorer_dist: ExactDistribution,
    pub assumptions: AssumptionChecks,
}

impl TheoremReport {
    pub fn assumptions_hold(&self) -> bool {
        self.assumptions.spurious_majority && self.assumptions.effective_unlearning
    }

    /// The theorem's conclusion in the exact limit.
    pub fn conclusion_holds(&self) -> bool {
        self.spurious_answer.is_some()
            && self.mv_pick == self.spurious_answer
            && self.dc_pick_exact.as_ref() == Some(&self.true_answer)
    }
}

/// Builds the anchor for `spec`, derives the explorer with one unlearning
/// step on exact-mode rollouts, and compares majority vote against dual
/// consensus both in the exact limit and at a finite group size.
pub fn check_theorem(
    spec: &TaskSpec,
    unlearn: &UnlearnConfig,
    thresholds: &TheoremThresholds,
) -> Result<TheoremReport> {
    let (anchor, _) = build_task_calibrated(spec, unlearn)?;
    check_enumeration_bound(&anchor)?;
    let rollouts = exact_rollouts(&anchor, EXACT_ROLLOUT_FLOOR);
    let weighted: Vec<(&[Token], f64)> = rollouts.iter().map(|(t, w)| (t.as_slice(), *w)).collect();
    let explorer = make_explorer_weighted(&anchor, &weighted, unlearn)?;

    let anchor_dist = exact_answer_distribution(&anchor)?;
    let explorer_dist = exact_answer_distribution(&explorer)?;
    let scores = closed_form_scores(&anchor_dist, &explorer_dist);
    let (dc_pick_exact, dc_fallback_exact) = exact_pick(&anchor_dist, &explorer_dist);
    let mv_pick = anchor_dist.mode();

    let g = thresholds.group_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7468_656f_7265_6d00);
    let o0 = sample_group(&anchor, Source::Anchor, g, &mut rng);
    let o1 = sample_group(&explorer, Source::Explorer, g, &mut rng);
    let (h0, h1) = (histogram(&o0)?, histogram(&o1)?);
    let outcome = elect(&h0, &h1)?;

    let mut deviation = 0.0_f64;
    for a in h0.counts().keys().chain(anchor_dist.probs.keys()) {
        deviation = deviation.max((h0.prob(a) - anchor_dist.prob(a)).abs());
    }
    for a in h1.counts().keys().chain(explorer_dist.probs.keys()) {
        deviation = deviation.max((h1.prob(a) - explorer_dist.prob(a)).abs());
    }
    // Three worst-case binomial standard errors.
    let large_sample = deviation <= 3.0 * 0.5 / (g as f64).sqrt();

    let ratio = |a: &Answer| {
        let p = anchor_dist.prob(a);
        if p > 0.0 {
            explorer_dist.prob(a) / p
        } else {
            0.0
        }
    };
    let r_true = ratio(&spec.true_answer);
    let (gap, r_sp) = match &spec.spurious_answer {
        Some(sp) => {
            let pt = anchor_dist.prob(&spec.true_answer);
            let gap = if pt > 0.0 {
                anchor_dist.prob(sp) / pt
            } else {
                f64::INFINITY
            };
            (Some(gap), Some(ratio(sp)))
        }
        None => (None, None),
    };
    let spurious_majority = gap.is_some_and(|g| g >= thresholds.gap);
    let effective_unlearning = r_sp.is_some_and(|rs| r_true >= thresholds.ratio * rs);

    Ok(TheoremReport {
        question_id: spec.question_id,
        true_answer: spec.true_answer.clone(),
        spurious_answer: spec.spurious_answer.clone(),
        mv_pick,
        dc_pick_exact,
        dc_fallback_exact,
        mv_pick_monte_carlo: h0.majority(),
        dc_pick_monte_carlo: outcome.pseudo_label,
        group_size: g,
        score_true: scores.get(&spec.true_answer).copied().unwrap_or(0.0),
        score_spurious: spec
            .spurious_answer
            .as_ref()
            .map(|sp| scores.get(sp).copied().unwrap_or(0.0)),
        anchor_dist,
        explorer_dist,
        assumptions: AssumptionChecks {
            spurious_majority,
            effective_unlearning,
            large_sample,
            gap,
            r_true,
            r_sp,
            max_sampling_deviation: deviation,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;

    fn dist(pairs: &[(u32, f64)], invalid: f64) -> ExactDistribution {
        ExactDistribution {
            probs: pairs.iter().map(|&(t, p)| (Answer::single(t), p)).collect(),
            invalid_mass: invalid,
        }
    }

    #[test]
    fn uniform_direct_answer_policy_splits_evenly() {
        // Root emits SEP; the answer row is uniform over two content tokens.
        let v = Vocab::new(4, 2, 3).unwrap();
        let mut p = PolicyParams::new(0, v, 3).unwrap();
        p.set_logits(&[], vec![-50.0, -50.0, 0.0, -50.0]).unwrap();
        p.set_logits(&[2], vec![0.0, 0.0, -50.0, -50.0]).unwrap();
        for a in 0..2 {
            p.set_logits(&[2, a], vec![-50.0, -50.0, -50.0, 0.0]).unwrap();
        }
        let d = exact_answer_distribution(&p).unwrap();
        assert!((d.prob(&Answer::single(0)) - 0.5).abs() < 1e-9);
        assert!((d.prob(&Answer::single(1)) - 0.5).abs() < 1e-9);
        assert!((d.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_sums_to_one_on_uniform_policy() {
        let v = Vocab::with_size(5).unwrap();
        let p = PolicyParams::new(0, v, 4).unwrap();
        let d = exact_answer_distribution(&p).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-12);
        let paths = enumerate_paths(&p).unwrap();
        let s: f64 = paths.iter().map(|(_, q)| q).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_bound_is_enforced() {
        let v = Vocab::with_size(10).unwrap();
        let p = PolicyParams::new(0, v, 7).unwrap();
        assert!(matches!(
            exact_answer_distribution(&p),
            Err(DcrlError::EnumerationBound { .. })
        ));
        let ok = PolicyParams::new(0, v, 6).unwrap();
        assert!(check_enumeration_bound(&ok).is_ok());
    }

    #[test]
    fn closed_form_scores_match_theorem_substitution() {
        let anchor = dist(&[(0, 0.7), (1, 0.2), (2, 0.1)], 0.0);
        let explorer = dist(&[(0, 0.05), (1, 0.4), (2, 0.55)], 0.0);
        let s = closed_form_scores(&anchor, &explorer);
        // 2 r pi / (1 + r) with r = 1/14 and r = 2.
        let sp = 2.0 * (1.0 / 14.0) * 0.7 / (1.0 + 1.0 / 14.0);
        let tr = 2.0 * 2.0 * 0.2 / 3.0;
        assert!((s[&Answer::single(0)] - sp).abs() < 1e-12);
        assert!((s[&Answer::single(0)] - 0.093_333_333_333).abs() < 1e-9);
        assert!((s[&Answer::single(1)] - tr).abs() < 1e-12);
        assert!((s[&Answer::single(1)] - 0.266_666_666_667).abs() < 1e-9);
        assert_eq!(anchor.mode(), Some(Answer::single(0)));
        // z: 2*0.1*0.55/0.65 = 0.169 < 0.2667
        assert_eq!(exact_pick(&anchor, &explorer), (Some(Answer::single(1)), false));
    }

    #[test]
    fn vanishing_ratio_sends_score_to_zero() {
        let mut last = f64::INFINITY;
        for r in [1e-1, 1e-3, 1e-6, 1e-9] {
            let anchor = dist(&[(0, 0.7)], 0.3);
            let explorer = dist(&[(0, 0.7 * r)], 1.0 - 0.7 * r);
            let s = closed_form_scores(&anchor, &explorer)[&Answer::single(0)];
            assert!(s < last);
            last = s;
        }
        assert!(last < 2e-9);
    }

    #[test]
    fn disjoint_support_falls_back_to_anchor_mode() {
        let anchor = dist(&[(0, 0.7), (1, 0.3)], 0.0);
        let explorer = dist(&[(2, 1.0)], 0.0);
        assert_eq!(exact_pick(&anchor, &explorer), (Some(Answer::single(0)), true));
    }

    #[test]
    fn entropy_of_known_distributions() {
        assert_eq!(dist(&[(0, 1.0)], 0.0).entropy(), 0.0);
        let k4 = dist(&[(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)], 0.0);
        assert!((k4.entropy() - 4f64.ln()).abs() < 1e-12);
        let planted = dist(&[(0, 0.7), (1, 0.2), (2, 0.1)], 0.0);
        let direct = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((planted.entropy() - direct).abs() < 1e-12);
        assert!((planted.entropy() - 0.8018).abs() < 1e-4);
    }
}
