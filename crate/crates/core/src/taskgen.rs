//! Synthetic questions with planted anchor answer distributions.
//!
//! A task with `reasoning_len >= 1` routes every answer through one or more
//! reasoning tokens at the root:
//!
//! ```text
//! root --r--> r r .. r --SEP--> answer tokens --EOS
//! ```
//!
//! The root row carries the answer masses; everything below it is
//! saturated. How concentrated an answer's mass is on a single root token
//! controls how strongly one unlearning step suppresses it, which is the
//! knob calibration turns to hit a requested robustness ratio.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DcrlError, Result};
use crate::oracle::{answer_distribution_above, exact_rollouts, EXACT_ROLLOUT_FLOOR};
use crate::policy::{Answer, PolicyParams, QuestionId, Token, Vocab};
use crate::unlearning::{make_explorer_weighted, UnlearnConfig};

/// Logit gap between a planted token and everything else in its row.
pub const SATURATION: f64 = 40.0;
pub const DEFAULT_VOCAB_SIZE: usize = 12;
/// Root tokens an answer may be spread over.
pub const MAX_PREFIXES_PER_ANSWER: usize = 4;
/// Calibration succeeds when every ratio is within this relative error.
pub const CALIBRATION_TOLERANCE: f64 = 0.10;

const MASS_TOLERANCE: f64 = 1e-9;
const GRID_POINTS: usize = 12;
const BISECTION_STEPS: usize = 30;
const CALIBRATION_PASSES: usize = 10;
const CONVERGED: f64 = 1e-3;

/// Ground-truth description of one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub question_id: QuestionId,
    pub vocab: Vocab,
    pub true_answer: Answer,
    /// The wrong answer planted as the anchor mode, if any.
    #[serde(default)]
    pub spurious_answer: Option<Answer>,
    /// Anchor marginals. Mass left over goes to `noise_answer`.
    #[serde(with = "crate::answer_map")]
    pub target_anchor_dist: BTreeMap<Answer, f64>,
    /// Requested `pi_explorer(a) / pi_anchor(a)` after one unlearning step.
    #[serde(with = "crate::answer_map", default)]
    pub robustness_ratios: BTreeMap<Answer, f64>,
    /// Catch-all answer for leftover mass; the smallest unused content
    /// token when omitted.
    #[serde(default)]
    pub noise_answer: Option<Answer>,
    pub reasoning_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn max_answer_len(&self) -> usize {
        self.target_anchor_dist
            .keys()
            .chain(self.noise_answer.iter())
            .map(|a| a.0.len())
            .max()
            .unwrap_or(1)
    }

    pub fn max_len(&self) -> usize {
        self.reasoning_len + 1 + self.max_answer_len()
    }

    pub fn validate(&self) -> Result<()> {
        self.planted_masses().map(|_| ())
    }

    /// Every planted answer with its anchor mass, noise included.
    pub fn planted_masses(&self) -> Result<Vec<(Answer, f64)>> {
        let bad = |msg: String| DcrlError::InvalidTask(format!("question {}: {msg}", self.question_id));
        self.vocab.validate()?;
        let check_answer = |a: &Answer| -> Result<()> {
            if a.0.is_empty() {
                return Err(bad("empty answer".into()));
            }
            if let Some(t) =
                a.0.iter()
                    .find(|&&t| t as usize >= self.vocab.size || t == self.vocab.sep || t == self.vocab.eos)
            {
                return Err(bad(format!("answer {a} uses non-content token {t}")));
            }
            Ok(())
        };
        let mut total = 0.0;
        for (a, &p) in &self.target_anchor_dist {
            check_answer(a)?;
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(bad(format!("probability {p} for {a} outside [0, 1]")));
            }
            total += p;
        }
        if total > 1.0 + MASS_TOLERANCE {
            return Err(bad(format!("target probabilities sum to {total} > 1")));
        }
        let p_true = self.target_anchor_dist.get(&self.true_answer).copied().unwrap_or(0.0);
        if p_true <= 0.0 {
            return Err(bad(format!("true answer {} has no anchor mass", self.true_answer)));
        }
        if let Some(sp) = &self.spurious_answer {
            if *sp == self.true_answer {
                return Err(bad("spurious answer equals the true answer".into()));
            }
            let p_sp = self.target_anchor_dist.get(sp).copied().unwrap_or(0.0);
            if p_sp <= p_true {
                return Err(bad(format!(
                    "spurious answer {sp} ({p_sp}) must outweigh the true answer ({p_true})"
                )));
            }
        }
        for (a, &r) in &self.robustness_ratios {
            if !self.target_anchor_dist.contains_key(a) {
                return Err(bad(format!("robustness ratio for unplanted answer {a}")));
            }
            if !(r > 0.0 && r.is_finite()) {
                return Err(bad(format!("robustness ratio {r} for {a} must be positive")));
            }
        }

        let mut masses: Vec<(Answer, f64)> = self
            .target_anchor_dist
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .map(|(a, &p)| (a.clone(), p))
            .collect();
        let remainder = 1.0 - total;
        if remainder > MASS_TOLERANCE {
            let noise = match &self.noise_answer {
                Some(n) => {
                    check_answer(n)?;
                    if self.target_anchor_dist.contains_key(n) {
                        return Err(bad(format!("noise answer {n} is also a planted answer")));
                    }
                    n.clone()
                }
                None => self
                    .vocab
                    .content_tokens()
                    .map(Answer::single)
                    .find(|a| !self.target_anchor_dist.contains_key(a))
                    .ok_or_else(|| bad("no content token left for the noise answer".into()))?,
            };
            masses.push((noise, remainder));
        }
        let norm: f64 = masses.iter().map(|(_, p)| p).sum();
        for (_, p) in &mut masses {
            *p /= norm;
        }
        if self.reasoning_len > 0 && masses.len() > self.vocab.n_content() {
            return Err(bad(format!(
                "{} answers need more root tokens than the {} content tokens available",
                masses.len(),
                self.vocab.n_content()
            )));
        }
        Ok(masses)
    }
}

/// How the anchor routes one answer through root tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub answer: Answer,
    pub mass: f64,
    pub prefixes: Vec<Token>,
    /// Share of `mass` on `prefixes[0]`; the rest is split evenly.
    pub concentration: f64,
}

impl Route {
    fn prefix_masses(&self) -> Vec<f64> {
        let m = self.prefixes.len();
        if m == 1 {
            return vec![self.mass];
        }
        let rest = (1.0 - self.concentration) * self.mass / (m - 1) as f64;
        std::iter::once(self.concentration * self.mass)
            .chain(std::iter::repeat_n(rest, m - 1))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    #[serde(with = "crate::answer_map")]
    pub target_ratios: BTreeMap<Answer, f64>,
    #[serde(with = "crate::answer_map")]
    pub achieved_ratios: BTreeMap<Answer, f64>,
    pub routes: Vec<Route>,
    /// Largest relative error over the requested ratios.
    pub max_relative_error: f64,
    pub within_tolerance: bool,
    pub evaluations: usize,
}

/// Row with `ln(mass)` on supported tokens and a floor `SATURATION` below
/// the heaviest one elsewhere.
fn row_from_masses(mass: &[f64]) -> Vec<f64> {
    let max = mass.iter().copied().fold(0.0_f64, f64::max);
    let floor = max.ln() - SATURATION;
    mass.iter()
        .map(|&m| if m > 0.0 { m.ln().max(floor) } else { floor })
        .collect()
}

/// Plants `items` (answer, weight) below `prefix` as a saturated answer
/// trie terminated by EOS. Weights are normalized.
pub fn plant_distribution(params: &mut PolicyParams, prefix: &[Token], items: &[(Answer, f64)]) -> Result<()> {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(DcrlError::InvalidTask(
            "answer weights must have positive finite sum".into(),
        ));
    }
    let suffixes: Vec<(&[Token], f64)> = items
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(a, w)| (a.tokens(), w / total))
        .collect();
    plant_suffixes(params, &mut prefix.to_vec(), &suffixes)
}

fn plant_suffixes(params: &mut PolicyParams, prefix: &mut Vec<Token>, items: &[(&[Token], f64)]) -> Result<()> {
    let vocab = params.vocab();
    let eos = vocab.eos;
    let mut mass = vec![0.0; vocab.size];
    for (s, m) in items {
        mass[s.first().copied().unwrap_or(eos) as usize] += m;
    }
    if prefix.len() >= params.max_len() {
        if items.iter().any(|(s, _)| !s.is_empty()) {
            return Err(DcrlError::InvalidTask(format!(
                "answer does not fit below prefix {prefix:?} with max_len {}",
                params.max_len()
            )));
        }
        return Ok(());
    }
    params.set_logits(prefix, row_from_masses(&mass))?;
    for t in 0..vocab.size as Token {
        if t == eos || mass[t as usize] <= 0.0 {
            continue;
        }
        let sub: Vec<(&[Token], f64)> = items
            .iter()
            .filter(|(s, _)| s.first() == Some(&t))
            .map(|(s, m)| (&s[1..], *m))
            .collect();
        prefix.push(t);
        plant_suffixes(params, prefix, &sub)?;
        prefix.pop();
    }
    Ok(())
}

/// Assigns root tokens to answers. Every answer gets one. An answer meant
/// to be fragile (requested ratio below 1) gets one shadow token as its
/// calibration knob; answers meant to survive unlearning get up to
/// `MAX_PREFIXES_PER_ANSWER`, heaviest first; leftovers spread answers
/// without a request.
fn allocate_routes(spec: &TaskSpec, masses: &[(Answer, f64)]) -> Vec<Route> {
    let mut tokens: Vec<Token> = spec.vocab.content_tokens().collect();
    tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0x726f_7574_6573));
    let mut routes: Vec<Route> = masses
        .iter()
        .zip(&tokens)
        .map(|((a, p), &t)| Route {
            answer: a.clone(),
            mass: *p,
            prefixes: vec![t],
            concentration: 1.0,
        })
        .collect();
    let mut spare = tokens[routes.len()..].iter().copied();

    let by_mass = |pred: &dyn Fn(&Route) -> bool, routes: &[Route]| {
        let mut idx: Vec<usize> = (0..routes.len()).filter(|&i| pred(&routes[i])).collect();
        idx.sort_by(|&a, &b| routes[b].mass.total_cmp(&routes[a].mass).then(a.cmp(&b)));
        idx
    };
    let ratio = |r: &Route| spec.robustness_ratios.get(&r.answer).copied();
    let fragile = by_mass(&|r: &Route| ratio(r).is_some_and(|x| x < 1.0), &routes);
    let robust = by_mass(&|r: &Route| ratio(r).is_some_and(|x| x >= 1.0), &routes);
    let free = by_mass(&|r: &Route| ratio(r).is_none(), &routes);
    for (group, cap) in [
        (fragile, 2),
        (robust, MAX_PREFIXES_PER_ANSWER),
        (free, MAX_PREFIXES_PER_ANSWER),
    ] {
        'fill: loop {
            let mut progressed = false;
            for &i in &group {
                if routes[i].prefixes.len() >= cap {
                    continue;
                }
                let Some(t) = spare.next() else { break 'fill };
                routes[i].prefixes.push(t);
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
    }
    for r in &mut routes {
        r.concentration = match ratio(r) {
            Some(x) if x < 1.0 => 1.0,
            _ => 1.0 / r.prefixes.len() as f64,
        };
    }
    routes
}

fn build_from_routes(spec: &TaskSpec, masses: &[(Answer, f64)], routes: &[Route]) -> Result<PolicyParams> {
    let vocab = spec.vocab;
    let mut params = PolicyParams::new(spec.question_id, vocab, spec.max_len())?;
    if spec.reasoning_len == 0 {
        let mut root = vec![0.0; vocab.size];
        root[vocab.sep as usize] = 1.0;
        params.set_logits(&[], row_from_masses(&root))?;
        return plant_distribution(&mut params, &[vocab.sep], masses).map(|_| params);
    }
    let mut root = vec![0.0; vocab.size];
    for route in routes {
        for (&t, m) in route.prefixes.iter().zip(route.prefix_masses()) {
            root[t as usize] = m;
        }
    }
    params.set_logits(&[], row_from_masses(&root))?;
    let mut prefix = Vec::with_capacity(spec.max_len());
    for route in routes {
        for &r in &route.prefixes {
            prefix.clear();
            prefix.push(r);
            while prefix.len() < spec.reasoning_len {
                let mut row = vec![0.0; vocab.size];
                row[r as usize] = 1.0;
                params.set_logits(&prefix, row_from_masses(&row))?;
                prefix.push(r);
            }
            let mut row = vec![0.0; vocab.size];
            row[vocab.sep as usize] = 1.0;
            params.set_logits(&prefix, row_from_masses(&row))?;
            prefix.push(vocab.sep);
            plant_distribution(&mut params, &prefix, &[(route.answer.clone(), 1.0)])?;
        }
    }
    Ok(params)
}

/// One unlearning step on the anchor's exact rollout distribution instead of
/// a sampled group.
pub fn expected_explorer(anchor: &PolicyParams, unlearn: &UnlearnConfig) -> Result<PolicyParams> {
    let rollouts = exact_rollouts(anchor, EXACT_ROLLOUT_FLOOR);
    let weighted: Vec<(&[Token], f64)> = rollouts.iter().map(|(t, w)| (t.as_slice(), *w)).collect();
    make_explorer_weighted(anchor, &weighted, unlearn)
}

/// Explorer-to-anchor probability ratio for every planted answer after one
/// unlearning step on exact-mode rollouts.
pub fn measure_ratios(anchor: &PolicyParams, unlearn: &UnlearnConfig) -> Result<BTreeMap<Answer, f64>> {
    let explorer = expected_explorer(anchor, unlearn)?;
    let (a, _) = answer_distribution_above(anchor, EXACT_ROLLOUT_FLOOR);
    let (e, _) = answer_distribution_above(&explorer, EXACT_ROLLOUT_FLOOR);
    Ok(a.probs
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|(ans, &p)| (ans.clone(), e.prob(ans) / p))
        .collect())
}

/// Anchor with the planted marginals and no robustness calibration.
pub fn build_task(spec: &TaskSpec) -> Result<PolicyParams> {
    let masses = spec.planted_masses()?;
    let routes = allocate_routes(spec, &masses);
    build_from_routes(spec, &masses, &routes)
}

/// Anchor with the planted marginals whose routing is tuned so that one
/// unlearning step under `unlearn` produces the requested ratios. Each
/// answer's concentration is searched on a grid, then bisected inside the
/// bracket nearest the best grid point; passes repeat over all answers.
pub fn build_task_calibrated(spec: &TaskSpec, unlearn: &UnlearnConfig) -> Result<(PolicyParams, CalibrationReport)> {
    unlearn.validate()?;
    let masses = spec.planted_masses()?;
    let mut routes = allocate_routes(spec, &masses);
    let evaluations = std::cell::Cell::new(0usize);

    let tunable: Vec<(usize, f64)> = if spec.reasoning_len == 0 {
        Vec::new()
    } else {
        routes
            .iter()
            .enumerate()
            .filter_map(|(i, r)| spec.robustness_ratios.get(&r.answer).map(|&t| (i, t)))
            .filter(|&(i, _)| routes[i].prefixes.len() > 1)
            .collect()
    };

    let eval = |routes: &[Route], i: usize, target: f64| -> Result<f64> {
        evaluations.set(evaluations.get() + 1);
        let anchor = build_from_routes(spec, &masses, routes)?;
        let ratios = measure_ratios(&anchor, unlearn)?;
        let r = ratios.get(&routes[i].answer).copied().unwrap_or(0.0);
        Ok(r - target)
    };

    for _ in 0..CALIBRATION_PASSES {
        if !tunable.is_empty() {
            let anchor = build_from_routes(spec, &masses, &routes)?;
            let ratios = measure_ratios(&anchor, unlearn)?;
            evaluations.set(evaluations.get() + 1);
            let worst = tunable
                .iter()
                .map(|&(i, t)| (ratios.get(&routes[i].answer).copied().unwrap_or(0.0) - t).abs() / t)
                .fold(0.0_f64, f64::max);
            if worst < CONVERGED {
                break;
            }
        }
        for &(i, target) in &tunable {
            let lo = 1.0 / routes[i].prefixes.len() as f64;
            let mut trial = routes.clone();
            let grid: Vec<f64> = (0..GRID_POINTS)
                .map(|k| lo + (1.0 - lo) * k as f64 / (GRID_POINTS - 1) as f64)
                .collect();
            let mut errs = Vec::with_capacity(GRID_POINTS);
            for &f in &grid {
                trial[i].concentration = f;
                errs.push(eval(&trial, i, target)?);
            }
            let best = (0..GRID_POINTS)
                .min_by(|&a, &b| errs[a].abs().total_cmp(&errs[b].abs()))
                .expect("grid is non-empty");
            let bracket = [
                best.checked_sub(1).map(|j| (j, best)),
                (best + 1 < GRID_POINTS).then_some((best, best + 1)),
            ]
            .into_iter()
            .flatten()
            .find(|&(a, b)| errs[a] * errs[b] <= 0.0);
            let mut chosen = grid[best];
            if let Some((a, b)) = bracket {
                let (mut fa, mut fb, mut ea) = (grid[a], grid[b], errs[a]);
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (fa + fb);
                    trial[i].concentration = mid;
                    let em = eval(&trial, i, target)?;
                    if em == 0.0 {
                        fa = mid;
                        fb = mid;
                        break;
                    }
                    if ea * em < 0.0 {
                        fb = mid;
                    } else {
                        fa = mid;
                        ea = em;
                    }
                }
                chosen = 0.5 * (fa + fb);
            }
            routes[i].concentration = chosen;
        }
    }

    let anchor = build_from_routes(spec, &masses, &routes)?;
    let achieved = measure_ratios(&anchor, unlearn)?;
    let mut max_relative_error = 0.0_f64;
    for (a, &t) in &spec.robustness_ratios {
        let r = achieved.get(a).copied().unwrap_or(0.0);
        max_relative_error = max_relative_error.max((r - t).abs() / t);
    }
    let report = CalibrationReport {
        target_ratios: spec.robustness_ratios.clone(),
        achieved_ratios: achieved,
        routes,
        max_relative_error,
        within_tolerance: max_relative_error <= CALIBRATION_TOLERANCE,
        evaluations: evaluations.get(),
    };
    Ok((anchor, report))
}

/// Sampling ranges for generated suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_questions: usize,
    /// Exactly `round(n_questions * spurious_fraction)` questions get a
    /// spurious anchor mode.
    pub spurious_fraction: f64,
    pub vocab_size: usize,
    pub reasoning_len: usize,
    /// Anchor mass of the modal answer.
    pub mode_mass: [f64; 2],
    /// `pi(spurious) / pi(true)` on spurious questions.
    pub spurious_gap: [f64; 2],
    /// `pi(true) / pi(decoy)` on honest questions.
    pub honest_margin: [f64; 2],
    /// Range for `r_spurious`, further capped at `spurious_ratio_budget / gap`.
    pub r_spurious: [f64; 2],
    /// Upper bound on `gap * r_spurious`. Thresholds on gap and ratio alone
    /// do not make the true answer win the harmonic election; keeping the
    /// spurious answer's surviving mass below a fraction of the true
    /// answer's anchor mass does.
    pub spurious_ratio_budget: f64,
    /// `r_true` as a multiple of the ratio every other answer would get if
    /// the spurious mass lost to unlearning were spread proportionally.
    pub r_true_lift: [f64; 2],
    /// Lower bound on `r_true / r_spurious`.
    pub min_ratio_gap: f64,
    pub n_distractors: [usize; 2],
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_questions: 100,
            spurious_fraction: 0.3,
            vocab_size: DEFAULT_VOCAB_SIZE,
            reasoning_len: 1,
            mode_mass: [0.5, 0.75],
            spurious_gap: [2.0, 3.0],
            honest_margin: [1.5, 3.0],
            r_spurious: [0.1, 0.3],
            spurious_ratio_budget: 0.5,
            r_true_lift: [1.0, 1.15],
            min_ratio_gap: 4.0,
            n_distractors: [1, 3],
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DcrlError::InvalidConfig(format!("suite: {m}")));
        if self.n_questions == 0 {
            return bad("n_questions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_fraction) {
            return bad(format!("spurious_fraction {} outside [0, 1]", self.spurious_fraction));
        }
        Vocab::with_size(self.vocab_size)?;
        for (name, [lo, hi]) in [
            ("mode_mass", self.mode_mass),
            ("spurious_gap", self.spurious_gap),
            ("honest_margin", self.honest_margin),
            ("r_spurious", self.r_spurious),
            ("r_true_lift", self.r_true_lift),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] must satisfy 0 < lo <= hi"));
            }
        }
        if !(self.spurious_ratio_budget > 0.0 && self.min_ratio_gap > 0.0) {
            return bad("spurious_ratio_budget and min_ratio_gap must be positive".into());
        }
        if self.mode_mass[1] >= 1.0 {
            return bad("mode_mass must stay below 1".into());
        }
        if self.spurious_gap[0] <= 1.0 || self.honest_margin[0] <= 1.0 {
            return bad("spurious_gap and honest_margin must exceed 1".into());
        }
        let [dlo, dhi] = self.n_distractors;
        if dlo > dhi {
            return bad("n_distractors range is inverted".into());
        }
        if dhi + 3 > self.vocab_size - 2 {
            return bad(format!(
                "{} distractors plus true, rival and noise answers exceed {} content tokens",
                dhi,
                self.vocab_size - 2
            ));
        }
        Ok(())
    }

    pub fn n_spurious(&self) -> usize {
        (self.n_questions as f64 * self.spurious_fraction).round() as usize
    }
}

/// One generated question: ground truth, the calibrated anchor, and how
/// well calibration did.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub anchor: PolicyParams,
    pub calibration: CalibrationReport,
}

/// What the learner is allowed to see: the question id and its anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerTask {
    pub question_id: QuestionId,
    pub anchor: PolicyParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub config: SuiteConfig,
    pub tasks: Vec<Task>,
}

impl Suite {
    pub fn learner_view(&self) -> Vec<LearnerTask> {
        self.tasks
            .iter()
            .map(|t| LearnerTask {
                question_id: t.spec.question_id,
                anchor: t.anchor.clone(),
            })
            .collect()
    }

    pub fn ground_truth(&self) -> BTreeMap<QuestionId, Answer> {
        self.tasks
            .iter()
            .map(|t| (t.spec.question_id, t.spec.true_answer.clone()))
            .collect()
    }

    pub fn specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn spurious_ids(&self) -> BTreeSet<QuestionId> {
        self.tasks
            .iter()
            .filter(|t| t.spec.spurious_answer.is_some())
            .map(|t| t.spec.question_id)
            .collect()
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Splits `rest` over `slots` shares, each below `cap`, with mild jitter.
fn split_rest<R: Rng + ?Sized>(rng: &mut R, rest: f64, slots: usize, cap: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..slots).map(|_| 1.0 + rng.random_range(0.0..0.5)).collect();
    let total: f64 = w.iter().sum();
    let shares: Vec<f64> = w.iter().map(|x| rest * x / total).collect();
    if shares.iter().all(|&s| s < cap) {
        shares
    } else {
        vec![rest / slots as f64; slots]
    }
}

/// Draws one question spec. Spurious questions put the mode on a wrong
/// answer with the true answer as runner-up; honest ones put it on the
/// true answer with a wrong decoy as runner-up. Remaining mass is spread
/// over distractors and a noise answer, each at most half the runner-up.
pub fn sample_spec<R: Rng + ?Sized>(
    cfg: &SuiteConfig,
    question_id: QuestionId,
    spurious: bool,
    rng: &mut R,
) -> Result<TaskSpec> {
    let vocab = Vocab::with_size(cfg.vocab_size)?;
    let mut tokens: Vec<Token> = vocab.content_tokens().collect();
    tokens.shuffle(rng);
    let mode = uniform(rng, cfg.mode_mass);
    // Capped so that some mass is always left for the minor answers.
    let gap = uniform(rng, if spurious { cfg.spurious_gap } else { cfg.honest_margin });
    let runner_up = (mode / gap).min(0.9 * (1.0 - mode));
    let rest = (1.0 - mode - runner_up).max(0.0);
    let cap = 0.5 * runner_up;
    let needed = (rest / cap).ceil() as usize;
    let sampled = rng.random_range(cfg.n_distractors[0]..=cfg.n_distractors[1]) + 1;
    let slots = sampled.max(needed).max(1);
    if slots + 2 > tokens.len() {
        return Err(DcrlError::InvalidConfig(format!(
            "question {question_id}: {slots} minor answers do not fit in {} content tokens",
            tokens.len()
        )));
    }
    let shares = split_rest(rng, rest, slots, cap);

    let true_answer = Answer::single(tokens[0]);
    let rival = Answer::single(tokens[1]);
    let mut dist = BTreeMap::new();
    let mut ratios = BTreeMap::new();
    if spurious {
        dist.insert(rival.clone(), mode);
        dist.insert(true_answer.clone(), runner_up);
        let [lo, hi] = cfg.r_spurious;
        let r_sp = uniform(
            rng,
            [
                lo.min(cfg.spurious_ratio_budget / gap),
                hi.min(cfg.spurious_ratio_budget / gap),
            ],
        );
        let neutral = (1.0 - r_sp * mode) / (1.0 - mode);
        let r_t = (neutral * uniform(rng, cfg.r_true_lift)).max(cfg.min_ratio_gap * r_sp);
        ratios.insert(rival.clone(), r_sp);
        ratios.insert(true_answer.clone(), r_t);
    } else {
        dist.insert(true_answer.clone(), mode);
        dist.insert(rival.clone(), runner_up);
    }
    // The last share is left implicit and becomes the noise answer.
    for (k, &s) in shares[..slots - 1].iter().enumerate() {
        dist.insert(Answer::single(tokens[2 + k]), s);
    }
    Ok(TaskSpec {
        question_id,
        vocab,
        true_answer,
        spurious_answer: spurious.then_some(rival),
        target_anchor_dist: dist,
        robustness_ratios: ratios,
        noise_answer: Some(Answer::single(tokens[1 + slots])),
        reasoning_len: cfg.reasoning_len,
        seed: rng.random(),
    })
}

/// A single sharp wrong mode (mass in `[0.8, 0.95)`) routed through one
/// reasoning prefix, plus 2 to 5 equal minor answers. Used to probe how much
/// one unlearning step flattens a confident anchor.
pub fn sharp_mode_spec<R: Rng + ?Sized>(
    question_id: QuestionId,
    reasoning_len: usize,
    rng: &mut R,
) -> Result<TaskSpec> {
    let vocab = Vocab::with_size(DEFAULT_VOCAB_SIZE)?;
    let mut tokens: Vec<Token> = vocab.content_tokens().collect();
    tokens.shuffle(rng);
    let mode: f64 = rng.random_range(0.8..0.95);
    let k: usize = rng.random_range(2..=5);
    let minor = (1.0 - mode) / (k as f64 + 0.5);
    let mut dist: BTreeMap<Answer, f64> = [(Answer::single(tokens[0]), mode)].into_iter().collect();
    for &t in &tokens[1..=k] {
        dist.insert(Answer::single(t), minor);
    }
    Ok(TaskSpec {
        question_id,
        vocab,
        true_answer: Answer::single(tokens[1]),
        spurious_answer: Some(Answer::single(tokens[0])),
        target_anchor_dist: dist,
        // Any target below 1 marks the mode as fragile.
        robustness_ratios: [(Answer::single(tokens[0]), 0.5)].into_iter().collect(),
        noise_answer: Some(Answer::single(tokens[k + 1])),
        reasoning_len,
        seed: rng.random(),
    })
}

/// Generates and calibrates a full suite. Exactly `cfg.n_spurious()`
/// questions, chosen at random, carry a spurious anchor mode.
pub fn generate_suite<R: Rng + ?Sized>(cfg: &SuiteConfig, unlearn: &UnlearnConfig, rng: &mut R) -> Result<Suite> {
    cfg.validate()?;
    let n = cfg.n_questions;
    let mut flags: Vec<bool> = (0..n).map(|i| i < cfg.n_spurious()).collect();
    flags.shuffle(rng);
    let specs = flags
        .iter()
        .enumerate()
        .map(|(i, &sp)| sample_spec(cfg, i as QuestionId, sp, rng))
        .collect::<Result<Vec<_>>>()?;
    let tasks = {
        use rayon::prelude::*;
        specs
            .into_par_iter()
            .map(|spec| {
                let (anchor, calibration) = build_task_calibrated(&spec, unlearn)?;
                Ok(Task {
                    spec,
                    anchor,
                    calibration,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Suite {
        config: cfg.clone(),
        tasks,
    })
}

/// Every reachable row up to depth `max_len - 1` filled with logits drawn
/// uniformly from `[-scale, scale]`. Prefixes containing EOS are skipped.
pub fn random_policy<R: Rng + ?Sized>(
    question_id: QuestionId,
    vocab: Vocab,
    max_len: usize,
    scale: f64,
    rng: &mut R,
) -> Result<PolicyParams> {
    let mut params = PolicyParams::new(question_id, vocab, max_len)?;
    let mut frontier: Vec<Vec<Token>> = vec![Vec::new()];
    while let Some(prefix) = frontier.pop() {
        let row: Vec<f64> = (0..vocab.size)
            .map(|_| {
                if scale > 0.0 {
                    rng.random_range(-scale..=scale)
                } else {
                    0.0
                }
            })
            .collect();
        params.set_logits(&prefix, row)?;
        if prefix.len() + 1 < max_len {
            for t in (0..vocab.size as Token).filter(|&t| t != vocab.eos) {
                let mut next = prefix.clone();
                next.push(t);
                frontier.push(next);
            }
        }
    }
    Ok(params)
}
