use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::config::{Method, TrainConfig};
use super::eval::evaluate;
use super::metrics::{summarize, MetricsRecord, RewardSummary, RunSummary};
use crate::adaptive_sampler::{consensus_rate, select_training_set, ConsensusTracker, GateMode};
use crate::consensus::{assign_rewards, elect, histogram, majority_outcome, pooled_outcome, ConsensusOutcome};
use crate::error::{DcrlError, Result};
use crate::grpo::{normalize_advantages, update_policy, PreparedGroup, RatioMode};
use crate::oracle::{answer_distribution_above, EXACT_ROLLOUT_FLOOR};
use crate::policy::{exact_seq_prob, sample_group, Answer, PolicyParams, QuestionId, Source, Trajectory};
use crate::taskgen::{generate_suite, LearnerTask, Suite, TaskSpec};
use crate::unlearning::make_explorer;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of `parts`, used to derive independent RNG streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6463_726c, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

const SUITE_STREAM: u64 = 0x0073_7569_7465;
const SCHEDULE_STREAM: u64 = 0x0073_6368_6564;
const ROLLOUT_STREAM: u64 = 0x726f_6c6c;

/// The suite a config trains on, reproducible from `cfg.seed`.
pub fn build_suite(cfg: &TrainConfig) -> Result<Suite> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, SUITE_STREAM]));
    generate_suite(&cfg.suite, &cfg.unlearn, &mut rng)
}

/// Shuffled passes over the suite; a batch never repeats a question.
struct EpochSchedule {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSchedule {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SCHEDULE_STREAM])),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                // Questions already in this batch wait until later in the new pass.
                let (fresh, held): (Vec<usize>, Vec<usize>) = self.order.iter().partition(|i| !batch.contains(*i));
                self.order = fresh.into_iter().chain(held).collect();
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch.sort_unstable();
        batch
    }
}

struct Sampled {
    anchor_rollouts: Vec<Trajectory>,
    explorer: Option<(PolicyParams, Vec<Trajectory>)>,
    outcome: ConsensusOutcome,
    rho: f64,
}

struct Updated {
    policy: PolicyParams,
    gate_open: bool,
    training_answers: Vec<Option<Answer>>,
    rewards: Vec<f64>,
    n_explorer: usize,
    degenerate: bool,
}

fn entropy(policy: &PolicyParams) -> f64 {
    answer_distribution_above(policy, EXACT_ROLLOUT_FLOOR).0.entropy()
}

fn sample_question(cfg: &TrainConfig, step: usize, policy: &PolicyParams) -> Result<Sampled> {
    let q = policy.question_id();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, ROLLOUT_STREAM, step as u64, u64::from(q)]));
    let anchor_rollouts = sample_group(policy, Source::Anchor, cfg.group_size, &mut rng);
    let h0 = histogram(&anchor_rollouts)?;
    let explorer = if cfg.method.uses_explorer() {
        let explorer = make_explorer(policy, &anchor_rollouts, &cfg.unlearn)?;
        let rollouts = sample_group(&explorer, Source::Explorer, cfg.group_size, &mut rng);
        Some((explorer, rollouts))
    } else {
        None
    };
    let outcome = match (&explorer, cfg.method) {
        (None, _) | (_, Method::MajorityVote) => majority_outcome(&h0),
        (Some((_, o1)), Method::Dcrl) => elect(&h0, &histogram(o1)?)?,
        (Some((_, o1)), Method::PooledMajority) => pooled_outcome(&h0, &histogram(o1)?),
    };
    let rho = consensus_rate(&anchor_rollouts, outcome.anchor_majority.as_ref())?;
    Ok(Sampled {
        anchor_rollouts,
        explorer,
        outcome,
        rho,
    })
}

fn numerical_abort(
    step: usize,
    policy: &PolicyParams,
    detail: &str,
    rewards: &[f64],
    training: &[Trajectory],
) -> DcrlError {
    let checkpoint: serde_json::Value =
        serde_json::from_str(&policy.to_checkpoint_json()).unwrap_or(serde_json::Value::Null);
    DcrlError::NumericalAbort {
        step,
        question_id: policy.question_id(),
        detail: detail.to_string(),
        dump: Box::new(json!({
            "step": step,
            "question_id": policy.question_id(),
            "detail": detail,
            "policy": checkpoint,
            "rewards": rewards,
            "training_tokens": training.iter().map(|t| &t.tokens).collect::<Vec<_>>(),
        })),
    }
}

fn update_question(
    cfg: &TrainConfig,
    step: usize,
    policy: &PolicyParams,
    sampled: Sampled,
    gate_signal: f64,
    reference: Option<&PolicyParams>,
) -> Result<Updated> {
    let explorer_rollouts: &[Trajectory] = sampled.explorer.as_ref().map_or(&[], |(_, o)| o.as_slice());
    let threshold = cfg.sampler.threshold;
    let signal = if cfg.method.uses_explorer() { gate_signal } else { 0.0 };
    let training = select_training_set(signal, &sampled.anchor_rollouts, explorer_rollouts, threshold);
    let gate_open = training.len() > sampled.anchor_rollouts.len();
    let rewards = assign_rewards(&training, &sampled.outcome);
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(numerical_abort(step, policy, "non-finite reward", &rewards, &training));
    }
    let advantages = normalize_advantages(&rewards)?;
    if cfg!(debug_assertions) && !advantages.degenerate {
        let n = advantages.advantages.len() as f64;
        let mean = advantages.advantages.iter().sum::<f64>() / n;
        let var = advantages.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        debug_assert!(
            mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6,
            "advantage group not standardized"
        );
    }
    let degenerate = advantages.degenerate;
    let old_probs = match cfg.grpo.ratio_mode {
        RatioMode::Behavior => training.iter().map(Trajectory::behavior_prob).collect(),
        RatioMode::AnchorOnly => training
            .iter()
            .map(|t| exact_seq_prob(policy, &t.tokens))
            .collect::<Result<Vec<_>>>()?,
    };
    let n_explorer = training.iter().filter(|t| t.source == Source::Explorer).count();
    let training_answers = training.iter().map(|t| t.answer.clone()).collect();
    let group = PreparedGroup::new(training, old_probs, advantages)?;
    let updated = update_policy(policy, std::slice::from_ref(&group), &cfg.grpo, reference)?;
    if !updated.is_finite() {
        return Err(numerical_abort(
            step,
            &updated,
            "non-finite logits after update",
            &rewards,
            &group.trajectories,
        ));
    }
    Ok(Updated {
        policy: updated,
        gate_open,
        training_answers,
        rewards,
        n_explorer,
        degenerate,
    })
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub policies: BTreeMap<QuestionId, PolicyParams>,
    pub summary: RunSummary,
}

/// Generates the suite from `cfg` and trains on it.
pub fn run_training(cfg: &TrainConfig) -> Result<(Suite, RunOutput)> {
    cfg.validate()?;
    let suite = build_suite(cfg)?;
    let out = run_on_suite(cfg, &suite)?;
    Ok((suite, out))
}

pub fn run_on_suite(cfg: &TrainConfig, suite: &Suite) -> Result<RunOutput> {
    run_on_tasks(cfg, &suite.learner_view(), &suite.ground_truth())
}

/// Trains on the learner view. `truth` feeds metrics and evaluation only;
/// no learning-path call receives it.
pub fn run_on_tasks(
    cfg: &TrainConfig,
    tasks: &[LearnerTask],
    truth: &BTreeMap<QuestionId, Answer>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(DcrlError::Empty("task list"));
    }
    let mut policies: Vec<PolicyParams> = tasks.iter().map(|t| t.anchor.clone()).collect();
    let reference: Option<Vec<PolicyParams>> = cfg.grpo.kl_enabled.then(|| policies.clone());
    let mut tracker = ConsensusTracker::new(cfg.sampler.window, cfg.sampler.threshold)?;
    let mut schedule = EpochSchedule::new(tasks.len(), cfg.seed);
    let batch_size = cfg.batch().min(tasks.len());
    let mut records = Vec::with_capacity(cfg.steps * batch_size);

    for step in 0..cfg.steps {
        let batch = schedule.next_batch(batch_size);
        let sampled: Vec<Sampled> = batch
            .par_iter()
            .map(|&i| sample_question(cfg, step, &policies[i]))
            .collect::<Result<_>>()?;
        let batch_rho = sampled.iter().map(|s| s.rho).sum::<f64>() / sampled.len() as f64;
        let mean_rho = tracker.update_and_mean(batch_rho);

        let anchor_entropy: Vec<f64> = batch.par_iter().map(|&i| entropy(&policies[i])).collect();
        let explorer_entropy: Vec<Option<f64>> = sampled
            .par_iter()
            .map(|s| s.explorer.as_ref().map(|(e, _)| entropy(e)))
            .collect();
        let meta: Vec<(f64, ConsensusOutcome)> = sampled.iter().map(|s| (s.rho, s.outcome.clone())).collect();

        let updated: Vec<Updated> = batch
            .par_iter()
            .zip(sampled.into_par_iter())
            .map(|(&i, s)| {
                let signal = match cfg.sampler.gate_mode {
                    GateMode::Windowed => mean_rho,
                    GateMode::Instantaneous => s.rho,
                };
                update_question(cfg, step, &policies[i], s, signal, reference.as_ref().map(|r| &r[i]))
            })
            .collect::<Result<_>>()?;

        for (k, (&i, up)) in batch.iter().zip(updated).enumerate() {
            let q = tasks[i].question_id;
            let y = truth.get(&q);
            let (rho, outcome) = &meta[k];
            let count = |v: f64| up.rewards.iter().filter(|&&r| r == v).count();
            let n_one_correct = up
                .training_answers
                .iter()
                .zip(&up.rewards)
                .filter(|(a, &r)| r == 1.0 && a.as_ref().is_some() && a.as_ref() == y)
                .count();
            records.push(MetricsRecord {
                step,
                question_id: q,
                rho_t: *rho,
                mean_rho,
                gate_open: up.gate_open,
                label_correct: outcome.pseudo_label.is_some() && outcome.pseudo_label.as_ref() == y,
                anchor_label_correct: outcome.anchor_majority.is_some() && outcome.anchor_majority.as_ref() == y,
                pseudo_label: outcome.pseudo_label.clone(),
                anchor_majority: outcome.anchor_majority.clone(),
                rewards: RewardSummary {
                    n_train: up.rewards.len(),
                    n_explorer: up.n_explorer,
                    mean: up.rewards.iter().sum::<f64>() / up.rewards.len() as f64,
                    n_one: count(1.0),
                    n_half: count(0.5),
                    n_zero: count(0.0),
                    n_one_correct,
                    degenerate: up.degenerate,
                },
                anchor_entropy: anchor_entropy[k],
                explorer_entropy: explorer_entropy[k],
                fallback_used: outcome.fallback_used,
            });
            policies[i] = up.policy;
        }
    }

    let policies: BTreeMap<QuestionId, PolicyParams> = policies.into_iter().map(|p| (p.question_id(), p)).collect();
    let eval = evaluate(&policies, truth, cfg.eval_samples, cfg.seed)?;
    let summary = summarize(cfg.method, cfg.seed, cfg.steps, tasks.len(), &records, eval);
    Ok(RunOutput {
        records,
        policies,
        summary,
    })
}

/// One JSON object per line, in emission order.
pub fn metrics_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `config.json`, `suite.json`, `metrics.jsonl`, `summary.json` and
/// `checkpoints/q<id>.json` under `dir`.
pub fn write_run(dir: &Path, cfg: &TrainConfig, suite: &Suite, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::write(dir.join("suite.json"), serde_json::to_string_pretty(&suite.specs())?)?;
    fs::write(dir.join("metrics.jsonl"), metrics_jsonl(&out.records)?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)?)?;
    for (q, p) in &out.policies {
        fs::write(
            dir.join("checkpoints").join(format!("q{q:05}.json")),
            p.to_checkpoint_json(),
        )?;
    }
    Ok(())
}

pub fn load_checkpoints(dir: &Path) -> Result<BTreeMap<QuestionId, PolicyParams>> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<_> = fs::read_dir(dir.join("checkpoints"))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.sort();
    for path in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        let p = PolicyParams::from_checkpoint_json(&fs::read_to_string(&path)?)?;
        out.insert(p.question_id(), p);
    }
    Ok(out)
}

pub fn load_suite_specs(dir: &Path) -> Result<Vec<TaskSpec>> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("suite.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_each_question_once_per_pass() {
        let mut s = EpochSchedule::new(7, 3);
        let mut seen = Vec::new();
        for _ in 0..7 {
            seen.extend(s.next_batch(1));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        for _ in 0..20 {
            let b = s.next_batch(3);
            let mut d = b.clone();
            d.dedup();
            assert_eq!(d.len(), 3);
        }
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
    }
}
