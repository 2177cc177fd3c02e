use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::mix_seed;
use crate::error::{DcrlError, Result};
use crate::oracle::exact_answer_distribution;
use crate::policy::{sample_group, Answer, PolicyParams, QuestionId, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub question_id: QuestionId,
    pub exact_pass1: f64,
    pub empirical_pass1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_exact_pass1: f64,
    pub mean_empirical_pass1: f64,
    pub tasks: Vec<TaskEval>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("question_id,exact_pass1,empirical_pass1\n");
        for t in &self.tasks {
            let _ = writeln!(out, "{},{},{}", t.question_id, t.exact_pass1, t.empirical_pass1);
        }
        out
    }
}

/// Exact probability of emitting the true answer, plus the hit rate over
/// `samples` draws, for every question in `truth`.
pub fn evaluate(
    policies: &BTreeMap<QuestionId, PolicyParams>,
    truth: &BTreeMap<QuestionId, Answer>,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples == 0 {
        return Err(DcrlError::InvalidConfig("eval samples must be positive".into()));
    }
    let mut tasks = Vec::with_capacity(truth.len());
    for (&q, answer) in truth {
        let policy = policies
            .get(&q)
            .ok_or_else(|| DcrlError::InvalidTask(format!("no policy for question {q}")))?;
        let exact = exact_answer_distribution(policy)?.prob(answer);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6576_616c, u64::from(q)]));
        let draws = sample_group(policy, Source::Anchor, samples, &mut rng);
        let hits = draws.iter().filter(|t| t.answer.as_ref() == Some(answer)).count();
        tasks.push(TaskEval {
            question_id: q,
            exact_pass1: exact,
            empirical_pass1: hits as f64 / samples as f64,
        });
    }
    let n = tasks.len().max(1) as f64;
    Ok(EvalReport {
        samples,
        mean_exact_pass1: tasks.iter().map(|t| t.exact_pass1).sum::<f64>() / n,
        mean_empirical_pass1: tasks.iter().map(|t| t.empirical_pass1).sum::<f64>() / n,
        tasks,
    })
}
