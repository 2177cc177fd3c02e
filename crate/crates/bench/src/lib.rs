//! Shared fixtures for the criterion benches.

use dcrl_core::experiment::{build_suite, TrainConfig};
use dcrl_core::{PolicyParams, Suite, SuiteConfig};

pub fn train_config(n_questions: usize) -> TrainConfig {
    TrainConfig {
        suite: SuiteConfig {
            n_questions,
            ..SuiteConfig::default()
        },
        steps: 1,
        seed: 17,
        ..TrainConfig::default()
    }
}

pub fn suite(n_questions: usize) -> Suite {
    build_suite(&train_config(n_questions)).expect("fixture suite")
}

/// The calibrated anchor of the first spurious task in a small suite.
pub fn spurious_anchor() -> PolicyParams {
    let s = suite(10);
    let t = s
        .tasks
        .iter()
        .find(|t| t.spec.spurious_answer.is_some())
        .expect("fixture suite has a spurious task");
    t.anchor.clone()
}
