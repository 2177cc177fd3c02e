//! Training-loop behaviour: baselines, bookkeeping, label isolation, persistence.

use std::collections::BTreeMap;

use dcrl_core::experiment::{
    build_suite, evaluate, load_checkpoints, load_suite_specs, run_on_suite, run_on_tasks, run_training, write_run,
    Method, TrainConfig,
};
use dcrl_core::oracle::exact_answer_distribution;
use dcrl_core::{Answer, PolicyParams, SuiteConfig, Vocab};

fn small(n: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        suite: SuiteConfig {
            n_questions: n,
            ..SuiteConfig::default()
        },
        steps,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn majority_vote_never_builds_an_explorer() {
    let cfg = TrainConfig {
        method: Method::MajorityVote,
        ..small(10, 4)
    };
    let (_, out) = run_training(&cfg).unwrap();
    assert_eq!(out.records.len(), 40);
    for r in &out.records {
        assert_eq!(r.pseudo_label, r.anchor_majority);
        assert!(!r.gate_open && !r.fallback_used);
        assert_eq!(r.rewards.n_explorer, 0);
        assert_eq!(r.explorer_entropy, None);
        assert_eq!(r.label_correct, r.anchor_label_correct);
    }
    assert_eq!(out.summary.mean_explorer_entropy, None);
}

#[test]
fn zero_steps_leave_policies_untouched() {
    let cfg = small(6, 0);
    let (suite, out) = run_training(&cfg).unwrap();
    assert!(out.records.is_empty());
    for t in &suite.tasks {
        assert_eq!(out.policies[&t.spec.question_id], t.anchor);
    }
}

#[test]
fn ten_questions_for_fifty_steps_give_five_hundred_records() {
    let cfg = TrainConfig {
        group_size: 8,
        ..small(10, 50)
    };
    let (_, out) = run_training(&cfg).unwrap();
    assert_eq!(out.records.len(), 500);
    assert_eq!(out.summary.n_records, 500);
}

#[test]
fn learning_never_reads_the_labels() {
    // Same learner view, two unrelated truth tables: every learning-path
    // output must match; only the label-dependent metrics may differ.
    let cfg = small(12, 3);
    let suite = build_suite(&cfg).unwrap();
    let view = suite.learner_view();
    let truth = suite.ground_truth();
    let decoy: BTreeMap<_, _> = truth
        .keys()
        .map(|&q| (q, dcrl_core::answer_map::parse_answer("[0,0,0]").unwrap()))
        .collect();
    let a = run_on_tasks(&cfg, &view, &truth).unwrap();
    let b = run_on_tasks(&cfg, &view, &decoy).unwrap();
    assert_eq!(a.policies, b.policies);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(
            (
                x.question_id,
                x.rho_t,
                x.mean_rho,
                x.gate_open,
                &x.pseudo_label,
                x.anchor_entropy
            ),
            (
                y.question_id,
                y.rho_t,
                y.mean_rho,
                y.gate_open,
                &y.pseudo_label,
                y.anchor_entropy
            )
        );
        assert_eq!(x.rewards.n_train, y.rewards.n_train);
        assert_eq!(x.rewards.mean, y.rewards.mean);
    }
}

#[test]
fn dcrl_beats_majority_vote_on_a_spurious_suite() {
    let base = small(40, 2);
    let suite = build_suite(&base).unwrap();
    let dc = run_on_suite(&base, &suite).unwrap().summary;
    let mv = run_on_suite(
        &TrainConfig {
            method: Method::MajorityVote,
            ..base
        },
        &suite,
    )
    .unwrap()
    .summary;
    assert!(
        dc.final_label_accuracy > mv.final_label_accuracy,
        "{} vs {}",
        dc.final_label_accuracy,
        mv.final_label_accuracy
    );
}

#[test]
fn run_directory_round_trips() {
    let cfg = small(5, 2);
    let (suite, out) = run_training(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &cfg, &suite, &out).unwrap();
    assert_eq!(load_checkpoints(dir.path()).unwrap(), out.policies);
    assert_eq!(load_suite_specs(dir.path()).unwrap(), suite.specs());
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), out.records.len());
}

#[test]
fn saturated_policy_scores_one() {
    let vocab = Vocab::with_size(5).unwrap();
    let mut p = PolicyParams::new(0, vocab, 2).unwrap();
    p.set_logits(&[], vec![-1e3, -1e3, -1e3, 0.0, -1e3]).unwrap();
    p.set_logits(&[vocab.sep], vec![-1e3, 0.0, -1e3, -1e3, -1e3]).unwrap();
    let truth = [(0, Answer::single(1))].into_iter().collect();
    let r = evaluate(&[(0, p)].into_iter().collect(), &truth, 16, 0).unwrap();
    assert!((r.mean_exact_pass1 - 1.0).abs() < 1e-12);
    assert_eq!(r.mean_empirical_pass1, 1.0);
}

#[test]
fn empirical_pass_rate_tracks_the_exact_one() {
    let cfg = small(40, 0);
    let suite = build_suite(&cfg).unwrap();
    let policies = suite
        .tasks
        .iter()
        .map(|t| (t.spec.question_id, t.anchor.clone()))
        .collect();
    let samples = 16;
    let r = evaluate(&policies, &suite.ground_truth(), samples, 3).unwrap();
    let n = r.tasks.len() as f64;
    let var: f64 = r
        .tasks
        .iter()
        .map(|t| t.exact_pass1 * (1.0 - t.exact_pass1) / samples as f64)
        .sum();
    let se = var.sqrt() / n;
    assert!((r.mean_empirical_pass1 - r.mean_exact_pass1).abs() < 3.0 * se);
    for t in &suite.tasks {
        let exact = exact_answer_distribution(&t.anchor).unwrap().prob(&t.spec.true_answer);
        let row = r.tasks.iter().find(|x| x.question_id == t.spec.question_id).unwrap();
        assert!((row.exact_pass1 - exact).abs() < 1e-12);
    }
}
