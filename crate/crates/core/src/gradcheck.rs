//! Central finite-difference checks of the analytic logit gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grpo::{normalize_advantages, surrogate_loss, GrpoConfig, PreparedGroup};
use crate::policy::{exact_seq_prob, sample_group, Gradient, PolicyParams, Source, Token, Trajectory, Vocab};
use crate::taskgen::random_policy;
use crate::unlearning::{unlearn_loss, unlearn_loss_and_grad, UnlearnConfig};

pub const FD_STEP: f64 = 1e-5;

/// `(f(z + h e_i) - f(z - h e_i)) / 2h` for every stored logit.
pub fn finite_difference<F>(params: &PolicyParams, h: f64, f: F) -> Result<Gradient>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let rows: Vec<(Vec<Token>, usize)> = params
        .entries()
        .filter(|(p, _)| p.len() < params.max_len())
        .map(|(p, r)| (p.to_vec(), r.len()))
        .collect();
    let mut grad = Gradient::new();
    let mut work = params.clone();
    for (prefix, width) in rows {
        let mut values = vec![0.0; width];
        for (k, v) in values.iter_mut().enumerate() {
            let base = *work.logit_mut(&prefix, k as Token).expect("row exists");
            *work.logit_mut(&prefix, k as Token).expect("row exists") = base + h;
            let up = f(&work)?;
            *work.logit_mut(&prefix, k as Token).expect("row exists") = base - h;
            let down = f(&work)?;
            *work.logit_mut(&prefix, k as Token).expect("row exists") = base;
            *v = (up - down) / (2.0 * h);
        }
        grad.add_row(&prefix, 1.0, &values);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)` over the union of rows; 0 when both vanish.
pub fn relative_error(a: &Gradient, b: &Gradient) -> f64 {
    let mut diff = a.clone();
    diff.axpy(-1.0, b);
    let norm = |g: &Gradient| g.rows().flat_map(|(_, r)| r.iter()).map(|v| v * v).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_unlearn_error: f64,
    pub max_surrogate_error: f64,
    /// Among surrogate instances with the KL penalty switched on.
    pub max_surrogate_kl_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_unlearn_error < self.tolerance
            && self.max_surrogate_error < self.tolerance
            && self.max_surrogate_kl_error < self.tolerance
    }
}

/// Margin kept between any probability or ratio and a clip boundary so the
/// finite-difference stencil never straddles a kink.
const KINK_MARGIN: f64 = 1e-3;

fn near(x: f64, edge: f64) -> bool {
    (x - edge).abs() < KINK_MARGIN
}

fn unlearn_instance(rng: &mut ChaCha8Rng, cfg: &UnlearnConfig) -> Result<(PolicyParams, Vec<Trajectory>)> {
    let vocab = Vocab::with_size(5)?;
    loop {
        let p = random_policy(0, vocab, 3, 1.5, rng)?;
        let trajs = sample_group(&p, Source::Anchor, 6, rng);
        let kinky = trajs.iter().any(|t| {
            t.step_probs
                .iter()
                .any(|&q| near(q, cfg.eps_u) || near(q, 1.0 - cfg.eps_u))
        });
        if !kinky {
            return Ok((p, trajs));
        }
    }
}

fn surrogate_instance(rng: &mut ChaCha8Rng, cfg: &GrpoConfig) -> Result<(PolicyParams, PreparedGroup)> {
    let vocab = Vocab::with_size(5)?;
    loop {
        let p = random_policy(0, vocab, 3, 1.5, rng)?;
        let trajs = sample_group(&p, Source::Anchor, 6, rng);
        let rewards: Vec<f64> = (0..trajs.len())
            .map(|_| [0.0, 0.5, 1.0][rng.random_range(0..3)])
            .collect();
        let adv = normalize_advantages(&rewards)?;
        if adv.degenerate {
            continue;
        }
        let mut old = Vec::with_capacity(trajs.len());
        let mut kinky = false;
        for t in &trajs {
            let ratio: f64 = rng.random_range(0.7..1.4);
            kinky |= near(ratio, 1.0 - cfg.eps_clip) || near(ratio, 1.0 + cfg.eps_clip);
            old.push(exact_seq_prob(&p, &t.tokens)? / ratio);
        }
        if !kinky {
            return Ok((p, PreparedGroup::new(trajs, old, adv)?));
        }
    }
}

/// Checks both gradients on `instances` random tabular policies each. Every
/// other surrogate instance switches the KL penalty on against a perturbed
/// reference.
pub fn run_grad_checks(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ucfg = UnlearnConfig::default();
    let mut report = GradCheckReport {
        instances,
        max_unlearn_error: 0.0,
        max_surrogate_error: 0.0,
        max_surrogate_kl_error: 0.0,
        tolerance: 1e-5,
    };
    for _ in 0..instances {
        let (p, trajs) = unlearn_instance(&mut rng, &ucfg)?;
        let (_, analytic) = unlearn_loss_and_grad(&p, &trajs, &ucfg)?;
        let numeric = finite_difference(&p, FD_STEP, |q| unlearn_loss(q, &trajs, &ucfg))?;
        report.max_unlearn_error = report.max_unlearn_error.max(relative_error(&analytic, &numeric));
    }
    for i in 0..instances {
        let kl = i % 2 == 1;
        let cfg = GrpoConfig {
            kl_enabled: kl,
            beta: if kl { 0.3 } else { 0.0 },
            ..GrpoConfig::default()
        };
        let (p, group) = surrogate_instance(&mut rng, &cfg)?;
        let reference = random_policy(0, p.vocab(), p.max_len(), 1.5, &mut rng)?;
        let reference = kl.then_some(&reference);
        let (_, analytic) = surrogate_loss(&p, &group, &cfg, reference)?;
        let numeric = finite_difference(&p, FD_STEP, |q| {
            Ok(surrogate_loss(q, &group, &cfg, reference)?.0.objective)
        })?;
        let err = relative_error(&analytic, &numeric);
        if kl {
            report.max_surrogate_kl_error = report.max_surrogate_kl_error.max(err);
        } else {
            report.max_surrogate_error = report.max_surrogate_error.max(err);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let r = run_grad_checks(5, 11).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn relative_error_of_identical_gradients_is_zero() {
        let mut g = Gradient::new();
        g.add_row(&[], 1.0, &[1.0, -1.0]);
        assert_eq!(relative_error(&g, &g), 0.0);
        assert_eq!(relative_error(&Gradient::new(), &Gradient::new()), 0.0);
    }
}
