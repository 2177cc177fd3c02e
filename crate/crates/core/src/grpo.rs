//! Group-normalized advantages and the clipped surrogate objective.
//!
//! The surrogate is maximized by plain gradient ascent. Gradients go
//! through `d rho = rho * d log pi`, so everything reduces to
//! [`crate::policy::logprob_grad`] rows.

use serde::{Deserialize, Serialize};

use crate::error::{DcrlError, Result};
use crate::policy::{accumulate_logprob_grad, log_seq_prob, Gradient, PolicyParams, Trajectory};

pub const DEFAULT_ETA_GRPO: f64 = 2.0;

/// Importance-ratio denominator for explorer-sampled trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Each trajectory against the policy that actually sampled it.
    #[default]
    Behavior,
    /// Every trajectory against the pre-update anchor policy.
    AnchorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub eps_clip: f64,
    pub beta: f64,
    pub kl_enabled: bool,
    pub eta_grpo: f64,
    pub inner_epochs: usize,
    pub ratio_mode: RatioMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            eps_clip: 0.2,
            beta: 0.04,
            kl_enabled: false,
            eta_grpo: DEFAULT_ETA_GRPO,
            inner_epochs: 1,
            ratio_mode: RatioMode::Behavior,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DcrlError::InvalidConfig(m));
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad(format!("grpo.eps_clip must lie in (0, 1), got {}", self.eps_clip));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("grpo.beta must be non-negative, got {}", self.beta));
        }
        if !(self.eta_grpo >= 0.0 && self.eta_grpo.is_finite()) {
            return bad(format!("grpo.eta_grpo must be non-negative, got {}", self.eta_grpo));
        }
        if self.inner_epochs == 0 {
            return bad("grpo.inner_epochs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Zero reward variance; every advantage is then 0.
    pub degenerate: bool,
}

/// `(r - mean) / std` with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64]) -> Result<AdvantageGroup> {
    if rewards.is_empty() {
        return Err(DcrlError::Empty("reward vector"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 {
        return Ok(AdvantageGroup {
            rewards: rewards.to_vec(),
            advantages: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    let advantages: Vec<f64> = rewards.iter().map(|r| (r - mean) / std).collect();
    debug_assert!(advantages.iter().sum::<f64>().abs() / n < 1e-9);
    Ok(AdvantageGroup {
        rewards: rewards.to_vec(),
        advantages,
        degenerate: false,
    })
}

/// Trajectories of one question with their behavior probabilities and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGroup {
    pub trajectories: Vec<Trajectory>,
    pub old_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

impl PreparedGroup {
    pub fn new(trajectories: Vec<Trajectory>, old_probs: Vec<f64>, advantages: AdvantageGroup) -> Result<Self> {
        if trajectories.len() != old_probs.len() {
            return Err(DcrlError::LengthMismatch {
                what: "trajectories vs old probabilities",
                left: trajectories.len(),
                right: old_probs.len(),
            });
        }
        if trajectories.len() != advantages.advantages.len() {
            return Err(DcrlError::LengthMismatch {
                what: "trajectories vs advantages",
                left: trajectories.len(),
                right: advantages.advantages.len(),
            });
        }
        if let Some(p) = old_probs.iter().find(|&&p| !(p > 0.0 && p.is_finite())) {
            return Err(DcrlError::InvalidSequence(format!(
                "behavior probability must be positive and finite, got {p}"
            )));
        }
        Ok(Self {
            trajectories,
            old_probs,
            advantages: advantages.advantages,
            degenerate: advantages.degenerate,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SurrogateValue {
    /// Clipped term minus `beta * KL`; the quantity being maximized.
    pub objective: f64,
    pub clipped_term: f64,
    pub kl: f64,
    /// Share of trajectories whose clipped branch was active.
    pub clip_fraction: f64,
}

/// Clipped surrogate value and its gradient with respect to the logits.
pub fn surrogate_loss(
    policy: &PolicyParams,
    group: &PreparedGroup,
    cfg: &GrpoConfig,
    reference: Option<&PolicyParams>,
) -> Result<(SurrogateValue, Gradient)> {
    if group.is_empty() {
        return Err(DcrlError::Empty("GRPO group"));
    }
    let n = group.len() as f64;
    let eps = cfg.eps_clip;
    let mut grad = Gradient::new();
    let mut clipped_term = 0.0;
    let mut clipped = 0usize;
    for ((traj, &old), &adv) in group.trajectories.iter().zip(&group.old_probs).zip(&group.advantages) {
        let ratio = (log_seq_prob(policy, &traj.tokens)? - old.ln()).exp();
        let unclipped = ratio * adv;
        let bounded = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        if unclipped <= bounded {
            clipped_term += unclipped;
            if adv != 0.0 {
                accumulate_logprob_grad(policy, &traj.tokens, adv * ratio / n, &mut grad);
            }
        } else {
            clipped_term += bounded;
            clipped += 1;
        }
    }
    clipped_term /= n;

    let mut kl = 0.0;
    if cfg.kl_enabled && cfg.beta > 0.0 {
        let reference = reference
            .ok_or_else(|| DcrlError::InvalidConfig("KL penalty enabled without a reference policy".into()))?;
        let (value, kl_grad) = token_kl_and_grad(policy, reference, &group.trajectories);
        kl = value;
        grad.axpy(-cfg.beta, &kl_grad);
    }

    Ok((
        SurrogateValue {
            objective: clipped_term - cfg.beta * kl,
            clipped_term,
            kl,
            clip_fraction: clipped as f64 / n,
        },
        grad,
    ))
}

/// Exact `KL(pi || ref)` between next-token rows, averaged over every
/// non-forced position of `trajectories`, with its logit gradient.
pub fn token_kl_and_grad(
    policy: &PolicyParams,
    reference: &PolicyParams,
    trajectories: &[Trajectory],
) -> (f64, Gradient) {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut grad = Gradient::new();
    for traj in trajectories {
        let free = traj.tokens.len().min(policy.max_len());
        for t in 0..free {
            let prefix = &traj.tokens[..t];
            let p = policy.probs_at(prefix);
            let q = reference.probs_at(prefix);
            let log_ratio: Vec<f64> = p
                .iter()
                .zip(&q)
                .map(|(&pi, &qi)| if pi > 0.0 { pi.ln() - qi.ln() } else { 0.0 })
                .collect();
            let kl: f64 = p.iter().zip(&log_ratio).map(|(pi, lr)| pi * lr).sum();
            // d KL / d z_j = p_j (log p_j - log q_j - KL)
            let row: Vec<f64> = p.iter().zip(&log_ratio).map(|(pi, lr)| pi * (lr - kl)).collect();
            grad.add_row(prefix, 1.0, &row);
            total += kl;
            count += 1;
        }
    }
    if count == 0 {
        return (0.0, grad);
    }
    grad.scale(1.0 / count as f64);
    (total / count as f64, grad)
}

/// `inner_epochs` gradient-ascent steps on the surrogate averaged over
/// `groups`. Degenerate groups are skipped; if every group is degenerate
/// the policy comes back unchanged.
pub fn update_policy(
    policy: &PolicyParams,
    groups: &[PreparedGroup],
    cfg: &GrpoConfig,
    reference: Option<&PolicyParams>,
) -> Result<PolicyParams> {
    let live: Vec<&PreparedGroup> = groups.iter().filter(|g| !g.degenerate).collect();
    let mut current = policy.clone();
    if live.is_empty() || cfg.eta_grpo == 0.0 {
        return Ok(current);
    }
    let weight = 1.0 / live.len() as f64;
    for _ in 0..cfg.inner_epochs {
        let mut total = Gradient::new();
        for group in &live {
            let (_, grad) = surrogate_loss(&current, group, cfg, reference)?;
            total.axpy(weight, &grad);
        }
        current.apply(&total, cfg.eta_grpo);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{exact_seq_prob, logprob_grad, sample_group, Source, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_rewards() {
        let g = normalize_advantages(&[1.0, 0.0]).unwrap();
        assert_eq!(g.advantages, vec![1.0, -1.0]);
        assert!(!g.degenerate);
    }

    #[test]
    fn constant_rewards_are_degenerate() {
        let g = normalize_advantages(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(g.advantages, vec![0.0; 3]);
        assert!(g.degenerate);
        assert!(normalize_advantages(&[]).is_err());
    }

    #[test]
    fn mixed_rewards_match_hand_arithmetic() {
        // mean = 1.5 / 4, E[r^2] = 1.25 / 4, var = E[r^2] - mean^2
        let mean = 1.5 / 4.0;
        let std = (1.25f64 / 4.0 - mean * mean).sqrt();
        assert!((std - 0.41458).abs() < 1e-5);
        let g = normalize_advantages(&[1.0, 0.5, 0.0, 0.0]).unwrap();
        let want = [1.5076, 0.3015, -0.9045, -0.9045];
        for (a, w) in g.advantages.iter().zip(want) {
            assert!((a - w).abs() < 1e-4, "{a} vs {w}");
        }
        for (a, r) in g.advantages.iter().zip([1.0, 0.5, 0.0, 0.0]) {
            assert!((a - (r - mean) / std).abs() < 1e-12);
        }
    }

    fn toy_policy() -> PolicyParams {
        let v = Vocab::with_size(5).unwrap();
        let mut p = PolicyParams::new(0, v, 3).unwrap();
        p.set_logits(&[], vec![0.4, -0.2, 0.9, 0.6, -0.5]).unwrap();
        p.set_logits(&[3], vec![0.1, 0.3, -0.7, 0.2, 0.8]).unwrap();
        p
    }

    fn on_policy_group(p: &PolicyParams, rewards: &[f64], seed: u64) -> PreparedGroup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = sample_group(p, Source::Anchor, rewards.len(), &mut rng);
        let old = trajs.iter().map(|t| t.behavior_prob()).collect();
        PreparedGroup::new(trajs, old, normalize_advantages(rewards).unwrap()).unwrap()
    }

    #[test]
    fn on_policy_surrogate_is_mean_advantage() {
        let p = toy_policy();
        let g = on_policy_group(&p, &[1.0, 0.0, 0.5, 0.0, 1.0], 3);
        let (v, _) = surrogate_loss(&p, &g, &GrpoConfig::default(), None).unwrap();
        assert!(v.clipped_term.abs() < 1e-12);
    }

    #[test]
    fn on_policy_gradient_is_vanilla_policy_gradient() {
        let p = toy_policy();
        let g = on_policy_group(&p, &[1.0, 0.0, 0.5, 0.0, 1.0, 0.0], 8);
        let (_, grad) = surrogate_loss(&p, &g, &GrpoConfig::default(), None).unwrap();
        let mut vanilla = Gradient::new();
        for (t, &a) in g.trajectories.iter().zip(&g.advantages) {
            vanilla.axpy(a / g.len() as f64, &logprob_grad(&p, &t.tokens).unwrap());
        }
        let mut diff = grad.clone();
        diff.axpy(-1.0, &vanilla);
        assert!(diff.max_abs() < 1e-9);
    }

    #[test]
    fn clip_caps_positive_advantage() {
        let p = toy_policy();
        let tokens = vec![2, 4];
        let pi = exact_seq_prob(&p, &tokens).unwrap();
        let eps = 0.2;
        // old probability chosen so the ratio is exactly 1 + 2 eps
        let traj = Trajectory {
            tokens,
            step_probs: vec![],
            answer: None,
            source: Source::Anchor,
        };
        let group = PreparedGroup {
            trajectories: vec![traj],
            old_probs: vec![pi / (1.0 + 2.0 * eps)],
            advantages: vec![1.5],
            degenerate: false,
        };
        let cfg = GrpoConfig {
            eps_clip: eps,
            ..GrpoConfig::default()
        };
        let (v, grad) = surrogate_loss(&p, &group, &cfg, None).unwrap();
        assert!((v.clipped_term - (1.0 + eps) * 1.5).abs() < 1e-12);
        assert_eq!(v.clip_fraction, 1.0);
        assert!(grad.max_abs() == 0.0);
    }

    #[test]
    fn mirrored_ratios_negate_the_unclipped_term() {
        // Inside the clip band the min picks the unclipped product.
        let eps = 0.2;
        for (r, a) in [(1.1_f64, 0.7_f64), (0.9, -1.3), (1.15, 2.0)] {
            let f = |r: f64, a: f64| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a);
            let mirrored = 2.0 - r;
            assert!((f(r, a) - r * a).abs() < 1e-12);
            assert!((f(mirrored, -a) - mirrored * -a).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_lengths_and_zero_probs_are_rejected() {
        let p = toy_policy();
        let g = on_policy_group(&p, &[1.0, 0.0], 1);
        assert!(PreparedGroup::new(
            g.trajectories.clone(),
            vec![0.5],
            normalize_advantages(&[1.0, 0.0]).unwrap()
        )
        .is_err());
        assert!(PreparedGroup::new(
            g.trajectories.clone(),
            vec![0.5, 0.0],
            normalize_advantages(&[1.0, 0.0]).unwrap()
        )
        .is_err());
    }

    #[test]
    fn degenerate_groups_and_zero_rate_leave_policy_unchanged() {
        let p = toy_policy();
        let flat = on_policy_group(&p, &[0.5, 0.5, 0.5], 2);
        assert_eq!(update_policy(&p, &[flat], &GrpoConfig::default(), None).unwrap(), p);
        let live = on_policy_group(&p, &[1.0, 0.0, 0.5], 2);
        let frozen = GrpoConfig {
            eta_grpo: 0.0,
            ..GrpoConfig::default()
        };
        assert_eq!(update_policy(&p, &[live], &frozen, None).unwrap(), p);
    }

    #[test]
    fn kl_requires_reference_and_vanishes_at_reference() {
        let p = toy_policy();
        let g = on_policy_group(&p, &[1.0, 0.0, 0.0], 4);
        let cfg = GrpoConfig {
            kl_enabled: true,
            ..GrpoConfig::default()
        };
        assert!(surrogate_loss(&p, &g, &cfg, None).is_err());
        let (v, _) = surrogate_loss(&p, &g, &cfg, Some(&p)).unwrap();
        assert!(v.kl.abs() < 1e-15);
        let (kl, kg) = token_kl_and_grad(&p, &p, &g.trajectories);
        assert!(kl.abs() < 1e-15 && kg.max_abs() < 1e-15);
    }
}
