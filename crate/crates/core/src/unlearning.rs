//! Clipped unlearning loss and the one-step anchor -> explorer transform.
//!
//! Per token the loss is `-log(1 - clip(p, eps, 1 - eps))`, averaged over
//! every token of every anchor trajectory. Tokens whose probability sits at
//! either clip bound contribute a constant and therefore no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{DcrlError, Result};
use crate::policy::{Gradient, PolicyParams, Token, Trajectory};

pub const DEFAULT_ETA_U: f64 = 32.0;
pub const DEFAULT_EPS_U: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    MeanOverTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub eta_u: f64,
    pub eps_u: f64,
    pub reduction: Reduction,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            eta_u: DEFAULT_ETA_U,
            eps_u: DEFAULT_EPS_U,
            reduction: Reduction::MeanOverTokens,
        }
    }
}

impl UnlearnConfig {
    pub fn with_eta(eta_u: f64) -> Self {
        Self {
            eta_u,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // eta_u = 0 is allowed: it disables the explorer step.
        if !(self.eta_u >= 0.0 && self.eta_u.is_finite()) {
            return Err(DcrlError::InvalidConfig(format!(
                "unlearn.eta_u must be finite and non-negative, got {}",
                self.eta_u
            )));
        }
        if !(self.eps_u > 0.0 && self.eps_u < 0.5) {
            return Err(DcrlError::InvalidConfig(format!(
                "unlearn.eps_u must lie in (0, 0.5), got {}",
                self.eps_u
            )));
        }
        Ok(())
    }
}

/// Mean per-token negative log-likelihood of `trajectory` under `params`.
pub fn nll_loss(params: &PolicyParams, trajectory: &Trajectory) -> Result<f64> {
    let tokens = &trajectory.tokens;
    params.validate_sequence(tokens)?;
    let total: f64 = (0..tokens.len())
        .map(|t| -params.probs_at(&tokens[..t])[tokens[t] as usize].ln())
        .sum();
    Ok(total / tokens.len() as f64)
}

pub fn clip_prob(p: f64, eps_u: f64) -> f64 {
    p.max(eps_u).min(1.0 - eps_u)
}

/// `-log(1 - clip(p))` for a single token.
pub fn token_unlearn_loss(p: f64, eps_u: f64) -> f64 {
    -(1.0 - clip_prob(p, eps_u)).ln()
}

/// Unlearning loss over the anchor rollouts.
pub fn unlearn_loss(params: &PolicyParams, trajectories: &[Trajectory], cfg: &UnlearnConfig) -> Result<f64> {
    Ok(unlearn_loss_and_grad(params, trajectories, cfg)?.0)
}

pub fn unlearn_loss_and_grad(
    params: &PolicyParams,
    trajectories: &[Trajectory],
    cfg: &UnlearnConfig,
) -> Result<(f64, Gradient)> {
    let weighted: Vec<(&[Token], f64)> = trajectories.iter().map(|t| (t.tokens.as_slice(), 1.0)).collect();
    unlearn_loss_and_grad_weighted(params, &weighted, cfg)
}

/// Weighted form: `sum_i w_i sum_t loss_it / sum_i w_i T_i`. Unit weights
/// reduce to the plain mean over all tokens.
pub fn unlearn_loss_and_grad_weighted(
    params: &PolicyParams,
    trajectories: &[(&[Token], f64)],
    cfg: &UnlearnConfig,
) -> Result<(f64, Gradient)> {
    if trajectories.is_empty() {
        return Err(DcrlError::Empty("unlearning rollout set"));
    }
    let eps = cfg.eps_u;
    let mut loss = 0.0;
    let mut denom = 0.0;
    let mut grad = Gradient::new();
    for &(tokens, w) in trajectories {
        params.validate_sequence(tokens)?;
        denom += w * tokens.len() as f64;
        for t in 0..tokens.len() {
            let prefix = &tokens[..t];
            let k = tokens[t] as usize;
            let probs = params.probs_at(prefix);
            let p = probs[k];
            loss += w * token_unlearn_loss(p, eps);
            // Forced steps and clipped probabilities are locally constant.
            if t >= params.max_len() || p <= eps || p >= 1.0 - eps {
                continue;
            }
            // d/dz [-log(1 - p_k)] = p_k / (1 - p_k) * (onehot(k) - softmax)
            let coef = w * p / (1.0 - p);
            let mut row: Vec<f64> = probs.iter().map(|q| -q).collect();
            row[k] += 1.0;
            grad.add_row(prefix, coef, &row);
        }
    }
    if denom <= 0.0 {
        return Err(DcrlError::Empty("weighted unlearning rollout set"));
    }
    grad.scale(1.0 / denom);
    Ok((loss / denom, grad))
}

/// A fresh policy one plain gradient-descent step away from `anchor` on
/// the unlearning loss. `anchor` itself is never modified.
pub fn make_explorer(
    anchor: &PolicyParams,
    anchor_rollouts: &[Trajectory],
    cfg: &UnlearnConfig,
) -> Result<PolicyParams> {
    let (_, grad) = unlearn_loss_and_grad(anchor, anchor_rollouts, cfg)?;
    let mut explorer = anchor.clone();
    explorer.apply(&grad, -cfg.eta_u);
    Ok(explorer)
}

pub fn make_explorer_weighted(
    anchor: &PolicyParams,
    rollouts: &[(&[Token], f64)],
    cfg: &UnlearnConfig,
) -> Result<PolicyParams> {
    let (_, grad) = unlearn_loss_and_grad_weighted(anchor, rollouts, cfg)?;
    let mut explorer = anchor.clone();
    explorer.apply(&grad, -cfg.eta_u);
    Ok(explorer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSweepPoint {
    pub eta_u: f64,
    pub anchor_entropy: f64,
    pub explorer_entropy: f64,
    /// Exact probability of the anchor's modal answer under the explorer.
    pub explorer_mode_mass: f64,
    pub anchor_mode_mass: f64,
}

/// Explorer entropy and mode suppression across a grid of unlearning rates.
pub fn sweep_eta(
    anchor: &PolicyParams,
    rollouts: &[Trajectory],
    base: &UnlearnConfig,
    etas: &[f64],
) -> Result<Vec<EtaSweepPoint>> {
    let anchor_dist = crate::oracle::exact_answer_distribution(anchor)?;
    let mode = anchor_dist.mode();
    let mode_mass = |d: &crate::oracle::ExactDistribution| mode.as_ref().map_or(0.0, |m| d.prob(m));
    let (_, grad) = unlearn_loss_and_grad(anchor, rollouts, base)?;
    etas.iter()
        .map(|&eta_u| {
            let mut explorer = anchor.clone();
            explorer.apply(&grad, -eta_u);
            let d = crate::oracle::exact_answer_distribution(&explorer)?;
            Ok(EtaSweepPoint {
                eta_u,
                anchor_entropy: anchor_dist.entropy(),
                explorer_entropy: d.entropy(),
                explorer_mode_mass: mode_mass(&d),
                anchor_mode_mass: mode_mass(&anchor_dist),
            })
        })
        .collect()
}
