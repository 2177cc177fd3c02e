//! Consensus rate, its sliding-window mean, and the training-set gate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{DcrlError, Result};
use crate::policy::{Answer, Trajectory};

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Which consensus signal drives the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Mean of the last K step rates.
    #[default]
    Windowed,
    /// The current question's own rate.
    Instantaneous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusTracker {
    window: VecDeque<f64>,
    capacity: usize,
    threshold: f64,
}

impl ConsensusTracker {
    pub fn new(capacity: usize, threshold: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(DcrlError::InvalidConfig("sampler window K must be positive".into()));
        }
        Ok(Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            threshold,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    /// Mean over the current occupancy, or `None` before the first push.
    pub fn mean(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }

    /// Pushes `rho`, evicting the oldest rate once K are held, and returns
    /// the new window mean.
    pub fn update_and_mean(&mut self, rho: f64) -> f64 {
        assert!((0.0..=1.0).contains(&rho), "consensus rate {rho} outside [0, 1]");
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(rho);
        self.mean().expect("window is non-empty after a push")
    }

    /// Gate decision on the windowed mean; anchor-only during warm-up.
    pub fn gate_open(&self) -> bool {
        self.mean().is_some_and(|m| gate_open(m, self.threshold))
    }
}

/// Fraction of anchor rollouts whose answer equals the anchor majority.
pub fn consensus_rate(anchor_rollouts: &[Trajectory], anchor_majority: Option<&Answer>) -> Result<f64> {
    if anchor_rollouts.is_empty() {
        return Err(DcrlError::Empty("anchor rollout set"));
    }
    let Some(majority) = anchor_majority else {
        return Ok(0.0);
    };
    let agree = anchor_rollouts
        .iter()
        .filter(|t| t.answer.as_ref() == Some(majority))
        .count();
    Ok(agree as f64 / anchor_rollouts.len() as f64)
}

/// The explorer set joins training only strictly above the threshold.
pub fn gate_open(mean_rho: f64, threshold: f64) -> bool {
    mean_rho > threshold
}

/// `anchor` alone when `mean_rho <= threshold`, otherwise `anchor ++ explorer`.
pub fn select_training_set(
    mean_rho: f64,
    anchor: &[Trajectory],
    explorer: &[Trajectory],
    threshold: f64,
) -> Vec<Trajectory> {
    let mut out = anchor.to_vec();
    if gate_open(mean_rho, threshold) {
        out.extend_from_slice(explorer);
    }
    out
}
