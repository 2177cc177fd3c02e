use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive_sampler::{GateMode, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use crate::error::{DcrlError, Result};
use crate::grpo::GrpoConfig;
use crate::taskgen::SuiteConfig;
use crate::unlearning::UnlearnConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DCRL_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Harmonic election over anchor and explorer rollouts.
    #[default]
    Dcrl,
    /// Anchor majority only; no explorer, gate always closed.
    MajorityVote,
    /// Majority over the pooled anchor and explorer rollouts.
    PooledMajority,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dcrl, Method::MajorityVote, Method::PooledMajority];

    pub fn uses_explorer(self) -> bool {
        !matches!(self, Method::MajorityVote)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Dcrl => "dcrl",
            Method::MajorityVote => "majority_vote",
            Method::PooledMajority => "pooled_majority",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Window length K of the consensus-rate mean.
    pub window: usize,
    pub threshold: f64,
    pub gate_mode: GateMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            threshold: DEFAULT_THRESHOLD,
            gate_mode: GateMode::Windowed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub suite: SuiteConfig,
    /// Rollouts per question and policy.
    #[serde(alias = "G")]
    pub group_size: usize,
    pub steps: usize,
    /// Questions per step; the whole suite when absent.
    pub batch_size: Option<usize>,
    pub unlearn: UnlearnConfig,
    pub grpo: GrpoConfig,
    pub sampler: SamplerConfig,
    pub method: Method,
    pub seed: u64,
    /// Samples per task for empirical pass@1 in the final evaluation.
    pub eval_samples: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            group_size: 16,
            steps: 2,
            batch_size: None,
            unlearn: UnlearnConfig::default(),
            grpo: GrpoConfig::default(),
            sampler: SamplerConfig::default(),
            method: Method::Dcrl,
            seed: 0,
            eval_samples: 16,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DcrlError::InvalidConfig(m.to_string()));
        self.suite.validate()?;
        self.unlearn.validate()?;
        self.grpo.validate()?;
        if self.group_size == 0 {
            return bad("group_size must be positive");
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > self.suite.n_questions {
                return bad("batch_size must lie in 1..=suite.n_questions");
            }
        }
        if self.sampler.window == 0 {
            return bad("sampler.window must be positive");
        }
        if !(0.0..=1.0).contains(&self.sampler.threshold) {
            return bad("sampler.threshold must lie in [0, 1]");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive");
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or(self.suite.n_questions)
    }

    /// Parses and validates a JSON config. Parse errors keep serde's
    /// line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            DcrlError::Json(j) => DcrlError::InvalidConfig(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    /// `DCRL_OUTPUT_DIR` if set, else `output_dir`.
    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output_dir.clone())
    }
}
