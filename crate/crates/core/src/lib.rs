//! Dual-consensus reinforcement learning on tabular autoregressive policies.
//!
//! Each question owns a small softmax policy over token sequences. Training
//! samples an anchor rollout set, derives an explorer policy by one
//! unlearning step away from the anchor's own outputs, elects a pseudo-label
//! by harmonic consensus of the two sets, and updates the anchor with GRPO.

pub mod adaptive_sampler;
pub mod answer_map;
pub mod consensus;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grpo;
pub mod oracle;
pub mod policy;
pub mod taskgen;
pub mod unlearning;

pub use adaptive_sampler::{consensus_rate, select_training_set, ConsensusTracker, GateMode};
pub use consensus::{elect, histogram, AnswerHistogram, ConsensusOutcome, ConsensusStrategy};
pub use error::{DcrlError, Result};
pub use grpo::{GrpoConfig, RatioMode};
pub use oracle::{exact_answer_distribution, ExactDistribution, TheoremReport, TheoremThresholds};
pub use policy::{Answer, Gradient, PolicyParams, QuestionId, Source, Token, Trajectory, Vocab};
pub use taskgen::{generate_suite, Suite, SuiteConfig, Task, TaskSpec};
pub use unlearning::UnlearnConfig;
