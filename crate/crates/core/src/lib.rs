//! Desk-scale laboratory for staged reinforcement learning with verifiable rewards.
//!
//! The crate covers the whole pipeline: perception data synthesis and filtering
//! ([`datasynth`]), verifiable rewards ([`rewards`]), a synthetic scene-task family
//! ([`env`]) and closed-form policy ([`policy`]), the GRPO optimizer ([`grpo`]),
//! capability and difficulty curricula ([`curriculum`]), the training loop
//! ([`trainer`]) and perception-error audits ([`audit`]).

pub mod audit;
pub mod clients;
pub mod curriculum;
pub mod dataset;
pub mod datasynth;
pub mod env;
pub mod exec;
pub mod grpo;
pub mod policy;
pub mod rewards;
pub mod trainer;
pub mod types;

pub use dataset::{read_dataset, write_dataset, DatasetError};
pub use exec::Execution;
pub use types::{CapabilityTag, RewardBreakdown, Rollout, Sample};
