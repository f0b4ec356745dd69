//! Tabular testbed for pessimistic reward fine-tuning in offline RLHF.
//!
//! Everything lives on small finite prompt and response spaces where the
//! true reward is known, so reward modeling, rejection sampling, pessimistic
//! fine-tuning and policy optimization can all be evaluated exactly.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dist;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod pet;
pub mod policyopt;
pub mod preference;
pub mod reward;
pub mod rewardmodel;
pub mod rs;
pub mod schema;
pub mod theory;
pub mod worldgen;

pub use dist::{Distribution, PairDistribution, PromptSpace, ResponseSpace, Space, TabularPolicy};
pub use error::{Error, Result};
pub use metrics::{kl_divergence, value};
pub use pet::{pessimism_certificate, pet_finetune, PetConfig, PetMode, PetRun};
pub use policyopt::{evaluate_policy, greedy_policy, kl_optimal_policy, optimize, OptConfig, OptMethod};
pub use preference::{bt_prob, prediction_loss, prediction_loss_grad, sigmoid, PreferenceDataset, PreferenceTuple};
pub use reward::RewardTable;
pub use rewardmodel::{train_proxy, ProxyFit, RewardInit, TrainConfig};
pub use rs::{rs_exact_policy, rs_policy, rs_sample, verify_proposition1, RsSpec};
pub use theory::{coverage_coefficient, BoundReport, CoverageEstimate};
pub use worldgen::{make_world, sample_dataset, CoverageProfile, World, WorldConfig};
