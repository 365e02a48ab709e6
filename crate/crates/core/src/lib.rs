//! A desk-scale post-training laboratory.
//!
//! Every task here has a response space small enough to enumerate, so the
//! quantities that are intractable for language models (the partition
//! function, the KL-optimal policy, exact expectations under a sampling
//! distribution) can be computed exactly and used as ground truth.
//!
//! The crate is organized around the unified gradient form shared by
//! post-training methods,
//!
//! ```text
//! grad L(theta) = - sum_groups sum_i w_i * grad log pi_theta(y_i | x)
//! ```
//!
//! where each method only differs in how it assigns the weights `w_i`:
//!
//! - [`taskenv`]: enumerable prompts, response spaces and reward tables.
//! - [`policy`]: tabular softmax policies (flat or autoregressive) with exact
//!   log-probabilities, inverse-CDF sampling and analytic gradients.
//! - [`oracle`]: partition function, KL-optimal policy, implicit rewards,
//!   KL divergence, the exact GVPO loss and a finite-difference gradient.
//! - [`schemes`]: per-response weights for SFT, GRPO, DPO and GVPO, the
//!   GVPO loss forms and the advantage/covariance/variance decomposition.
//! - [`trainer`]: the optimization loop over exact or Monte-Carlo gradients.
//! - [`verify`]: executable checks of the zero-sum property, partition
//!   cancellation, loss-form equivalence, both optimality theorems and the
//!   regularizer ablations.
//! - [`expcli`]: JSON-configured runs, sweeps, comparisons and reports,
//!   driven by the `gvpo-lab` binary.

pub mod error;
pub mod expcli;
pub mod numeric;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod schemes;
pub mod taskenv;
pub mod trainer;
pub mod verify;

pub use error::{LabError, Result};
pub use policy::{Distribution, Gradient, PolicyKind, PolicyParams};
pub use taskenv::{RewardGenSpec, SequenceRewardRule, TaskSpec};
