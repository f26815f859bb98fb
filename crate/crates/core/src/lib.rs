//! Constrained policy optimization on finite CMDPs by soft switching between
//! reward ascent, cost descent and a conflict-aware combined update.
//!
//! - [`gradmanip`]: projection and combination of reward/cost gradients.
//! - [`cmdp`]: the CMDP model, environment builders and exact oracles.
//! - [`policy`]: tabular softmax policies, gradients and KL.
//! - [`evaluation`]: TD(0) Q-function estimation.
//! - [`trainer`]: the training loop with slack-banded mode switching, and the
//!   CRPO/SCRPO baselines.

pub mod cmdp;
pub mod evaluation;
pub mod gradmanip;
pub mod policy;
pub mod trainer;

pub use cmdp::{Channel, CmdpSpec, QTable};
pub use policy::SoftmaxPolicy;
pub use trainer::{train, Algorithm, SlackConfig, TrainRecord, TrainerConfig, UpdateMode};
