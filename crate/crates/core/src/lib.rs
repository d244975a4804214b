//! A desk-scale multi-agent reinforcement-learning laboratory for studying
//! emergent reciprocity and team formation in iterated matrix games.
//!
//! Training augments any multi-player game with randomized uncertain social
//! preferences: each episode samples a block-sparse, row-normalized reward
//! transformation matrix over agent cliques, and each agent receives an
//! independently noisy view of it together with its own noise level. Agents
//! are always evaluated in the original selfish game (identity transformation,
//! zero uncertainty), so any cooperation that shows up there was learned, not
//! given.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tensor`]: dense f32 linear algebra with a reverse-mode tape and an
//!   adaptive-moment optimizer, sized for 128-unit recurrent policies.
//! - [`rusp`]: per-episode sampling of the social-preference structure and
//!   the reward transformation itself.
//! - [`envs`]: the stochastic-game interface plus iterated prisoner's
//!   dilemma (2-player), an indirect-reciprocity variant (3-player), and
//!   the 5-player partner-choice game.
//! - [`policy`]: entity-invariant recurrent policy and omniscient value
//!   network with categorical and entity-attention action heads.
//! - [`trainer`]: vectorized rollouts with past-policy sampling, observation
//!   normalization, generalized advantage estimation, and clipped PPO.
//! - [`eval`]: fixed opponents and the evaluation protocols (self-play
//!   defect counts, reciprocity classification, hold-out, prior rapport,
//!   team metrics), always run in the unmodified selfish game.
//! - [`runner`]: experiment configuration, checkpointing, metrics logging,
//!   sweeps, and SVG/CSV plot emission.

pub mod envs;
pub mod error;
pub mod eval;
pub mod parallel;
pub mod policy;
pub mod runner;
pub mod rusp;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use parallel::Parallelism;
