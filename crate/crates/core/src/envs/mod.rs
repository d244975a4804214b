//! Stochastic multi-player games with entity-structured observations.
//!
//! Three environments are provided: the 2-player iterated prisoner's dilemma
//! ([`ipd::IpdEnv`]), a 3-player variant where a random pair plays each step
//! while the third spectates ([`indirect::IndirectEnv`]), and the 5-player
//! partner-choice game ([`buddy::BuddyEnv`]).
//!
//! Environments emit RAW per-agent rewards; the trainer applies the social
//! preference transformation before storage, so training and evaluation
//! differ only in the transformation used. Episode horizons are drawn from a
//! geometric distribution and are never written into observations.
//!
//! # Observation layouts
//!
//! Every agent observes a fixed block of self features plus one feature
//! block per other agent (its "entities"), in ascending agent order with
//! itself skipped. The omniscient extras (true preferences, other agents'
//! views) are carried separately and only ever reach the value network.
//! The exact per-environment layouts are documented on each environment
//! type.

pub mod buddy;
pub mod indirect;
pub mod ipd;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rusp::SocialContext;

pub use buddy::BuddyEnv;
pub use indirect::{IndirectEnv, PairSchedule};
pub use ipd::IpdEnv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixMove {
    Cooperate,
    Defect,
}

impl MatrixMove {
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            MatrixMove::Cooperate
        } else {
            MatrixMove::Defect
        }
    }

    pub fn is_defect(self) -> bool {
        self == MatrixMove::Defect
    }
}

/// The four payoffs of a symmetric 2x2 matrix game.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Payoffs {
    /// Mutual cooperation.
    pub reward: f32,
    /// Mutual defection.
    pub punishment: f32,
    /// Cooperating against a defector.
    pub sucker: f32,
    /// Defecting against a cooperator.
    pub temptation: f32,
}

impl Payoffs {
    /// The payoffs used throughout: R=2, P=0, S=-2, T=4.
    pub fn prisoners_dilemma() -> Self {
        Payoffs { reward: 2.0, punishment: 0.0, sucker: -2.0, temptation: 4.0 }
    }

    /// Greed without fear: T > R and S > P.
    pub fn chicken() -> Self {
        Payoffs { reward: 2.0, punishment: -2.0, sucker: 0.0, temptation: 4.0 }
    }

    /// Fear without greed: R > T and P > S.
    pub fn stag_hunt() -> Self {
        Payoffs { reward: 4.0, punishment: 0.0, sucker: -2.0, temptation: 2.0 }
    }

    pub fn is_prisoners_dilemma(&self) -> bool {
        self.temptation > self.reward
            && self.reward > self.punishment
            && self.punishment > self.sucker
    }

    /// Payoffs for (own move, opponent move).
    pub fn payoff(&self, own: MatrixMove, other: MatrixMove) -> f32 {
        use MatrixMove::*;
        match (own, other) {
            (Cooperate, Cooperate) => self.reward,
            (Cooperate, Defect) => self.sucker,
            (Defect, Cooperate) => self.temptation,
            (Defect, Defect) => self.punishment,
        }
    }
}

/// Static description of an environment instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub payoffs: Payoffs,
    /// Per-step (or per-round for the partner-choice game) termination
    /// probability.
    pub horizon_stop_prob: f32,
    /// Hard maximum episode length in steps.
    pub horizon_cap: usize,
    /// Overrides the geometric draw when set (evaluation).
    pub fixed_horizon: Option<usize>,
    /// Unrewarded steps before each rewarded round (partner-choice only).
    pub free_steps_between_rounds: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_stop_prob > 0.0 && self.horizon_stop_prob <= 1.0) {
            return Err(Error::config("horizon stop probability must be in (0, 1]"));
        }
        if self.n_agents < 1 {
            return Err(Error::config("need at least one agent"));
        }
        Ok(())
    }
}

/// Draws an episode length: geometric with the configured stop probability,
/// truncated at the cap; `fixed_horizon` overrides when set.
pub fn sample_horizon(spec: &EnvSpec, rng: &mut impl Rng) -> usize {
    if let Some(fixed) = spec.fixed_horizon {
        return fixed;
    }
    sample_geometric(spec.horizon_stop_prob, spec.horizon_cap, rng)
}

/// Geometric draw on {1, 2, ...} truncated to `cap`.
pub fn sample_geometric(stop_prob: f32, cap: usize, rng: &mut impl Rng) -> usize {
    if stop_prob >= 1.0 {
        return 1;
    }
    let u: f64 = rng.gen::<f64>();
    let len = ((1.0 - u).ln() / (1.0 - stop_prob as f64).ln()).ceil() as usize;
    len.clamp(1, cap)
}

/// Action-head descriptions used to size the policy's output layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSpec {
    /// Fixed-arity categorical head.
    Categorical(usize),
    /// One logit per entity, produced by the entity-attention head.
    Entity,
}

/// Feature-block widths for an environment's observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsLayout {
    pub self_dim: usize,
    pub entity_dim: usize,
    pub n_entities: usize,
    /// Omniscient extras appended to the self block, value network only.
    pub value_self_dim: usize,
    /// Omniscient extras appended to each entity block, value network only.
    pub value_entity_dim: usize,
}

impl ObsLayout {
    /// Width of the policy's per-entity input row.
    pub fn policy_in_dim(&self) -> usize {
        self.self_dim + self.entity_dim
    }

    /// Width of the value network's per-entity input row.
    pub fn value_in_dim(&self) -> usize {
        self.self_dim + self.value_self_dim + self.entity_dim + self.value_entity_dim
    }
}

/// One agent's observation for a single step.
#[derive(Debug, Clone, Default)]
pub struct AgentObs {
    pub self_feats: Vec<f32>,
    /// `n_entities * entity_dim`, entity-major.
    pub entity_feats: Vec<f32>,
    pub value_self_extra: Vec<f32>,
    pub value_entity_extra: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct AgentInfo {
    pub legal: bool,
    /// Whether the agent's action affected the game this step.
    pub active: bool,
    /// Round phase (partner-choice: 0..=4, rewarded at 4; otherwise 0).
    pub phase: u8,
}

/// What happened on a step, for scripted opponents and metrics.
#[derive(Debug, Clone)]
pub enum PublicEvent {
    /// Matrix-game step: which agents played and every mover's action.
    Matrix { active: Vec<usize>, moves: Vec<Option<MatrixMove>> },
    /// Partner-choice step: every agent's target (`None` = sat out) and
    /// whether this step paid out.
    Choices { chosen: Vec<Option<usize>>, rewarded: bool },
}

#[derive(Debug, Clone)]
pub struct StepResult {
    /// Raw, untransformed per-agent rewards.
    pub raw_rewards: Vec<f32>,
    pub done: bool,
    pub infos: Vec<AgentInfo>,
    pub event: PublicEvent,
}

/// Index of the agent behind entity slot `slot` from agent `k`'s view:
/// all other agents in ascending order.
#[inline]
pub fn entity_agent(k: usize, slot: usize) -> usize {
    if slot < k {
        slot
    } else {
        slot + 1
    }
}

/// Inverse of [`entity_agent`].
#[inline]
pub fn agent_entity_slot(k: usize, j: usize) -> usize {
    debug_assert_ne!(k, j);
    if j < k {
        j
    } else {
        j - 1
    }
}

/// Runtime-dispatched environment, clonable per rollout slot.
#[derive(Debug, Clone)]
pub enum GameEnv {
    Ipd(IpdEnv),
    Indirect(IndirectEnv),
    Buddy(BuddyEnv),
}

impl GameEnv {
    pub fn spec(&self) -> &EnvSpec {
        match self {
            GameEnv::Ipd(e) => e.spec(),
            GameEnv::Indirect(e) => e.spec(),
            GameEnv::Buddy(e) => e.spec(),
        }
    }

    pub fn layout(&self) -> ObsLayout {
        match self {
            GameEnv::Ipd(e) => e.layout(),
            GameEnv::Indirect(e) => e.layout(),
            GameEnv::Buddy(e) => e.layout(),
        }
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        match self {
            GameEnv::Ipd(e) => e.head_specs(),
            GameEnv::Indirect(e) => e.head_specs(),
            GameEnv::Buddy(e) => e.head_specs(),
        }
    }

    pub fn reset(&mut self, ctx: SocialContext, rng: &mut ChaCha8Rng) -> Vec<AgentObs> {
        match self {
            GameEnv::Ipd(e) => e.reset(ctx, rng),
            GameEnv::Indirect(e) => e.reset(ctx, rng),
            GameEnv::Buddy(e) => e.reset(ctx, rng),
        }
    }

    pub fn step(
        &mut self,
        actions: &[Vec<usize>],
        rng: &mut ChaCha8Rng,
    ) -> (Vec<AgentObs>, StepResult) {
        match self {
            GameEnv::Ipd(e) => e.step(actions, rng),
            GameEnv::Indirect(e) => e.step(actions, rng),
            GameEnv::Buddy(e) => e.step(actions, rng),
        }
    }

    /// The social context of the episode in progress.
    pub fn context(&self) -> &SocialContext {
        match self {
            GameEnv::Ipd(e) => e.context(),
            GameEnv::Indirect(e) => e.context(),
            GameEnv::Buddy(e) => e.context(),
        }
    }
}

/// Environment selection plus overrides, as written in experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub name: String,
    pub n_agents: Option<usize>,
    pub payoffs: Option<Payoffs>,
    pub stop_prob: Option<f32>,
    pub horizon_cap: Option<usize>,
    pub fixed_horizon: Option<usize>,
    pub free_steps: Option<usize>,
    pub identity_dim: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            name: "ipd".to_string(),
            n_agents: None,
            payoffs: None,
            stop_prob: None,
            horizon_cap: None,
            fixed_horizon: None,
            free_steps: None,
            identity_dim: None,
        }
    }
}

impl EnvConfig {
    pub fn named(name: &str) -> Self {
        EnvConfig { name: name.to_string(), ..Default::default() }
    }

    pub fn build(&self) -> Result<GameEnv> {
        let env = match self.name.as_str() {
            "ipd" => GameEnv::Ipd(IpdEnv::new(self)?),
            "indirect" => GameEnv::Indirect(IndirectEnv::new(self, PairSchedule::Uniform)?),
            "buddy" => GameEnv::Buddy(BuddyEnv::new(self)?),
            other => return Err(Error::config(format!("unknown environment '{other}'"))),
        };
        env.spec().validate()?;
        Ok(env)
    }

    /// Copy with evaluation overrides applied.
    pub fn with_fixed_horizon(&self, horizon: usize) -> Self {
        EnvConfig { fixed_horizon: Some(horizon), ..self.clone() }
    }
}
