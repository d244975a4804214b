//! 2-player iterated prisoner's dilemma.
//!
//! Agents observe their own and their opponent's previous action plus the
//! current timestep, never the horizon. Self block (6): no-previous-action
//! flag, last-action one-hot (cooperate, defect), timestep, own noisy
//! self-preference, own uncertainty about it. Entity block (7): the same
//! action flags for the opponent, then the viewer's noisy preferences and
//! uncertainties for (self, other) and (other, self). Value extras carry the
//! true matrix entries and the opponent's own noisy views.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rusp::SocialContext;

use super::{
    entity_agent, sample_horizon, AgentInfo, AgentObs, EnvConfig, EnvSpec, HeadSpec, MatrixMove,
    ObsLayout, Payoffs, PublicEvent, StepResult,
};

#[derive(Debug, Clone)]
pub struct IpdEnv {
    spec: EnvSpec,
    ctx: SocialContext,
    t: usize,
    horizon: usize,
    last_moves: Vec<Option<MatrixMove>>,
}

impl IpdEnv {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        let n_agents = cfg.n_agents.unwrap_or(2);
        if n_agents != 2 {
            return Err(Error::config("the iterated prisoner's dilemma is a 2-player game"));
        }
        let payoffs = cfg.payoffs.unwrap_or_else(Payoffs::prisoners_dilemma);
        let spec = EnvSpec {
            n_agents,
            payoffs,
            horizon_stop_prob: cfg.stop_prob.unwrap_or(0.1),
            horizon_cap: cfg.horizon_cap.unwrap_or(100),
            fixed_horizon: cfg.fixed_horizon,
            free_steps_between_rounds: 0,
        };
        Ok(IpdEnv {
            spec,
            ctx: SocialContext::selfish(n_agents),
            t: 0,
            horizon: 1,
            last_moves: vec![None; n_agents],
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn context(&self) -> &SocialContext {
        &self.ctx
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout {
            self_dim: 6,
            entity_dim: 7,
            n_entities: 1,
            value_self_dim: 1,
            value_entity_dim: 7,
        }
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        vec![HeadSpec::Categorical(2)]
    }

    pub fn reset(&mut self, ctx: SocialContext, rng: &mut ChaCha8Rng) -> Vec<AgentObs> {
        assert_eq!(ctx.prefs.n, self.spec.n_agents);
        self.ctx = ctx;
        self.t = 0;
        self.horizon = sample_horizon(&self.spec, rng);
        self.last_moves = vec![None; self.spec.n_agents];
        self.observations()
    }

    pub fn step(
        &mut self,
        actions: &[Vec<usize>],
        _rng: &mut ChaCha8Rng,
    ) -> (Vec<AgentObs>, StepResult) {
        assert_eq!(actions.len(), 2, "both agents act");
        let moves: Vec<MatrixMove> =
            actions.iter().map(|a| MatrixMove::from_index(a[0])).collect();
        let rewards = vec![
            self.spec.payoffs.payoff(moves[0], moves[1]),
            self.spec.payoffs.payoff(moves[1], moves[0]),
        ];
        self.last_moves = moves.iter().map(|&m| Some(m)).collect();
        self.t += 1;
        let done = self.t >= self.horizon;
        let infos = (0..2).map(|_| AgentInfo { legal: true, active: true, phase: 0 }).collect();
        let event =
            PublicEvent::Matrix { active: vec![0, 1], moves: moves.iter().map(|&m| Some(m)).collect() };
        (self.observations(), StepResult { raw_rewards: rewards, done, infos, event })
    }

    fn observations(&self) -> Vec<AgentObs> {
        (0..self.spec.n_agents).map(|k| self.observe(k)).collect()
    }

    fn action_flags(m: Option<MatrixMove>) -> [f32; 3] {
        match m {
            None => [1.0, 0.0, 0.0],
            Some(MatrixMove::Cooperate) => [0.0, 1.0, 0.0],
            Some(MatrixMove::Defect) => [0.0, 0.0, 1.0],
        }
    }

    fn observe(&self, k: usize) -> AgentObs {
        let ctx = &self.ctx;
        let own = Self::action_flags(self.last_moves[k]);
        let self_feats = vec![
            own[0],
            own[1],
            own[2],
            self.t as f32,
            ctx.view.get(k, k, k),
            ctx.sigma.get(k, k, k),
        ];
        let j = entity_agent(k, 0);
        let theirs = Self::action_flags(self.last_moves[j]);
        let entity_feats = vec![
            theirs[0],
            theirs[1],
            theirs[2],
            ctx.view.get(k, k, j),
            ctx.view.get(k, j, k),
            ctx.sigma.get(k, k, j),
            ctx.sigma.get(k, j, k),
        ];
        let value_self_extra = vec![ctx.prefs.get(k, k)];
        let value_entity_extra = vec![
            ctx.prefs.get(k, j),
            ctx.prefs.get(j, k),
            ctx.prefs.get(j, j),
            ctx.view.get(j, j, k),
            ctx.view.get(j, k, j),
            ctx.sigma.get(j, j, k),
            ctx.sigma.get(j, k, j),
        ];
        AgentObs { self_feats, entity_feats, value_self_extra, value_entity_extra }
    }
}
