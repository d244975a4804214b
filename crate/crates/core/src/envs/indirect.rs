//! 3-player indirect-reciprocity prisoner's dilemma.
//!
//! On every step a pair of agents is designated active and plays one
//! prisoner's dilemma round at the usual payoffs while the third agent
//! spectates for zero reward. Everyone observes who is playing, everyone's
//! identities, and (from the next step on) the actions taken, which is what
//! makes reputation possible. The mean horizon is doubled to 20.
//!
//! Agents carry an identity vector resampled per episode, entries i.i.d.
//! U[0,1], so policies can tell individuals apart across interactions.
//!
//! Self block (8 + identity): active-now flag, played-previous-step flag,
//! sticky last-action one-hot (none/cooperate/defect), timestep, noisy
//! self-preference, own uncertainty, then own identity. Entity block
//! (9 + identity): the same flags for the other agent plus the viewer's
//! noisy preferences/uncertainties for both directions, then the entity's
//! identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rusp::SocialContext;

use super::{
    entity_agent, sample_horizon, AgentInfo, AgentObs, EnvConfig, EnvSpec, HeadSpec, MatrixMove,
    ObsLayout, Payoffs, PublicEvent, StepResult,
};

/// How the active pair is chosen each step.
#[derive(Debug, Clone)]
pub enum PairSchedule {
    /// Uniform over the three unordered pairs.
    Uniform,
    /// Fixed pair per step index (evaluation protocols).
    Scripted(Vec<(usize, usize)>),
}

pub const DEFAULT_IDENTITY_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct IndirectEnv {
    spec: EnvSpec,
    identity_dim: usize,
    schedule: PairSchedule,
    ctx: SocialContext,
    t: usize,
    horizon: usize,
    identities: Vec<Vec<f32>>,
    current_pair: (usize, usize),
    /// Sticky: most recent move each agent made when active.
    last_moves: Vec<Option<MatrixMove>>,
    played_prev: Vec<bool>,
}

impl IndirectEnv {
    pub fn new(cfg: &EnvConfig, schedule: PairSchedule) -> Result<Self> {
        let n_agents = cfg.n_agents.unwrap_or(3);
        if n_agents != 3 {
            return Err(Error::config("the indirect-reciprocity game uses 3 agents"));
        }
        let spec = EnvSpec {
            n_agents,
            payoffs: cfg.payoffs.unwrap_or_else(Payoffs::prisoners_dilemma),
            horizon_stop_prob: cfg.stop_prob.unwrap_or(0.05),
            horizon_cap: cfg.horizon_cap.unwrap_or(200),
            fixed_horizon: cfg.fixed_horizon,
            free_steps_between_rounds: 0,
        };
        Ok(IndirectEnv {
            spec,
            identity_dim: cfg.identity_dim.unwrap_or(DEFAULT_IDENTITY_DIM),
            schedule,
            ctx: SocialContext::selfish(n_agents),
            t: 0,
            horizon: 1,
            identities: vec![vec![0.0; cfg.identity_dim.unwrap_or(DEFAULT_IDENTITY_DIM)]; n_agents],
            current_pair: (0, 1),
            last_moves: vec![None; n_agents],
            played_prev: vec![false; n_agents],
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn context(&self) -> &SocialContext {
        &self.ctx
    }

    pub fn set_schedule(&mut self, schedule: PairSchedule) {
        self.schedule = schedule;
    }

    /// The pair that will play on the upcoming step.
    pub fn current_pair(&self) -> (usize, usize) {
        self.current_pair
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout {
            self_dim: 8 + self.identity_dim,
            entity_dim: 9 + self.identity_dim,
            n_entities: 2,
            value_self_dim: 1,
            value_entity_dim: 9,
        }
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        vec![HeadSpec::Categorical(2)]
    }

    fn draw_pair(&mut self, rng: &mut ChaCha8Rng) {
        self.current_pair = match &self.schedule {
            PairSchedule::Uniform => {
                const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
                PAIRS[rng.gen_range(0..3)]
            }
            PairSchedule::Scripted(pairs) => {
                let idx = self.t.min(pairs.len().saturating_sub(1));
                pairs[idx]
            }
        };
    }

    pub fn reset(&mut self, ctx: SocialContext, rng: &mut ChaCha8Rng) -> Vec<AgentObs> {
        assert_eq!(ctx.prefs.n, self.spec.n_agents);
        self.ctx = ctx;
        self.t = 0;
        self.horizon = sample_horizon(&self.spec, rng);
        self.identities = (0..self.spec.n_agents)
            .map(|_| (0..self.identity_dim).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        self.last_moves = vec![None; self.spec.n_agents];
        self.played_prev = vec![false; self.spec.n_agents];
        self.draw_pair(rng);
        self.observations()
    }

    pub fn step(
        &mut self,
        actions: &[Vec<usize>],
        rng: &mut ChaCha8Rng,
    ) -> (Vec<AgentObs>, StepResult) {
        let n = self.spec.n_agents;
        assert_eq!(actions.len(), n);
        let (a, b) = self.current_pair;
        let move_a = MatrixMove::from_index(actions[a][0]);
        let move_b = MatrixMove::from_index(actions[b][0]);

        let mut rewards = vec![0.0; n];
        rewards[a] = self.spec.payoffs.payoff(move_a, move_b);
        rewards[b] = self.spec.payoffs.payoff(move_b, move_a);

        let mut moves = vec![None; n];
        moves[a] = Some(move_a);
        moves[b] = Some(move_b);
        self.last_moves[a] = Some(move_a);
        self.last_moves[b] = Some(move_b);
        for k in 0..n {
            self.played_prev[k] = k == a || k == b;
        }

        self.t += 1;
        let done = self.t >= self.horizon;
        let infos = (0..n)
            .map(|k| AgentInfo { legal: true, active: k == a || k == b, phase: 0 })
            .collect();
        let event = PublicEvent::Matrix { active: vec![a, b], moves };
        self.draw_pair(rng);
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
        let (a, b) = self.current_pair;
        let active = |i: usize| (i == a || i == b) as u8 as f32;
        let own = Self::action_flags(self.last_moves[k]);
        let mut self_feats = vec![
            active(k),
            self.played_prev[k] as u8 as f32,
            own[0],
            own[1],
            own[2],
            self.t as f32,
            ctx.view.get(k, k, k),
            ctx.sigma.get(k, k, k),
        ];
        self_feats.extend_from_slice(&self.identities[k]);

        let n_ent = self.spec.n_agents - 1;
        let mut entity_feats = Vec::with_capacity(n_ent * (9 + self.identity_dim));
        let mut value_entity_extra = Vec::with_capacity(n_ent * 9);
        for slot in 0..n_ent {
            let j = entity_agent(k, slot);
            let theirs = Self::action_flags(self.last_moves[j]);
            entity_feats.extend_from_slice(&[
                active(j),
                self.played_prev[j] as u8 as f32,
                theirs[0],
                theirs[1],
                theirs[2],
                ctx.view.get(k, k, j),
                ctx.view.get(k, j, k),
                ctx.sigma.get(k, k, j),
                ctx.sigma.get(k, j, k),
            ]);
            entity_feats.extend_from_slice(&self.identities[j]);
            value_entity_extra.extend_from_slice(&[
                ctx.prefs.get(k, j),
                ctx.prefs.get(j, k),
                ctx.prefs.get(j, j),
                ctx.view.get(j, j, k),
                ctx.view.get(j, k, j),
                ctx.view.get(j, j, j),
                ctx.sigma.get(j, j, k),
                ctx.sigma.get(j, k, j),
                ctx.sigma.get(j, j, j),
            ]);
        }
        AgentObs {
            self_feats,
            entity_feats,
            value_self_extra: vec![ctx.prefs.get(k, k)],
            value_entity_extra,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn env(schedule: PairSchedule) -> IndirectEnv {
        IndirectEnv::new(&EnvConfig::named("indirect"), schedule).unwrap()
    }

    #[test]
    fn spectator_receives_nothing() {
        let mut e = env(PairSchedule::Scripted(vec![(1, 2); 10]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        e.spec.fixed_horizon = Some(10);
        e.reset(SocialContext::selfish(3), &mut rng);
        // Pair (1,2) plays (C,D): rewards (-2, 4) and spectator 0 gets 0.
        let (_, r) = e.step(&[vec![1], vec![0], vec![1]], &mut rng);
        assert_eq!(r.raw_rewards, vec![0.0, -2.0, 4.0]);
        assert!(!r.infos[0].active);
    }

    #[test]
    fn spectator_reward_is_identically_zero() {
        let mut e = env(PairSchedule::Uniform);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        e.spec.fixed_horizon = Some(10_000);
        e.reset(SocialContext::selfish(3), &mut rng);
        for _ in 0..10_000 {
            let pair = e.current_pair();
            let acts: Vec<Vec<usize>> = (0..3).map(|_| vec![rng.gen_range(0..2)]).collect();
            let (_, r) = e.step(&acts, &mut rng);
            for k in 0..3 {
                if k != pair.0 && k != pair.1 {
                    assert_eq!(r.raw_rewards[k], 0.0);
                }
            }
        }
    }

    #[test]
    fn pair_selection_is_uniform() {
        let mut e = env(PairSchedule::Uniform);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        e.spec.fixed_horizon = Some(100_000);
        e.reset(SocialContext::selfish(3), &mut rng);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            let pair = e.current_pair();
            let idx = match pair {
                (0, 1) => 0,
                (0, 2) => 1,
                (1, 2) => 2,
                other => panic!("unexpected pair {other:?}"),
            };
            counts[idx] += 1;
            e.step(&[vec![0], vec![0], vec![0]], &mut rng);
        }
        // Chi-squared against uniform, 2 dof, 99% critical value 9.21.
        let expected = 100_000.0 / 3.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 9.21, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn horizon_mean_is_twenty() {
        let e = env(PairSchedule::Uniform);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 100_000;
        let mut total = 0usize;
        for _ in 0..trials {
            total += sample_horizon(&e.spec, &mut rng);
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 20.0).abs() < 0.4, "mean horizon {mean}");
    }

    #[test]
    fn identities_are_sixteen_dimensional_in_unit_range() {
        let mut e = env(PairSchedule::Uniform);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        e.reset(SocialContext::selfish(3), &mut rng);
        for id in &e.identities {
            assert_eq!(id.len(), 16);
            assert!(id.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Resampled per episode.
        let before = e.identities.clone();
        e.reset(SocialContext::selfish(3), &mut rng);
        assert_ne!(before, e.identities);
    }

    #[test]
    fn everyone_observes_the_active_pair_and_its_actions() {
        let mut e = env(PairSchedule::Scripted(vec![(0, 1), (1, 2)]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        e.spec.fixed_horizon = Some(10);
        let obs = e.reset(SocialContext::selfish(3), &mut rng);
        // Agent 2 spectates but sees that agents 0 and 1 are active.
        assert_eq!(obs[2].self_feats[0], 0.0);
        assert_eq!(obs[2].entity_feats[0], 1.0); // entity 0 of agent 2 = agent 0
        let (obs, _) = e.step(&[vec![0], vec![1], vec![0]], &mut rng);
        // Spectator sees agent 0 cooperated (flags at entity offset 2..5),
        // agent 1 defected.
        let ent_dim = 9 + 16;
        assert_eq!(&obs[2].entity_feats[2..5], &[0.0, 1.0, 0.0]);
        assert_eq!(&obs[2].entity_feats[ent_dim + 2..ent_dim + 5], &[0.0, 0.0, 1.0]);
        // Both players flagged as having played the previous step.
        assert_eq!(obs[2].entity_feats[1], 1.0);
        assert_eq!(obs[2].entity_feats[ent_dim + 1], 1.0);
    }
}
