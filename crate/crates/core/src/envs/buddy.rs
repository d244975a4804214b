//! 5-player partner-choice game.
//!
//! Each step every agent either picks another agent (entity-attention head)
//! or sits out (binary head). Rounds repeat in blocks: a few free steps
//! where choices are visible but nothing pays out, then one rewarded step.
//! On a rewarded step a mutual choice pays both agents +2, an unreciprocated
//! choice costs the chooser 2 and pays the chosen agent 1, and sitting out
//! pays 0. Rewards are additive when several agents choose the same target.
//!
//! Episode length is geometric at block granularity (stop probability per
//! rewarded round), so the expected episode has 10 rewarded rounds.
//!
//! Self block (12): phase one-hot (5), timestep, no-previous-step flag, own
//! sat-out-previous-step flag, no-rewarded-round-yet flag, own sat-out in
//! the last rewarded round, noisy self-preference, own uncertainty. Entity
//! block (12): previous-step flags (chose me, chose someone else, sat out,
//! I chose them) and the same four for the last rewarded round, then the
//! viewer's noisy preferences/uncertainties both ways.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rusp::SocialContext;

use super::{
    entity_agent, sample_geometric, AgentInfo, AgentObs, EnvConfig, EnvSpec, HeadSpec, ObsLayout,
    Payoffs, PublicEvent, StepResult,
};

pub const MUTUAL_REWARD: f32 = 2.0;
pub const UNRECIPROCATED_COST: f32 = -2.0;
pub const CHOSEN_BONUS: f32 = 1.0;

#[derive(Debug, Clone)]
pub struct BuddyEnv {
    spec: EnvSpec,
    ctx: SocialContext,
    t: usize,
    /// Steps per block: free steps plus the rewarded step.
    block_len: usize,
    horizon_steps: usize,
    /// Choices made on the previous step; `None` until a step has happened.
    prev: Option<Vec<Option<usize>>>,
    /// Choices made on the last rewarded step.
    last_rewarded: Option<Vec<Option<usize>>>,
}

impl BuddyEnv {
    pub fn new(cfg: &EnvConfig) -> Result<Self> {
        let n_agents = cfg.n_agents.unwrap_or(5);
        if n_agents < 2 {
            return Err(Error::config("partner choice needs at least 2 agents"));
        }
        let free_steps = cfg.free_steps.unwrap_or(4);
        let spec = EnvSpec {
            n_agents,
            payoffs: cfg.payoffs.unwrap_or_else(Payoffs::prisoners_dilemma),
            horizon_stop_prob: cfg.stop_prob.unwrap_or(0.1),
            horizon_cap: cfg.horizon_cap.unwrap_or(250),
            fixed_horizon: cfg.fixed_horizon,
            free_steps_between_rounds: free_steps,
        };
        Ok(BuddyEnv {
            spec,
            ctx: SocialContext::selfish(n_agents),
            t: 0,
            block_len: free_steps + 1,
            horizon_steps: 0,
            prev: None,
            last_rewarded: None,
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
            self_dim: 7 + self.block_len,
            entity_dim: 12,
            n_entities: self.spec.n_agents - 1,
            value_self_dim: 1,
            value_entity_dim: 9,
        }
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        // Head 0: engage (0) or sit out (1). Head 1: target entity. The
        // entity list excludes the agent itself, so self-choice is
        // structurally impossible.
        vec![HeadSpec::Categorical(2), HeadSpec::Entity]
    }

    /// Phase of the upcoming step; the step is rewarded at `block_len - 1`.
    pub fn phase(&self) -> usize {
        self.t % self.block_len
    }

    pub fn is_rewarded_step(&self) -> bool {
        self.phase() == self.block_len - 1
    }

    pub fn reset(&mut self, ctx: SocialContext, rng: &mut ChaCha8Rng) -> Vec<AgentObs> {
        assert_eq!(ctx.prefs.n, self.spec.n_agents);
        self.ctx = ctx;
        self.t = 0;
        self.prev = None;
        self.last_rewarded = None;
        let cap_blocks = (self.spec.horizon_cap / self.block_len).max(1);
        let blocks = match self.spec.fixed_horizon {
            Some(steps) => steps.div_ceil(self.block_len),
            None => sample_geometric(self.spec.horizon_stop_prob, cap_blocks, rng),
        };
        self.horizon_steps = blocks * self.block_len;
        self.observations()
    }

    pub fn step(
        &mut self,
        actions: &[Vec<usize>],
        _rng: &mut ChaCha8Rng,
    ) -> (Vec<AgentObs>, StepResult) {
        let n = self.spec.n_agents;
        assert_eq!(actions.len(), n);
        let rewarded = self.is_rewarded_step();
        let phase = self.phase() as u8;

        let choices: Vec<Option<usize>> = actions
            .iter()
            .enumerate()
            .map(|(k, a)| if a[0] == 1 { None } else { Some(entity_agent(k, a[1])) })
            .collect();

        let mut rewards = vec![0.0; n];
        if rewarded {
            for k in 0..n {
                let Some(target) = choices[k] else { continue };
                if choices[target] == Some(k) {
                    // Mutual pair, counted once from each side.
                    rewards[k] += MUTUAL_REWARD;
                } else {
                    rewards[k] += UNRECIPROCATED_COST;
                    rewards[target] += CHOSEN_BONUS;
                }
            }
            self.last_rewarded = Some(choices.clone());
        }
        self.prev = Some(choices.clone());
        self.t += 1;
        let done = self.t >= self.horizon_steps;
        let infos =
            (0..n).map(|_| AgentInfo { legal: true, active: true, phase }).collect();
        let event = PublicEvent::Choices { chosen: choices, rewarded };
        (self.observations(), StepResult { raw_rewards: rewards, done, infos, event })
    }

    fn observations(&self) -> Vec<AgentObs> {
        (0..self.spec.n_agents).map(|k| self.observe(k)).collect()
    }

    fn choice_flags(record: &Option<Vec<Option<usize>>>, k: usize, j: usize) -> [f32; 4] {
        // [j chose me, j chose someone else, j sat out, I chose j]
        match record {
            None => [0.0; 4],
            Some(choices) => {
                let j_choice = choices[j];
                let mine = (choices[k] == Some(j)) as u8 as f32;
                match j_choice {
                    Some(t) if t == k => [1.0, 0.0, 0.0, mine],
                    Some(_) => [0.0, 1.0, 0.0, mine],
                    None => [0.0, 0.0, 1.0, mine],
                }
            }
        }
    }

    fn observe(&self, k: usize) -> AgentObs {
        let ctx = &self.ctx;
        let n = self.spec.n_agents;
        let mut self_feats = vec![0.0; self.block_len];
        self_feats[self.phase()] = 1.0;
        let sat_out = |rec: &Option<Vec<Option<usize>>>| match rec {
            Some(c) => c[k].is_none() as u8 as f32,
            None => 0.0,
        };
        self_feats.extend_from_slice(&[
            self.t as f32,
            self.prev.is_none() as u8 as f32,
            sat_out(&self.prev),
            self.last_rewarded.is_none() as u8 as f32,
            sat_out(&self.last_rewarded),
            ctx.view.get(k, k, k),
            ctx.sigma.get(k, k, k),
        ]);

        let mut entity_feats = Vec::with_capacity((n - 1) * 12);
        let mut value_entity_extra = Vec::with_capacity((n - 1) * 9);
        for slot in 0..n - 1 {
            let j = entity_agent(k, slot);
            entity_feats.extend_from_slice(&Self::choice_flags(&self.prev, k, j));
            entity_feats.extend_from_slice(&Self::choice_flags(&self.last_rewarded, k, j));
            entity_feats.extend_from_slice(&[
                ctx.view.get(k, k, j),
                ctx.view.get(k, j, k),
                ctx.sigma.get(k, k, j),
                ctx.sigma.get(k, j, k),
            ]);
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

    fn env() -> BuddyEnv {
        BuddyEnv::new(&EnvConfig::named("buddy")).unwrap()
    }

    /// Advance to the next rewarded step with everyone sitting out.
    fn skip_free_steps(e: &mut BuddyEnv, rng: &mut ChaCha8Rng) {
        while !e.is_rewarded_step() {
            let acts: Vec<Vec<usize>> = (0..e.spec.n_agents).map(|_| vec![1, 0]).collect();
            e.step(&acts, rng);
        }
    }

    fn choose(k: usize, j: usize) -> Vec<usize> {
        vec![0, super::super::agent_entity_slot(k, j)]
    }

    #[test]
    fn mutual_choice_pays_two_each() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        e.spec.fixed_horizon = Some(50);
        e.reset(SocialContext::selfish(5), &mut rng);
        skip_free_steps(&mut e, &mut rng);
        let acts =
            vec![choose(0, 1), choose(1, 0), vec![1, 0], vec![1, 0], vec![1, 0]];
        let (_, r) = e.step(&acts, &mut rng);
        assert_eq!(r.raw_rewards, vec![2.0, 2.0, 0.0, 0.0, 0.0]);
        // Exactly one mutual pair and three sit-outs sums to +4.
        assert_eq!(r.raw_rewards.iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn unreciprocated_choice_costs_chooser_and_pays_target() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        e.spec.fixed_horizon = Some(50);
        e.reset(SocialContext::selfish(5), &mut rng);
        skip_free_steps(&mut e, &mut rng);
        // Agent 4 chooses 3; 3 sits out.
        let acts = vec![vec![1, 0], vec![1, 0], vec![1, 0], vec![1, 0], choose(4, 3)];
        let (_, r) = e.step(&acts, &mut rng);
        assert_eq!(r.raw_rewards[4], -2.0);
        assert_eq!(r.raw_rewards[3], 1.0);
    }

    #[test]
    fn everyone_sitting_out_pays_nothing() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        e.spec.fixed_horizon = Some(50);
        e.reset(SocialContext::selfish(5), &mut rng);
        skip_free_steps(&mut e, &mut rng);
        let acts: Vec<Vec<usize>> = (0..5).map(|_| vec![1, 0]).collect();
        let (_, r) = e.step(&acts, &mut rng);
        assert!(r.raw_rewards.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn free_steps_never_pay() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        e.spec.fixed_horizon = Some(50);
        e.reset(SocialContext::selfish(5), &mut rng);
        for phase in 0..4 {
            assert_eq!(e.phase(), phase);
            assert!(!e.is_rewarded_step());
            let acts = vec![choose(0, 1), choose(1, 0), choose(2, 0), vec![1, 0], vec![1, 0]];
            let (_, r) = e.step(&acts, &mut rng);
            assert!(r.raw_rewards.iter().all(|&x| x == 0.0), "free step {phase} paid");
            if let PublicEvent::Choices { rewarded, .. } = r.event {
                assert!(!rewarded);
            }
        }
        assert!(e.is_rewarded_step());
    }

    #[test]
    fn choices_enter_next_observation() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        e.spec.fixed_horizon = Some(50);
        let obs0 = e.reset(SocialContext::selfish(5), &mut rng);
        // No previous step yet.
        assert_eq!(obs0[0].self_feats[6], 1.0);
        let acts = vec![choose(0, 1), choose(1, 0), choose(2, 0), vec![1, 0], vec![1, 0]];
        let (obs, _) = e.step(&acts, &mut rng);
        // Agent 0's entity 0 is agent 1: mutual flags.
        assert_eq!(&obs[0].entity_feats[0..4], &[1.0, 0.0, 0.0, 1.0]);
        // Agent 0's entity 1 is agent 2, who chose agent 0.
        assert_eq!(&obs[0].entity_feats[12..16], &[1.0, 0.0, 0.0, 0.0]);
        // Agent 1's entity 1 is agent 2, who chose someone else (agent 0).
        assert_eq!(&obs[1].entity_feats[12..16], &[0.0, 1.0, 0.0, 0.0]);
        // Agent 3 sat out: agent 0 sees it at entity slot 2.
        assert_eq!(&obs[0].entity_feats[24..28], &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rewarded_round_choices_persist_through_free_steps() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        e.spec.fixed_horizon = Some(50);
        e.reset(SocialContext::selfish(5), &mut rng);
        skip_free_steps(&mut e, &mut rng);
        let acts = vec![choose(0, 1), choose(1, 0), vec![1, 0], vec![1, 0], vec![1, 0]];
        e.step(&acts, &mut rng);
        // Next block's free steps still expose the rewarded-round choices.
        let sit: Vec<Vec<usize>> = (0..5).map(|_| vec![1, 0]).collect();
        let (obs, _) = e.step(&sit, &mut rng);
        // Last-rewarded flags sit at offsets 4..8 of each entity block.
        assert_eq!(&obs[0].entity_feats[4..8], &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn horizon_is_whole_blocks_with_expected_rounds() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut total_blocks = 0usize;
        let trials = 20_000;
        for _ in 0..trials {
            e.reset(SocialContext::selfish(5), &mut rng);
            assert_eq!(e.horizon_steps % e.block_len, 0);
            total_blocks += e.horizon_steps / e.block_len;
        }
        let mean = total_blocks as f64 / trials as f64;
        // Stop probability 0.1 per rewarded round: 10 rounds expected.
        assert!((mean - 10.0).abs() < 0.25, "mean rewarded rounds {mean}");
    }

    #[test]
    fn ten_block_fixed_horizon_runs_fifty_steps() {
        let mut e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        e.spec.fixed_horizon = Some(50);
        e.reset(SocialContext::selfish(5), &mut rng);
        let sit: Vec<Vec<usize>> = (0..5).map(|_| vec![1, 0]).collect();
        let mut steps = 0;
        let mut rewarded = 0;
        loop {
            let was_rewarded = e.is_rewarded_step();
            let (_, r) = e.step(&sit, &mut rng);
            steps += 1;
            rewarded += was_rewarded as usize;
            if r.done {
                break;
            }
        }
        assert_eq!(steps, 50);
        assert_eq!(rewarded, 10);
    }
}
