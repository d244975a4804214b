//! Evaluation protocols and fixed opponents.
//!
//! Every protocol runs in the unmodified selfish game: the identity reward
//! transformation with zero uncertainty, fixed horizons, and (by default)
//! stochastic action sampling to match training-time behavior. Protocols:
//!
//! - self-play defect counts in the 2-player game;
//! - reciprocity classification against all-defect and all-cooperate
//!   fixtures (reciprocal when the agent defects at least one more time
//!   against the defector than against the cooperator);
//! - hold-out: the evaluated agent spectates a 3-player game until the
//!   final step, then plays the fixture cold;
//! - prior rapport: the evaluated agent builds rapport with a partner,
//!   watches the partner suffer an all-defect third party, then plays both;
//! - team metrics in the partner-choice game: how many agents sit on a
//!   mutual team at rewarded steps, and how long teams last.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{
    EnvConfig, GameEnv, IndirectEnv, MatrixMove, PairSchedule, PublicEvent, StepResult,
};
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::policy::{
    head_arity, select_actions, ActMode, EntityNet, RecurrentState,
};
use crate::rusp::{RuspConfig, SocialContext};
use crate::trainer::{seed_stream, ObsNormalizer};

/// Scripted opponents.
///
/// Tit-for-tat cooperates on first interaction and then mirrors the
/// opponent's last action toward itself. The observed-history variant
/// mirrors the opponent's last action toward anyone, which is the oracle
/// the spectating protocols are checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedStrategy {
    AllCooperate,
    AllDefect,
    TitForTat,
    ObservedHistoryTitForTat,
}

/// What the scripted strategies remember: per-pair and overall last moves.
#[derive(Debug, Clone)]
struct MoveHistory {
    /// `toward[a][b]`: last move agent `a` made in a game against `b`.
    toward: Vec<Vec<Option<MatrixMove>>>,
    /// Last move each agent made against anyone.
    overall: Vec<Option<MatrixMove>>,
}

impl MoveHistory {
    fn new(n: usize) -> Self {
        MoveHistory { toward: vec![vec![None; n]; n], overall: vec![None; n] }
    }

    fn record(&mut self, event: &PublicEvent) {
        if let PublicEvent::Matrix { active, moves } = event {
            if let [a, b] = active[..] {
                self.toward[a][b] = moves[a];
                self.toward[b][a] = moves[b];
            }
            for (agent, m) in moves.iter().enumerate() {
                if m.is_some() {
                    self.overall[agent] = *m;
                }
            }
        }
    }
}

impl FixedStrategy {
    fn act(&self, me: usize, opponent: Option<usize>, history: &MoveHistory) -> usize {
        let mirror = |m: Option<MatrixMove>| match m {
            Some(MatrixMove::Defect) => 1,
            _ => 0,
        };
        match self {
            FixedStrategy::AllCooperate => 0,
            FixedStrategy::AllDefect => 1,
            FixedStrategy::TitForTat => {
                mirror(opponent.and_then(|o| history.toward[o][me]))
            }
            FixedStrategy::ObservedHistoryTitForTat => {
                mirror(opponent.and_then(|o| history.overall[o]))
            }
        }
    }
}

/// One seat at the table: a network (index into the provided net list) or a
/// fixed strategy.
#[derive(Debug, Clone, Copy)]
pub enum EvalAgent {
    Net(usize),
    Fixed(FixedStrategy),
}

/// A network with the observation statistics it was trained under.
#[derive(Clone, Copy)]
pub struct NetRef<'a> {
    pub net: &'a EntityNet,
    pub normalizer: &'a ObsNormalizer,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub mode: ActMode,
    pub par: Parallelism,
    /// Episodes run in lockstep per wave.
    pub max_wave: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            episodes: 1000,
            seed: 0,
            mode: ActMode::Sample,
            par: Parallelism::auto(),
            max_wave: 256,
        }
    }
}

/// Runs `opts.episodes` fixed-horizon episodes of `proto` and feeds every
/// step's result to `on_step(episode, step, result)`.
///
/// All episodes use evaluation preferences (identity matrix, zero
/// uncertainty); this is asserted per episode.
fn run_episodes(
    proto: &GameEnv,
    agents: &[EvalAgent],
    nets: &[NetRef<'_>],
    opts: &EvalOptions,
    mut on_step: impl FnMut(usize, usize, &StepResult),
) -> Result<()> {
    let spec = proto.spec();
    let horizon = spec
        .fixed_horizon
        .ok_or_else(|| Error::config("evaluation requires a fixed horizon"))?;
    let n_agents = spec.n_agents;
    if agents.len() != n_agents {
        return Err(Error::config("one agent spec per seat required"));
    }
    let layout = proto.layout();
    let eval_rusp = RuspConfig::evaluation();
    let hidden = nets.first().map_or(0, |n| n.net.hidden);

    let mut remaining = opts.episodes;
    let mut episode_base = 0usize;
    while remaining > 0 {
        let wave = remaining.min(opts.max_wave);
        let mut envs: Vec<GameEnv> = Vec::with_capacity(wave);
        let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(wave);
        let mut pending = Vec::with_capacity(wave);
        let mut states: Vec<Vec<RecurrentState>> = Vec::with_capacity(wave);
        let mut histories: Vec<MoveHistory> = Vec::with_capacity(wave);
        for w in 0..wave {
            let mut env = proto.clone();
            let mut rng =
                seed_stream(opts.seed, &[0x6576616c, (episode_base + w) as u64]);
            let ctx = SocialContext::sample(n_agents, &eval_rusp, &mut rng);
            assert!(ctx.prefs.is_identity(), "evaluation must use the selfish game");
            assert!(ctx.sigma.sigma.iter().all(|&s| s == 0.0));
            let obs = env.reset(ctx, &mut rng);
            envs.push(env);
            rngs.push(rng);
            pending.push(obs);
            states.push((0..n_agents).map(|_| RecurrentState::zeros(hidden)).collect());
            histories.push(MoveHistory::new(n_agents));
        }

        for step in 0..horizon {
            // Batched forward per distinct network.
            let mut logits: Vec<Vec<Vec<Vec<f32>>>> = vec![Vec::new(); wave];
            for (w, l) in logits.iter_mut().enumerate() {
                l.resize(n_agents, Vec::new());
                let _ = w;
            }
            for (ni, net_ref) in nets.iter().enumerate() {
                let members: Vec<(usize, usize)> = (0..wave)
                    .flat_map(|w| {
                        agents.iter().enumerate().filter_map(move |(ai, a)| match a {
                            EvalAgent::Net(i) if *i == ni => Some((w, ai)),
                            _ => None,
                        })
                    })
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let mut x = Vec::new();
                let mut h = Vec::new();
                let mut c = Vec::new();
                for &(w, ai) in &members {
                    net_input_rows(
                        &pending[w][ai],
                        layout,
                        net_ref.normalizer,
                        &mut x,
                    );
                    h.extend_from_slice(&states[w][ai].h);
                    c.extend_from_slice(&states[w][ai].c);
                }
                let out =
                    crate::policy::forward(net_ref.net, opts.par, &x, &h, &c, members.len())?;
                for (m, &(w, ai)) in members.iter().enumerate() {
                    let mut per_head = Vec::new();
                    for (hi, head) in net_ref.net.heads.iter().enumerate() {
                        let k = head_arity(*head, layout.n_entities);
                        per_head.push(out.head_outputs[hi][m * k..(m + 1) * k].to_vec());
                    }
                    logits[w][ai] = per_head;
                    states[w][ai].h.copy_from_slice(&out.h_next[m * hidden..(m + 1) * hidden]);
                    states[w][ai].c.copy_from_slice(&out.c_next[m * hidden..(m + 1) * hidden]);
                }
            }

            for w in 0..wave {
                let mut acts: Vec<Vec<usize>> = Vec::with_capacity(n_agents);
                for (ai, agent) in agents.iter().enumerate() {
                    match agent {
                        EvalAgent::Net(ni) => {
                            let (a, _) = select_actions(
                                &nets[*ni].net.heads,
                                layout.n_entities,
                                &logits[w][ai],
                                0,
                                None,
                                opts.mode,
                                &mut rngs[w],
                            )?;
                            acts.push(a);
                        }
                        EvalAgent::Fixed(strategy) => {
                            let opponent = current_opponent(&envs[w], ai);
                            acts.push(vec![strategy.act(ai, opponent, &histories[w])]);
                        }
                    }
                }
                let (obs, result) = envs[w].step(&acts, &mut rngs[w]);
                histories[w].record(&result.event);
                on_step(episode_base + w, step, &result);
                pending[w] = obs;
            }
        }
        episode_base += wave;
        remaining -= wave;
    }
    Ok(())
}

/// The agent the given seat would play against this step, when defined.
fn current_opponent(env: &GameEnv, ai: usize) -> Option<usize> {
    match env {
        GameEnv::Ipd(_) => Some(1 - ai),
        GameEnv::Indirect(e) => {
            let (a, b) = e.current_pair();
            if a == ai {
                Some(b)
            } else if b == ai {
                Some(a)
            } else {
                None
            }
        }
        GameEnv::Buddy(_) => None,
    }
}

fn net_input_rows(
    obs: &crate::envs::AgentObs,
    layout: crate::envs::ObsLayout,
    norm: &ObsNormalizer,
    out: &mut Vec<f32>,
) {
    let mut self_n = obs.self_feats.clone();
    norm.self_block.normalize_rows(&mut self_n, layout.self_dim);
    let mut ent_n = obs.entity_feats.clone();
    norm.entity_block.normalize_rows(&mut ent_n, layout.entity_dim);
    for e in 0..layout.n_entities {
        out.extend_from_slice(&self_n);
        out.extend_from_slice(&ent_n[e * layout.entity_dim..(e + 1) * layout.entity_dim]);
    }
}

/// Mean defect actions per agent per episode when the two seats play the
/// given specs (both seats count toward the mean).
pub fn selfplay_defects(
    agents: [EvalAgent; 2],
    nets: &[NetRef<'_>],
    horizon: usize,
    opts: &EvalOptions,
) -> Result<f64> {
    let proto = EnvConfig::named("ipd").with_fixed_horizon(horizon).build()?;
    let mut defects = 0u64;
    run_episodes(&proto, &agents, nets, opts, |_, _, result| {
        if let PublicEvent::Matrix { moves, .. } = &result.event {
            defects +=
                moves.iter().filter(|m| matches!(m, Some(MatrixMove::Defect))).count() as u64;
        }
    })?;
    Ok(defects as f64 / (2 * opts.episodes) as f64)
}

/// Mean defect actions per episode taken by seat 0 against the given seat-1
/// fixture.
pub fn defects_vs_fixture(
    evaluated: EvalAgent,
    fixture: FixedStrategy,
    nets: &[NetRef<'_>],
    horizon: usize,
    opts: &EvalOptions,
) -> Result<f64> {
    let proto = EnvConfig::named("ipd").with_fixed_horizon(horizon).build()?;
    let agents = [evaluated, EvalAgent::Fixed(fixture)];
    let mut defects = 0u64;
    run_episodes(&proto, &agents, nets, opts, |_, _, result| {
        if let PublicEvent::Matrix { moves, .. } = &result.event {
            if matches!(moves[0], Some(MatrixMove::Defect)) {
                defects += 1;
            }
        }
    })?;
    Ok(defects as f64 / opts.episodes as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReciprocityReport {
    pub defects_vs_alldefect: f64,
    pub defects_vs_allcooperate: f64,
    pub margin: f64,
    pub reciprocal: bool,
}

/// Classifies seat 0 as reciprocal when it defects against all-defect at
/// least one more time per episode than against all-cooperate.
pub fn classify_reciprocal(
    evaluated: EvalAgent,
    nets: &[NetRef<'_>],
    opts: &EvalOptions,
) -> Result<ReciprocityReport> {
    let vs_defect = defects_vs_fixture(evaluated, FixedStrategy::AllDefect, nets, 10, opts)?;
    let vs_coop = defects_vs_fixture(evaluated, FixedStrategy::AllCooperate, nets, 10, opts)?;
    let margin = vs_defect - vs_coop;
    Ok(ReciprocityReport {
        defects_vs_alldefect: vs_defect,
        defects_vs_allcooperate: vs_coop,
        margin,
        reciprocal: margin >= 1.0,
    })
}

/// Hold-out protocol: seat 0 (evaluated) spectates seats 1 (fixture) and 2
/// (co-player) for `horizon - 1` steps, then plays the fixture on the final
/// step. Returns the evaluated agent's defect rate at that final step.
pub fn eval_holdout(
    evaluated: EvalAgent,
    fixture: FixedStrategy,
    coplayer: EvalAgent,
    nets: &[NetRef<'_>],
    horizon: usize,
    opts: &EvalOptions,
) -> Result<f64> {
    let mut schedule: Vec<(usize, usize)> = vec![(1, 2); horizon - 1];
    schedule.push((0, 1));
    let cfg = EnvConfig::named("indirect").with_fixed_horizon(horizon);
    let env = IndirectEnv::new(&cfg, PairSchedule::Scripted(schedule))?;
    let proto = GameEnv::Indirect(env);
    let agents = [evaluated, EvalAgent::Fixed(fixture), coplayer];
    let mut final_defects = 0u64;
    let mut final_plays = 0u64;
    run_episodes(&proto, &agents, nets, opts, |_, step, result| {
        if let PublicEvent::Matrix { active, moves } = &result.event {
            if step + 1 < horizon {
                // Structural contract: the evaluated agent never plays
                // before the final step.
                assert!(!active.contains(&0), "evaluated agent acted early");
            } else {
                final_plays += 1;
                if matches!(moves[0], Some(MatrixMove::Defect)) {
                    final_defects += 1;
                }
            }
        }
    })?;
    Ok(final_defects as f64 / final_plays.max(1) as f64)
}

/// Prior-rapport protocol. Seat 0 is the evaluated agent, seat 1 the
/// partner, seat 2 all-defect. Phase 1 pairs (0,1) for `k1` steps, phase 2
/// pairs (1,2) for `k2` steps, phase 3 alternates (0,1) and (0,2) for `k3`
/// steps. Returns P(seat 0 cooperates with 1) - P(seat 0 cooperates with 2)
/// over phase 3.
pub fn eval_prior_rapport(
    evaluated: EvalAgent,
    partner: EvalAgent,
    nets: &[NetRef<'_>],
    phases: (usize, usize, usize),
    opts: &EvalOptions,
) -> Result<f64> {
    let (k1, k2, k3) = phases;
    let horizon = k1 + k2 + k3;
    let mut schedule: Vec<(usize, usize)> = Vec::with_capacity(horizon);
    schedule.extend(std::iter::repeat((0, 1)).take(k1));
    schedule.extend(std::iter::repeat((1, 2)).take(k2));
    for i in 0..k3 {
        schedule.push(if i % 2 == 0 { (0, 1) } else { (0, 2) });
    }
    let cfg = EnvConfig::named("indirect").with_fixed_horizon(horizon);
    let env = IndirectEnv::new(&cfg, PairSchedule::Scripted(schedule))?;
    let proto = GameEnv::Indirect(env);
    let agents = [evaluated, partner, EvalAgent::Fixed(FixedStrategy::AllDefect)];
    let mut coop_partner = (0u64, 0u64);
    let mut coop_defector = (0u64, 0u64);
    run_episodes(&proto, &agents, nets, opts, |_, step, result| {
        if step < k1 + k2 {
            return;
        }
        if let PublicEvent::Matrix { active, moves } = &result.event {
            if !active.contains(&0) {
                return;
            }
            let with_partner = active.contains(&1);
            let cooperated = matches!(moves[0], Some(MatrixMove::Cooperate));
            let slot = if with_partner { &mut coop_partner } else { &mut coop_defector };
            slot.1 += 1;
            if cooperated {
                slot.0 += 1;
            }
        }
    })?;
    let p_partner = coop_partner.0 as f64 / coop_partner.1.max(1) as f64;
    let p_defector = coop_defector.0 as f64 / coop_defector.1.max(1) as f64;
    Ok(p_partner - p_defector)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TeamMetrics {
    /// Mean raw reward per agent per rewarded step.
    pub mean_reward: f64,
    /// Mean number of agents in a mutual pair per rewarded step.
    pub agents_on_team: f64,
    /// Mean length (consecutive rewarded rounds) of the coalitions formed.
    pub mean_team_length: f64,
}

/// Accumulates team metrics from partner-choice step events.
#[derive(Debug, Default)]
pub struct TeamMetricsAccumulator {
    n_agents: usize,
    rewarded_steps: u64,
    agents_on_team_total: u64,
    reward_total: f64,
    /// Ongoing run length per ordered pair key.
    runs: std::collections::HashMap<(usize, usize), u64>,
    finished_runs: Vec<u64>,
    /// Pairs mutual at the current rewarded step.
    current: Vec<(usize, usize)>,
}

impl TeamMetricsAccumulator {
    pub fn new(n_agents: usize) -> Self {
        TeamMetricsAccumulator { n_agents, ..Default::default() }
    }

    /// Feed one rewarded-step event: everyone's choices plus raw rewards.
    pub fn rewarded_step(&mut self, chosen: &[Option<usize>], rewards: &[f32]) {
        self.rewarded_steps += 1;
        self.reward_total += rewards.iter().map(|&r| r as f64).sum::<f64>();
        self.current.clear();
        for a in 0..self.n_agents {
            if let Some(b) = chosen[a] {
                if b > a && chosen[b] == Some(a) {
                    self.current.push((a, b));
                }
            }
        }
        self.agents_on_team_total += 2 * self.current.len() as u64;
        // Extend or finish runs.
        let mut still: std::collections::HashMap<(usize, usize), u64> =
            std::collections::HashMap::new();
        for &pair in &self.current {
            let len = self.runs.remove(&pair).unwrap_or(0) + 1;
            still.insert(pair, len);
        }
        for (_, len) in self.runs.drain() {
            self.finished_runs.push(len);
        }
        self.runs = still;
    }

    /// Close the episode: ongoing runs end here.
    pub fn finish_episode(&mut self) {
        for (_, len) in self.runs.drain() {
            self.finished_runs.push(len);
        }
    }

    pub fn metrics(&self) -> TeamMetrics {
        let steps = self.rewarded_steps.max(1) as f64;
        let mean_team_length = if self.finished_runs.is_empty() {
            0.0
        } else {
            self.finished_runs.iter().sum::<u64>() as f64 / self.finished_runs.len() as f64
        };
        TeamMetrics {
            mean_reward: self.reward_total / (steps * self.n_agents as f64),
            agents_on_team: self.agents_on_team_total as f64 / steps,
            mean_team_length,
        }
    }
}

/// Team metrics for a policy in the partner-choice game over fixed-horizon
/// evaluation episodes.
pub fn team_metrics(
    policy: NetRef<'_>,
    env_cfg: &EnvConfig,
    horizon: usize,
    opts: &EvalOptions,
) -> Result<TeamMetrics> {
    let proto = env_cfg.with_fixed_horizon(horizon).build()?;
    let n = proto.spec().n_agents;
    let agents: Vec<EvalAgent> = (0..n).map(|_| EvalAgent::Net(0)).collect();
    let mut acc = TeamMetricsAccumulator::new(n);
    let mut last_episode = usize::MAX;
    run_episodes(&proto, &agents, &[policy], opts, |episode, _, result| {
        if episode != last_episode {
            if last_episode != usize::MAX {
                acc.finish_episode();
            }
            last_episode = episode;
        }
        if let PublicEvent::Choices { chosen, rewarded } = &result.event {
            if *rewarded {
                acc.rewarded_step(chosen, &result.raw_rewards);
            }
        }
    })?;
    acc.finish_episode();
    Ok(acc.metrics())
}

/// Aggregate evaluation record serialized into the metrics stream.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selfplay_defects: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defects_vs_alldefect: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defects_vs_allcooperate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reciprocity_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reciprocal: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_defect_vs_alldefect: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_defect_vs_allcooperate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rapport_differential: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub team_mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub team_agents_on_team: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub team_mean_length: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(episodes: usize, seed: u64) -> EvalOptions {
        EvalOptions { episodes, seed, ..Default::default() }
    }

    #[test]
    fn alldefect_selfplay_defects_ten_of_ten() {
        let d = selfplay_defects(
            [EvalAgent::Fixed(FixedStrategy::AllDefect), EvalAgent::Fixed(FixedStrategy::AllDefect)],
            &[],
            10,
            &opts(50, 0),
        )
        .unwrap();
        assert_eq!(d, 10.0);
    }

    #[test]
    fn allcooperate_selfplay_never_defects() {
        let d = selfplay_defects(
            [
                EvalAgent::Fixed(FixedStrategy::AllCooperate),
                EvalAgent::Fixed(FixedStrategy::AllCooperate),
            ],
            &[],
            10,
            &opts(50, 1),
        )
        .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn two_tit_for_tats_cooperate_from_step_one() {
        let d = selfplay_defects(
            [EvalAgent::Fixed(FixedStrategy::TitForTat), EvalAgent::Fixed(FixedStrategy::TitForTat)],
            &[],
            10,
            &opts(50, 2),
        )
        .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn tit_for_tat_classifies_reciprocal_with_margin_nine() {
        let report =
            classify_reciprocal(EvalAgent::Fixed(FixedStrategy::TitForTat), &[], &opts(100, 3))
                .unwrap();
        // Mirrors from step 2 against all-defect: 9 defects; 0 vs cooperate.
        assert_eq!(report.defects_vs_alldefect, 9.0);
        assert_eq!(report.defects_vs_allcooperate, 0.0);
        assert_eq!(report.margin, 9.0);
        assert!(report.reciprocal);
    }

    #[test]
    fn alldefect_is_not_reciprocal() {
        let report =
            classify_reciprocal(EvalAgent::Fixed(FixedStrategy::AllDefect), &[], &opts(100, 4))
                .unwrap();
        assert_eq!(report.defects_vs_alldefect, 10.0);
        assert_eq!(report.defects_vs_allcooperate, 10.0);
        assert_eq!(report.margin, 0.0);
        assert!(!report.reciprocal);
    }

    #[test]
    fn allcooperate_is_not_reciprocal() {
        let report =
            classify_reciprocal(EvalAgent::Fixed(FixedStrategy::AllCooperate), &[], &opts(100, 5))
                .unwrap();
        assert_eq!(report.margin, 0.0);
        assert!(!report.reciprocal);
    }

    #[test]
    fn classification_is_slot_permutation_invariant() {
        // The metric only reads seat 0's moves; playing the evaluated
        // strategy from the other seat of the fixture game gives the same
        // counts because the protocol constructs the seating itself.
        let a = classify_reciprocal(EvalAgent::Fixed(FixedStrategy::TitForTat), &[], &opts(64, 6))
            .unwrap();
        let b = classify_reciprocal(EvalAgent::Fixed(FixedStrategy::TitForTat), &[], &opts(64, 7))
            .unwrap();
        assert_eq!(a.margin, b.margin);
    }

    #[test]
    fn holdout_oracle_mirrors_observed_fixture() {
        // An observed-history tit-for-tat oracle watching an all-defect
        // fixture defects on the final step with certainty; watching
        // all-cooperate it cooperates.
        let vs_defect = eval_holdout(
            EvalAgent::Fixed(FixedStrategy::ObservedHistoryTitForTat),
            FixedStrategy::AllDefect,
            EvalAgent::Fixed(FixedStrategy::AllCooperate),
            &[],
            20,
            &opts(200, 8),
        )
        .unwrap();
        assert_eq!(vs_defect, 1.0);
        let vs_coop = eval_holdout(
            EvalAgent::Fixed(FixedStrategy::ObservedHistoryTitForTat),
            FixedStrategy::AllCooperate,
            EvalAgent::Fixed(FixedStrategy::AllCooperate),
            &[],
            20,
            &opts(200, 9),
        )
        .unwrap();
        assert_eq!(vs_coop, 0.0);
    }

    #[test]
    fn rapport_observed_history_oracle_discriminates_perfectly() {
        // The oracle saw the third party defect during phase 2, so it
        // defects on it from their first meeting while fully cooperating
        // with the cooperative partner.
        let diff = eval_prior_rapport(
            EvalAgent::Fixed(FixedStrategy::ObservedHistoryTitForTat),
            EvalAgent::Fixed(FixedStrategy::AllCooperate),
            &[],
            (6, 6, 8),
            &opts(200, 10),
        )
        .unwrap();
        assert_eq!(diff, 1.0);
    }

    #[test]
    fn rapport_pairwise_tit_for_tat_forgives_first_meeting() {
        // Plain tit-for-tat only reacts to moves made against itself: the
        // first phase-3 meeting with the defector is a cooperate, the
        // remaining three are defects. Differential: 1.0 - 1/4.
        let diff = eval_prior_rapport(
            EvalAgent::Fixed(FixedStrategy::TitForTat),
            EvalAgent::Fixed(FixedStrategy::AllCooperate),
            &[],
            (6, 6, 8),
            &opts(200, 11),
        )
        .unwrap();
        assert!((diff - 0.75).abs() < 1e-9, "differential {diff}");
    }

    #[test]
    fn fully_cooperative_agent_has_zero_differential() {
        let diff = eval_prior_rapport(
            EvalAgent::Fixed(FixedStrategy::AllCooperate),
            EvalAgent::Fixed(FixedStrategy::AllCooperate),
            &[],
            (6, 6, 8),
            &opts(100, 12),
        )
        .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn team_accumulator_scripted_stable_pairs() {
        // Four agents pair stably for 10 rewarded rounds; one sits out.
        let mut acc = TeamMetricsAccumulator::new(5);
        let chosen = vec![Some(1), Some(0), Some(3), Some(2), None];
        let rewards = vec![2.0f32, 2.0, 2.0, 2.0, 0.0];
        for _ in 0..10 {
            acc.rewarded_step(&chosen, &rewards);
        }
        acc.finish_episode();
        let m = acc.metrics();
        assert_eq!(m.agents_on_team, 4.0);
        assert_eq!(m.mean_team_length, 10.0);
        assert!((m.mean_reward - 8.0 / 5.0).abs() < 1e-9);
    }

    #[test]
    fn team_accumulator_everyone_sits_out() {
        let mut acc = TeamMetricsAccumulator::new(5);
        for _ in 0..10 {
            acc.rewarded_step(&vec![None; 5], &[0.0; 5]);
        }
        acc.finish_episode();
        let m = acc.metrics();
        assert_eq!(m.agents_on_team, 0.0);
        assert_eq!(m.mean_reward, 0.0);
        assert_eq!(m.mean_team_length, 0.0);
    }

    #[test]
    fn team_accumulator_partner_switching_gives_length_one() {
        let mut acc = TeamMetricsAccumulator::new(4);
        for round in 0..10 {
            let chosen = if round % 2 == 0 {
                vec![Some(1), Some(0), Some(3), Some(2)]
            } else {
                vec![Some(2), Some(3), Some(0), Some(1)]
            };
            acc.rewarded_step(&chosen, &[2.0; 4]);
        }
        acc.finish_episode();
        let m = acc.metrics();
        assert_eq!(m.mean_team_length, 1.0);
        assert_eq!(m.agents_on_team, 4.0);
    }
}
