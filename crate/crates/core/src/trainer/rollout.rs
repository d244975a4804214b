//! Vectorized rollout collection with past-policy sampling.
//!
//! A fixed number of environment slots run episodes in lockstep. Each engine
//! step batches every agent that acts under the same policy version into one
//! forward pass, so the heavy math is always a handful of large GEMMs rather
//! than thousands of single-row calls. Action sampling consumes each slot's
//! own generator in slot order, which keeps collection deterministic no
//! matter how agents were grouped or how many threads split the GEMMs.
//!
//! Per episode, every agent is independently replaced by a uniformly
//! sampled past policy snapshot with probability `past_sample_prob`. A new
//! social-preference context is drawn per episode; environments emit raw
//! rewards and the transformed rewards (`T * r`) are what GAE sees.
//! Trajectories are cut into fixed-length BPTT chunks with the recurrent
//! states captured at each chunk boundary.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{AgentObs, GameEnv, ObsLayout};
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::policy::{
    head_activity, head_arity, select_actions, ActMode, EntityNet, RecurrentState,
};
use crate::rusp::{transform_rewards, RuspConfig, SocialContext};
use crate::tensor::ops;

use super::gae::compute_gae;
use super::normalizer::ObsNormalizer;
use super::pool::PastPolicyPool;
use super::seed_stream;
use super::TrainConfig;

/// One fixed-length BPTT segment of a single agent's trajectory.
#[derive(Debug, Clone)]
pub struct Chunk {
    /// Transitions came from a past-policy agent: excluded from updates.
    pub past_policy: bool,
    /// Valid steps (the rest of the arrays are zero padding).
    pub len: usize,
    /// `[bptt, self_dim]`, raw (unnormalized) features.
    pub obs_self: Vec<f32>,
    /// `[bptt, n_entities * entity_dim]`.
    pub obs_entity: Vec<f32>,
    /// `[bptt, value_self_dim]`.
    pub obs_value_self: Vec<f32>,
    /// `[bptt, n_entities * value_entity_dim]`.
    pub obs_value_entity: Vec<f32>,
    /// `[bptt, n_heads]`.
    pub actions: Vec<u16>,
    /// `[bptt, n_heads]` behavior log-probabilities at collection time.
    pub behavior_logp: Vec<f32>,
    /// `[bptt, n_heads]` gradient mask: heads that count toward the loss.
    pub head_active: Vec<bool>,
    /// `[bptt]` raw environment rewards for this agent.
    pub raw_rewards: Vec<f32>,
    /// `[bptt]` transformed rewards (what the agent optimizes).
    pub transformed_rewards: Vec<f32>,
    /// `[bptt]` value estimates at collection time.
    pub values: Vec<f32>,
    /// `[bptt]` GAE advantages (normalized per batch after collection).
    pub advantages: Vec<f32>,
    /// `[bptt]` value regression targets.
    pub value_targets: Vec<f32>,
    /// `[bptt]` 1.0 for valid steps, 0.0 for padding.
    pub valid: Vec<f32>,
    /// Recurrent states at the chunk boundary.
    pub policy_h0: Vec<f32>,
    pub policy_c0: Vec<f32>,
    pub value_h0: Vec<f32>,
    pub value_c0: Vec<f32>,
}

#[derive(Debug, Default)]
pub struct RolloutBuffer {
    pub chunks: Vec<Chunk>,
    pub bptt: usize,
    pub n_heads: usize,
}

impl RolloutBuffer {
    pub fn eligible(&self) -> impl Iterator<Item = (usize, &Chunk)> {
        self.chunks.iter().enumerate().filter(|(_, c)| !c.past_policy)
    }

    pub fn eligible_count(&self) -> usize {
        self.chunks.iter().filter(|c| !c.past_policy).count()
    }

    /// Normalizes advantages to zero mean, unit variance over every valid
    /// step of every gradient-eligible chunk.
    pub fn normalize_advantages(&mut self) {
        let mut sum = 0.0f64;
        let mut count = 0.0f64;
        for c in self.chunks.iter().filter(|c| !c.past_policy) {
            for t in 0..c.len {
                sum += c.advantages[t] as f64;
                count += 1.0;
            }
        }
        if count < 2.0 {
            return;
        }
        let mean = sum / count;
        let mut var = 0.0f64;
        for c in self.chunks.iter().filter(|c| !c.past_policy) {
            for t in 0..c.len {
                let d = c.advantages[t] as f64 - mean;
                var += d * d;
            }
        }
        let std = (var / count).sqrt().max(1e-8);
        for c in self.chunks.iter_mut().filter(|c| !c.past_policy) {
            for t in 0..c.len {
                c.advantages[t] = ((c.advantages[t] as f64 - mean) / std) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CollectStats {
    pub episodes: usize,
    pub agent_episodes: usize,
    pub past_agent_episodes: usize,
    pub env_steps: usize,
    pub mean_raw_reward: f64,
    pub mean_transformed_reward: f64,
    pub mean_episode_len: f64,
}

impl CollectStats {
    pub fn past_replace_rate(&self) -> f64 {
        if self.agent_episodes == 0 {
            0.0
        } else {
            self.past_agent_episodes as f64 / self.agent_episodes as f64
        }
    }
}

#[derive(Clone)]
enum Assignment {
    Current,
    Past(u64, Arc<EntityNet>),
}

impl Assignment {
    fn key(&self) -> u64 {
        match self {
            Assignment::Current => u64::MAX,
            Assignment::Past(v, _) => *v,
        }
    }

    fn is_past(&self) -> bool {
        matches!(self, Assignment::Past(..))
    }
}

struct AgentTrack {
    assignment: Assignment,
    policy_state: RecurrentState,
    value_state: RecurrentState,
    obs: Vec<AgentObs>,
    actions: Vec<Vec<u16>>,
    logps: Vec<Vec<f32>>,
    head_active: Vec<Vec<bool>>,
    values: Vec<f32>,
    raw: Vec<f32>,
    transformed: Vec<f32>,
    boundary_states: Vec<[Vec<f32>; 4]>,
}

impl AgentTrack {
    fn new(hidden: usize, assignment: Assignment) -> Self {
        AgentTrack {
            assignment,
            policy_state: RecurrentState::zeros(hidden),
            value_state: RecurrentState::zeros(hidden),
            obs: Vec::new(),
            actions: Vec::new(),
            logps: Vec::new(),
            head_active: Vec::new(),
            values: Vec::new(),
            raw: Vec::new(),
            transformed: Vec::new(),
            boundary_states: Vec::new(),
        }
    }
}

struct Slot {
    env: GameEnv,
    rng: ChaCha8Rng,
    episode_index: u64,
    tracks: Vec<AgentTrack>,
    pending_obs: Vec<AgentObs>,
    active: bool,
}

/// Normalized policy-input rows (`n_entities` per agent) for one observation.
fn policy_rows(obs: &AgentObs, layout: ObsLayout, norm: &ObsNormalizer, out: &mut Vec<f32>) {
    let mut self_n = obs.self_feats.clone();
    norm.self_block.normalize_rows(&mut self_n, layout.self_dim);
    let mut ent_n = obs.entity_feats.clone();
    norm.entity_block.normalize_rows(&mut ent_n, layout.entity_dim);
    for e in 0..layout.n_entities {
        out.extend_from_slice(&self_n);
        out.extend_from_slice(&ent_n[e * layout.entity_dim..(e + 1) * layout.entity_dim]);
    }
}

/// Normalized value-input rows: policy features plus omniscient extras.
fn value_rows(obs: &AgentObs, layout: ObsLayout, norm: &ObsNormalizer, out: &mut Vec<f32>) {
    let mut self_n = obs.self_feats.clone();
    norm.self_block.normalize_rows(&mut self_n, layout.self_dim);
    let mut ent_n = obs.entity_feats.clone();
    norm.entity_block.normalize_rows(&mut ent_n, layout.entity_dim);
    let mut vself_n = obs.value_self_extra.clone();
    norm.value_self_block.normalize_rows(&mut vself_n, layout.value_self_dim);
    let mut vent_n = obs.value_entity_extra.clone();
    norm.value_entity_block.normalize_rows(&mut vent_n, layout.value_entity_dim);
    for e in 0..layout.n_entities {
        out.extend_from_slice(&self_n);
        out.extend_from_slice(&vself_n);
        out.extend_from_slice(&ent_n[e * layout.entity_dim..(e + 1) * layout.entity_dim]);
        out.extend_from_slice(&vent_n[e * layout.value_entity_dim..(e + 1) * layout.value_entity_dim]);
    }
}

/// Collects at least `batch_size_chunks` gradient-eligible chunks.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    env_proto: &GameEnv,
    rusp_cfg: &RuspConfig,
    policy: &EntityNet,
    value: &EntityNet,
    pool: &PastPolicyPool,
    normalizer: &ObsNormalizer,
    cfg: &TrainConfig,
    iteration: u64,
    seed: u64,
    par: Parallelism,
) -> Result<(RolloutBuffer, CollectStats)> {
    if pool.is_empty() {
        return Err(Error::config("past-policy pool must contain the current snapshot"));
    }
    let layout = env_proto.layout();
    let heads = env_proto.head_specs();
    let n_heads = heads.len();
    let n_agents = env_proto.spec().n_agents;
    let hidden = policy.hidden;
    let bptt = cfg.bptt_length;

    let mut buffer = RolloutBuffer { chunks: Vec::new(), bptt, n_heads };
    let mut stats = CollectStats::default();

    let mut slots: Vec<Slot> = (0..cfg.n_parallel_envs)
        .map(|slot_idx| {
            let mut slot = Slot {
                env: env_proto.clone(),
                rng: ChaCha8Rng::seed_from_u64(0),
                episode_index: 0,
                tracks: Vec::new(),
                pending_obs: Vec::new(),
                active: true,
            };
            reset_slot(&mut slot, slot_idx, iteration, seed, rusp_cfg, pool, cfg, hidden);
            slot
        })
        .collect();

    while slots.iter().any(|s| s.active) {
        // Group acting agents by policy version.
        let mut groups: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
        for (si, slot) in slots.iter().enumerate() {
            if !slot.active {
                continue;
            }
            for ai in 0..n_agents {
                groups.entry(slot.tracks[ai].assignment.key()).or_default().push((si, ai));
            }
        }

        // Snapshot recurrent states at chunk boundaries before stepping.
        for slot in slots.iter_mut().filter(|s| s.active) {
            for track in slot.tracks.iter_mut() {
                if track.obs.len() % bptt == 0 {
                    track.boundary_states.push([
                        track.policy_state.h.clone(),
                        track.policy_state.c.clone(),
                        track.value_state.h.clone(),
                        track.value_state.c.clone(),
                    ]);
                }
            }
        }

        // Policy forwards per version group.
        let mut logits_store: BTreeMap<(usize, usize), Vec<Vec<f32>>> = BTreeMap::new();
        for (key, members) in &groups {
            let net_arc;
            let net: &EntityNet = if *key == u64::MAX {
                policy
            } else {
                net_arc = match &slots[members[0].0].tracks[members[0].1].assignment {
                    Assignment::Past(_, n) => Arc::clone(n),
                    Assignment::Current => unreachable!("group key says past"),
                };
                &net_arc
            };
            let g = members.len();
            let mut x = Vec::with_capacity(g * layout.n_entities * layout.policy_in_dim());
            let mut h = Vec::with_capacity(g * hidden);
            let mut c = Vec::with_capacity(g * hidden);
            for &(si, ai) in members {
                policy_rows(&slots[si].pending_obs[ai], layout, normalizer, &mut x);
                h.extend_from_slice(&slots[si].tracks[ai].policy_state.h);
                c.extend_from_slice(&slots[si].tracks[ai].policy_state.c);
            }
            let out = crate::policy::forward(net, par, &x, &h, &c, g)?;
            for (m, &(si, ai)) in members.iter().enumerate() {
                let mut per_head = Vec::with_capacity(n_heads);
                for (hi, head) in net.heads.iter().enumerate() {
                    let k = head_arity(*head, layout.n_entities);
                    per_head
                        .push(out.head_outputs[hi][m * k..(m + 1) * k].to_vec());
                }
                logits_store.insert((si, ai), per_head);
                let track = &mut slots[si].tracks[ai];
                track.policy_state.h.copy_from_slice(&out.h_next[m * hidden..(m + 1) * hidden]);
                track.policy_state.c.copy_from_slice(&out.c_next[m * hidden..(m + 1) * hidden]);
            }
        }

        // Value forward for gradient-eligible (current-policy) agents.
        let current: Vec<(usize, usize)> =
            groups.get(&u64::MAX).cloned().unwrap_or_default();
        if !current.is_empty() {
            let g = current.len();
            let mut x = Vec::with_capacity(g * layout.n_entities * layout.value_in_dim());
            let mut h = Vec::with_capacity(g * hidden);
            let mut c = Vec::with_capacity(g * hidden);
            for &(si, ai) in &current {
                value_rows(&slots[si].pending_obs[ai], layout, normalizer, &mut x);
                h.extend_from_slice(&slots[si].tracks[ai].value_state.h);
                c.extend_from_slice(&slots[si].tracks[ai].value_state.c);
            }
            let out = crate::policy::forward(value, par, &x, &h, &c, g)?;
            for (m, &(si, ai)) in current.iter().enumerate() {
                let track = &mut slots[si].tracks[ai];
                track.values.push(out.head_outputs[0][m]);
                track.value_state.h.copy_from_slice(&out.h_next[m * hidden..(m + 1) * hidden]);
                track.value_state.c.copy_from_slice(&out.c_next[m * hidden..(m + 1) * hidden]);
            }
        }

        // Sample actions slot by slot and advance every active environment.
        // All snapshots share the architecture, so head kinds come from the
        // current policy.
        let mut finished: Vec<usize> = Vec::new();
        for (si, slot) in slots.iter_mut().enumerate() {
            if !slot.active {
                continue;
            }
            let mut slot_actions: Vec<Vec<usize>> = Vec::with_capacity(n_agents);
            for ai in 0..n_agents {
                let logits = logits_store.remove(&(si, ai)).expect("forward ran for agent");
                let (acts, logps) = select_actions(
                    &policy.heads,
                    layout.n_entities,
                    &logits,
                    0,
                    None,
                    ActMode::Sample,
                    &mut slot.rng,
                )?;
                let active_flags = head_activity(&policy.heads, &acts);
                let obs = slot.pending_obs[ai].clone();
                let track = &mut slot.tracks[ai];
                track.obs.push(obs);
                track.actions.push(acts.iter().map(|&a| a as u16).collect());
                track.logps.push(logps);
                track.head_active.push(active_flags);
                slot_actions.push(acts);
            }
            let (next_obs, step) = slot.env.step(&slot_actions, &mut slot.rng);
            let transformed = transform_rewards(&slot.env.context().prefs, &step.raw_rewards);
            for ai in 0..n_agents {
                slot.tracks[ai].raw.push(step.raw_rewards[ai]);
                slot.tracks[ai].transformed.push(transformed[ai]);
            }
            slot.pending_obs = next_obs;
            stats.env_steps += 1;
            if step.done {
                finished.push(si);
            }
        }

        // Finalize finished episodes; reset or retire their slots.
        for si in finished {
            let quota_met = buffer.eligible_count() >= cfg.batch_size_chunks;
            let slot = &mut slots[si];
            finalize_episode(slot, &mut buffer, &mut stats, cfg, n_heads, layout);
            if quota_met || buffer.eligible_count() >= cfg.batch_size_chunks {
                slot.active = false;
            } else {
                let idx = si;
                reset_slot(slot, idx, iteration, seed, rusp_cfg, pool, cfg, hidden);
            }
        }
    }

    if stats.env_steps > 0 {
        let agent_steps = (stats.env_steps * n_agents) as f64;
        stats.mean_raw_reward /= agent_steps;
        stats.mean_transformed_reward /= agent_steps;
    }
    if stats.episodes > 0 {
        stats.mean_episode_len = stats.env_steps as f64 / stats.episodes as f64;
    }
    Ok((buffer, stats))
}

#[allow(clippy::too_many_arguments)]
fn reset_slot(
    slot: &mut Slot,
    slot_idx: usize,
    iteration: u64,
    seed: u64,
    rusp_cfg: &RuspConfig,
    pool: &PastPolicyPool,
    cfg: &TrainConfig,
    hidden: usize,
) {
    slot.episode_index += 1;
    slot.rng = seed_stream(seed, &[0x726f6c6c, iteration, slot_idx as u64, slot.episode_index]);
    let n = slot.env.spec().n_agents;
    let ctx = SocialContext::sample(n, rusp_cfg, &mut slot.rng);
    slot.pending_obs = slot.env.reset(ctx, &mut slot.rng);
    slot.tracks = (0..n)
        .map(|_| {
            let assignment = if slot.rng.gen_bool(cfg.past_sample_prob) {
                let (v, net) = pool.sample(&mut slot.rng);
                Assignment::Past(v, net)
            } else {
                Assignment::Current
            };
            AgentTrack::new(hidden, assignment)
        })
        .collect();
    slot.active = true;
}

fn finalize_episode(
    slot: &mut Slot,
    buffer: &mut RolloutBuffer,
    stats: &mut CollectStats,
    cfg: &TrainConfig,
    n_heads: usize,
    layout: ObsLayout,
) {
    stats.episodes += 1;
    for track in slot.tracks.drain(..) {
        stats.agent_episodes += 1;
        let past = track.assignment.is_past();
        if past {
            stats.past_agent_episodes += 1;
        }
        stats.mean_raw_reward += track.raw.iter().map(|&r| r as f64).sum::<f64>();
        stats.mean_transformed_reward +=
            track.transformed.iter().map(|&r| r as f64).sum::<f64>();

        let t_max = track.obs.len();
        let (adv, targets) = if past {
            (vec![0.0; t_max], vec![0.0; t_max])
        } else {
            compute_gae(&track.transformed, &track.values, cfg.gamma, cfg.gae_lambda)
        };

        let bptt = cfg.bptt_length;
        for (chunk_idx, start) in (0..t_max).step_by(bptt).enumerate() {
            let len = bptt.min(t_max - start);
            let mut chunk = Chunk {
                past_policy: past,
                len,
                obs_self: vec![0.0; bptt * layout.self_dim],
                obs_entity: vec![0.0; bptt * layout.n_entities * layout.entity_dim],
                obs_value_self: vec![0.0; bptt * layout.value_self_dim],
                obs_value_entity: vec![0.0; bptt * layout.n_entities * layout.value_entity_dim],
                actions: vec![0; bptt * n_heads],
                behavior_logp: vec![0.0; bptt * n_heads],
                head_active: vec![false; bptt * n_heads],
                raw_rewards: vec![0.0; bptt],
                transformed_rewards: vec![0.0; bptt],
                values: vec![0.0; bptt],
                advantages: vec![0.0; bptt],
                value_targets: vec![0.0; bptt],
                valid: vec![0.0; bptt],
                policy_h0: track.boundary_states[chunk_idx][0].clone(),
                policy_c0: track.boundary_states[chunk_idx][1].clone(),
                value_h0: track.boundary_states[chunk_idx][2].clone(),
                value_c0: track.boundary_states[chunk_idx][3].clone(),
            };
            for t in 0..len {
                let src = start + t;
                let obs = &track.obs[src];
                chunk.obs_self[t * layout.self_dim..(t + 1) * layout.self_dim]
                    .copy_from_slice(&obs.self_feats);
                let ew = layout.n_entities * layout.entity_dim;
                chunk.obs_entity[t * ew..(t + 1) * ew].copy_from_slice(&obs.entity_feats);
                chunk.obs_value_self
                    [t * layout.value_self_dim..(t + 1) * layout.value_self_dim]
                    .copy_from_slice(&obs.value_self_extra);
                let vw = layout.n_entities * layout.value_entity_dim;
                chunk.obs_value_entity[t * vw..(t + 1) * vw]
                    .copy_from_slice(&obs.value_entity_extra);
                for hi in 0..n_heads {
                    chunk.actions[t * n_heads + hi] = track.actions[src][hi];
                    chunk.behavior_logp[t * n_heads + hi] = track.logps[src][hi];
                    chunk.head_active[t * n_heads + hi] = track.head_active[src][hi];
                }
                chunk.raw_rewards[t] = track.raw[src];
                chunk.transformed_rewards[t] = track.transformed[src];
                if !past {
                    chunk.values[t] = track.values[src];
                }
                chunk.advantages[t] = adv[src];
                chunk.value_targets[t] = targets[src];
                chunk.valid[t] = 1.0;
            }
            buffer.chunks.push(chunk);
        }
    }
}

/// Recomputes behavior log-probabilities for a chunk under the given
/// networks and normalizer. Test and diagnostics helper for the on-policy
/// contract: fresh recomputation must match stored values.
pub fn recompute_behavior_logp(
    chunk: &Chunk,
    policy: &EntityNet,
    normalizer: &ObsNormalizer,
    layout: ObsLayout,
    par: Parallelism,
) -> Result<Vec<f32>> {
    let mut h = chunk.policy_h0.clone();
    let mut c = chunk.policy_c0.clone();
    let n_heads = policy.heads.len();
    let mut out = Vec::with_capacity(chunk.len * n_heads);
    for t in 0..chunk.len {
        let obs = AgentObs {
            self_feats: chunk.obs_self[t * layout.self_dim..(t + 1) * layout.self_dim].to_vec(),
            entity_feats: chunk.obs_entity[t * layout.n_entities * layout.entity_dim
                ..(t + 1) * layout.n_entities * layout.entity_dim]
                .to_vec(),
            value_self_extra: vec![],
            value_entity_extra: vec![],
        };
        let mut x = Vec::new();
        policy_rows(&obs, layout, normalizer, &mut x);
        let fwd = crate::policy::forward(policy, par, &x, &h, &c, 1)?;
        h = fwd.h_next;
        c = fwd.c_next;
        for (hi, head) in policy.heads.iter().enumerate() {
            let k = head_arity(*head, layout.n_entities);
            let logits = &fwd.head_outputs[hi][0..k];
            let mut probs = vec![0.0; k];
            ops::masked_softmax_row(logits, None, &mut probs);
            let a = chunk.actions[t * n_heads + hi] as usize;
            out.push(probs[a].max(f32::MIN_POSITIVE).ln());
        }
    }
    Ok(out)
}
