//! Training loop: rollout collection, GAE, and the clipped PPO update.
//!
//! One training iteration collects a buffer of BPTT chunks from vectorized
//! self-play (with a fraction of agents replaced by past policy snapshots),
//! normalizes advantages per batch, runs `sgd_steps_per_iteration` minibatch
//! updates covering the buffer `sample_reuse_epochs` times, and publishes
//! the resulting parameters into the past-policy pool.

pub mod gae;
pub mod normalizer;
pub mod pool;
pub mod ppo;
pub mod rollout;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, GameEnv};
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::policy::{EntityNet, HeadKind, DEFAULT_HIDDEN};
use crate::rusp::RuspConfig;
use crate::tensor::optim::OptimizerState;

pub use gae::compute_gae;
pub use normalizer::{NormalizerState, ObsNormalizer};
pub use pool::PastPolicyPool;
pub use rollout::{collect_rollouts, Chunk, CollectStats, RolloutBuffer};

/// Derives an independent ChaCha stream from a master seed and a path of
/// integers (iteration, slot, episode, ...). SplitMix64 whitening keeps
/// streams with nearby parts uncorrelated.
pub fn seed_stream(master: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut state = master ^ 0x9e3779b97f4a7c15;
    let mut mix = |v: u64| {
        state = state.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(v);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        state = z ^ (z >> 31);
        state
    };
    let mut seed = [0u8; 32];
    let mut word = mix(parts.len() as u64);
    for (i, chunk) in seed.chunks_mut(8).enumerate() {
        for &p in parts {
            word = mix(p.wrapping_add(i as u64));
        }
        word = mix(word);
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Gradient-eligible BPTT chunks collected per iteration.
    pub batch_size_chunks: usize,
    pub bptt_length: usize,
    pub entropy_coef: f32,
    pub learning_rate: f32,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_clip: f32,
    /// EMA decay for observation normalization.
    pub ema_beta: f64,
    pub sgd_steps_per_iteration: usize,
    pub sample_reuse_epochs: usize,
    /// Per-agent, per-episode probability of playing a past snapshot.
    pub past_sample_prob: f64,
    pub value_loss_coef: f32,
    pub grad_clip: f32,
    /// Environment slots stepped in lockstep during collection.
    pub n_parallel_envs: usize,
    /// Width of every dense/recurrent layer.
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size_chunks: 2048,
            bptt_length: 5,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            gamma: 0.998,
            gae_lambda: 0.95,
            ppo_clip: 0.2,
            ema_beta: 0.99999,
            sgd_steps_per_iteration: 60,
            sample_reuse_epochs: 5,
            past_sample_prob: 0.1,
            value_loss_coef: 0.5,
            grad_clip: 5.0,
            n_parallel_envs: 64,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_chunks == 0 || self.bptt_length == 0 {
            return Err(Error::config("batch size and BPTT length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.past_sample_prob) {
            return Err(Error::config("past_sample_prob must be in [0, 1]"));
        }
        if self.sample_reuse_epochs == 0
            || self.sgd_steps_per_iteration % self.sample_reuse_epochs != 0
        {
            return Err(Error::config(
                "sgd_steps_per_iteration must be a positive multiple of sample_reuse_epochs",
            ));
        }
        if self.learning_rate <= 0.0 || self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(Error::config("learning rate and discount must be positive (gamma <= 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct IterationStats {
    pub iteration: u64,
    pub collect: CollectStats,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub sgd_steps: usize,
    /// Iteration was abandoned because of non-finite numbers; parameters
    /// were rolled back.
    pub aborted: bool,
}

/// Owns everything that learns: both networks, their optimizer states, the
/// observation normalizer, and the past-policy pool.
pub struct Trainer {
    pub env_proto: GameEnv,
    pub rusp: RuspConfig,
    pub cfg: TrainConfig,
    pub policy: EntityNet,
    pub value: EntityNet,
    pub opt_policy: OptimizerState,
    pub opt_value: OptimizerState,
    pub normalizer: ObsNormalizer,
    pub pool: PastPolicyPool,
    pub iteration: u64,
    pub seed: u64,
    pub par: Parallelism,
}

impl Trainer {
    pub fn new(
        env_cfg: &EnvConfig,
        rusp: RuspConfig,
        cfg: TrainConfig,
        seed: u64,
        par: Parallelism,
    ) -> Result<Self> {
        cfg.validate()?;
        rusp.validate()?;
        let env_proto = env_cfg.build()?;
        let layout = env_proto.layout();
        let heads: Vec<HeadKind> = env_proto
            .head_specs()
            .iter()
            .map(|s| match s {
                crate::envs::HeadSpec::Categorical(k) => HeadKind::Categorical(*k),
                crate::envs::HeadSpec::Entity => HeadKind::Entity,
            })
            .collect();
        let mut rng_p = seed_stream(seed, &[0x696e6974, 0]);
        let mut rng_v = seed_stream(seed, &[0x696e6974, 1]);
        let policy = EntityNet::init(
            layout.policy_in_dim(),
            layout.n_entities,
            cfg.hidden,
            heads,
            &mut rng_p,
        );
        let value = EntityNet::init(
            layout.value_in_dim(),
            layout.n_entities,
            cfg.hidden,
            vec![HeadKind::Scalar],
            &mut rng_v,
        );
        let opt_policy = OptimizerState::new(&policy.params, cfg.learning_rate);
        let opt_value = OptimizerState::new(&value.params, cfg.learning_rate);
        let normalizer = ObsNormalizer::new(layout, cfg.ema_beta);
        let mut pool = PastPolicyPool::new();
        pool.publish(&policy);
        Ok(Trainer {
            env_proto,
            rusp,
            cfg,
            policy,
            value,
            opt_policy,
            opt_value,
            normalizer,
            pool,
            iteration: 0,
            seed,
            par,
        })
    }

    pub fn collect(&self) -> Result<(RolloutBuffer, CollectStats)> {
        collect_rollouts(
            &self.env_proto,
            &self.rusp,
            &self.policy,
            &self.value,
            &self.pool,
            &self.normalizer,
            &self.cfg,
            self.iteration,
            self.seed,
            self.par,
        )
    }

    /// One full iteration: collect, advantage-normalize, optimize, publish.
    pub fn train_iteration(&mut self) -> Result<IterationStats> {
        let (mut buffer, collect_stats) = self.collect()?;
        buffer.normalize_advantages();

        let backup = (
            self.policy.params.clone(),
            self.value.params.clone(),
            self.opt_policy.clone(),
            self.opt_value.clone(),
            self.normalizer.clone(),
        );

        let mut stats = IterationStats {
            iteration: self.iteration,
            collect: collect_stats,
            ..Default::default()
        };
        match self.optimize(&buffer, &mut stats) {
            Ok(()) => {}
            Err(Error::NumericalDivergence(msg)) => {
                // Abort the iteration but keep training: previous parameters
                // and optimizer state are restored.
                self.policy.params = backup.0;
                self.value.params = backup.1;
                self.opt_policy = backup.2;
                self.opt_value = backup.3;
                self.normalizer = backup.4;
                stats.aborted = true;
                let _ = msg;
            }
            Err(e) => return Err(e),
        }

        self.iteration += 1;
        self.pool.publish(&self.policy);
        Ok(stats)
    }

    fn optimize(&mut self, buffer: &RolloutBuffer, stats: &mut IterationStats) -> Result<()> {
        let layout = self.env_proto.layout();
        let eligible: Vec<usize> = buffer.eligible().map(|(i, _)| i).collect();
        if eligible.is_empty() {
            return Err(Error::config("no gradient-eligible chunks collected"));
        }
        let epochs = self.cfg.sample_reuse_epochs;
        let mb_per_epoch = self.cfg.sgd_steps_per_iteration / epochs;
        let mut rng = seed_stream(self.seed, &[0x6f7074, self.iteration]);

        let mut steps = 0usize;
        for _epoch in 0..epochs {
            let mut order = eligible.clone();
            order.shuffle(&mut rng);
            let per_mb = order.len().div_ceil(mb_per_epoch);
            for mb in order.chunks(per_mb) {
                let s = ppo::ppo_minibatch_step(
                    buffer,
                    mb,
                    &mut self.policy,
                    &mut self.value,
                    &mut self.opt_policy,
                    &mut self.opt_value,
                    &mut self.normalizer,
                    layout,
                    &self.cfg,
                    self.par,
                )?;
                stats.policy_loss += s.policy_loss;
                stats.value_loss += s.value_loss;
                stats.entropy += s.entropy;
                stats.clip_fraction += s.clip_fraction;
                stats.approx_kl += s.approx_kl;
                stats.grad_norm += s.grad_norm;
                steps += 1;
            }
        }
        if steps > 0 {
            let inv = 1.0 / steps as f64;
            stats.policy_loss *= inv;
            stats.value_loss *= inv;
            stats.entropy *= inv;
            stats.clip_fraction *= inv;
            stats.approx_kl *= inv;
            stats.grad_norm *= inv;
        }
        stats.sgd_steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_streams_differ_across_parts() {
        use rand::RngCore;
        let mut a = seed_stream(7, &[1, 2, 3]);
        let mut b = seed_stream(7, &[1, 2, 4]);
        assert_ne!(a.next_u64(), b.next_u64());
        // Same parts reproduce the same stream.
        let mut c = seed_stream(7, &[1, 2, 3]);
        let mut d = seed_stream(7, &[1, 2, 3]);
        assert_eq!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn config_validation_catches_bad_reuse_split() {
        let cfg = TrainConfig { sgd_steps_per_iteration: 61, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
    }
}
