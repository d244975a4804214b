//! End-to-end contracts of rollout collection and the PPO update.

use rusp_core::envs::EnvConfig;
use rusp_core::parallel::Parallelism;
use rusp_core::rusp::RuspConfig;
use rusp_core::trainer::rollout::recompute_behavior_logp;
use rusp_core::trainer::{TrainConfig, Trainer};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size_chunks: 64,
        n_parallel_envs: 8,
        sgd_steps_per_iteration: 10,
        sample_reuse_epochs: 5,
        hidden: 32,
        ..Default::default()
    }
}

#[test]
fn ipd_iteration_runs_and_publishes() {
    let mut trainer = Trainer::new(
        &EnvConfig::named("ipd"),
        RuspConfig::default(),
        small_cfg(),
        7,
        Parallelism::Sequential,
    )
    .unwrap();
    assert_eq!(trainer.pool.len(), 1);
    let stats = trainer.train_iteration().unwrap();
    assert!(!stats.aborted);
    assert_eq!(stats.sgd_steps, 10);
    assert!(stats.entropy > 0.0, "fresh policy should have entropy");
    assert_eq!(trainer.pool.len(), 2, "pool size is iterations + 1");
    let stats2 = trainer.train_iteration().unwrap();
    assert_eq!(stats2.iteration, 1);
    assert_eq!(trainer.pool.len(), 3);
}

#[test]
fn collection_with_no_past_play_is_fully_on_policy() {
    // past_sample_prob = 0: all agents use current parameters, and stored
    // behavior log-probs equal fresh recomputation before any update.
    let cfg = TrainConfig { past_sample_prob: 0.0, ..small_cfg() };
    let trainer = Trainer::new(
        &EnvConfig::named("ipd"),
        RuspConfig::default(),
        cfg,
        11,
        Parallelism::Sequential,
    )
    .unwrap();
    let (buffer, stats) = trainer.collect().unwrap();
    assert_eq!(stats.past_agent_episodes, 0);
    let layout = trainer.env_proto.layout();
    for (_, chunk) in buffer.eligible().take(50) {
        let fresh = recompute_behavior_logp(
            chunk,
            &trainer.policy,
            &trainer.normalizer,
            layout,
            Parallelism::Sequential,
        )
        .unwrap();
        let n_heads = buffer.n_heads;
        for t in 0..chunk.len {
            for hi in 0..n_heads {
                let stored = chunk.behavior_logp[t * n_heads + hi];
                let recomputed = fresh[t * n_heads + hi];
                assert!(
                    (stored - recomputed).abs() <= 1e-6,
                    "t={t} head={hi}: stored {stored} vs fresh {recomputed}"
                );
            }
        }
    }
}

#[test]
fn past_prob_one_with_singleton_pool_plays_current_params() {
    // The only snapshot is the init parameters, which equal the current
    // parameters before any update: behavior matches current-params play.
    let cfg = TrainConfig { past_sample_prob: 1.0, ..small_cfg() };
    let trainer = Trainer::new(
        &EnvConfig::named("ipd"),
        RuspConfig::default(),
        cfg,
        13,
        Parallelism::Sequential,
    )
    .unwrap();
    let (buffer, stats) = trainer.collect().unwrap();
    assert_eq!(stats.past_agent_episodes, stats.agent_episodes);
    // Every chunk is flagged and excluded from updates.
    assert_eq!(buffer.eligible_count(), 0);
    assert!(!buffer.chunks.is_empty());
    // Stored behavior still matches the current parameters bit-for-bit
    // because snapshot 0 is the same parameters.
    let layout = trainer.env_proto.layout();
    for chunk in buffer.chunks.iter().take(20) {
        let fresh = recompute_behavior_logp(
            chunk,
            &trainer.policy,
            &trainer.normalizer,
            layout,
            Parallelism::Sequential,
        )
        .unwrap();
        for (a, b) in chunk.behavior_logp[..chunk.len * buffer.n_heads].iter().zip(&fresh) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn empirical_replacement_rate_matches_probability() {
    let cfg = TrainConfig {
        batch_size_chunks: 4096,
        n_parallel_envs: 64,
        hidden: 16,
        ..small_cfg()
    };
    let trainer = Trainer::new(
        &EnvConfig::named("ipd"),
        RuspConfig::default(),
        cfg,
        17,
        Parallelism::Sequential,
    )
    .unwrap();
    let (_, stats) = trainer.collect().unwrap();
    assert!(stats.agent_episodes >= 2000, "want enough episodes, got {}", stats.agent_episodes);
    let rate = stats.past_replace_rate();
    assert!((rate - 0.1).abs() <= 0.01, "replacement rate {rate}");
}

#[test]
fn identity_preferences_store_raw_rewards_bit_exactly() {
    // Evaluation-mode preferences: stored transformed rewards equal raw
    // environment rewards exactly.
    let trainer = Trainer::new(
        &EnvConfig::named("ipd"),
        RuspConfig::evaluation(),
        small_cfg(),
        19,
        Parallelism::Sequential,
    )
    .unwrap();
    let (buffer, _) = trainer.collect().unwrap();
    for chunk in &buffer.chunks {
        for t in 0..chunk.len {
            assert_eq!(chunk.raw_rewards[t].to_bits(), chunk.transformed_rewards[t].to_bits());
        }
    }
}

#[test]
fn advantages_are_batch_normalized() {
    let trainer = Trainer::new(
        &EnvConfig::named("ipd"),
        RuspConfig::default(),
        small_cfg(),
        23,
        Parallelism::Sequential,
    )
    .unwrap();
    let (mut buffer, _) = trainer.collect().unwrap();
    buffer.normalize_advantages();
    let mut vals = Vec::new();
    for (_, c) in buffer.eligible() {
        vals.extend(c.advantages[..c.len].iter().map(|&a| a as f64));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    assert!(mean.abs() < 1e-4, "mean {mean}");
    assert!((var.sqrt() - 1.0).abs() < 1e-3, "std {}", var.sqrt());
}

#[test]
fn single_threaded_collection_is_deterministic() {
    let run = || {
        let trainer = Trainer::new(
            &EnvConfig::named("ipd"),
            RuspConfig::default(),
            small_cfg(),
            29,
            Parallelism::Sequential,
        )
        .unwrap();
        let (buffer, _) = trainer.collect().unwrap();
        buffer
            .chunks
            .iter()
            .flat_map(|c| c.behavior_logp.iter().map(|v| v.to_bits()))
            .collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}
