//! Experiment runner: configuration, seeding, checkpointing, metrics,
//! sweeps, and plot emission.
//!
//! A run directory holds one seed's training output:
//!
//! ```text
//! <out_dir>/seed_<seed>/
//!   config.toml        copy of the effective configuration
//!   metrics.jsonl      one record per iteration
//!   eval_reports.jsonl standalone evaluation results
//!   ckpt_XXXXXX.rckpt  periodic full checkpoints (+ ckpt_latest.rckpt)
//!   pool/vXXXXXX.rckpt policy-only snapshot per published version
//! ```
//!
//! The policy pool is persisted as the pool directory itself; resuming
//! reconstructs past-policy sampling from those files.

pub mod checkpoint;
pub mod metrics;
pub mod plots;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::{
    classify_reciprocal, eval_holdout, eval_prior_rapport, selfplay_defects, team_metrics,
    EvalAgent, EvalOptions, EvalReport, FixedStrategy, NetRef,
};
use crate::parallel::Parallelism;
use crate::policy::{ActMode, EntityNet};
use crate::rusp::RuspConfig;
use crate::trainer::{ObsNormalizer, TrainConfig, Trainer};

use checkpoint::{read_checkpoint, write_checkpoint, CheckpointData};
use metrics::MetricsRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    AtOrBelow,
    AtOrAbove,
}

/// Optional early termination on a scheduled-evaluation metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStop {
    pub metric: String,
    pub threshold: f64,
    pub rule: StopRule,
    /// Consecutive scheduled evaluations that must satisfy the rule.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub iterations: u64,
    pub out_dir: PathBuf,
    /// Scheduled evaluation cadence (0 disables scheduled evaluation).
    pub eval_every: u64,
    /// Episodes per scheduled-evaluation protocol.
    pub eval_episodes: usize,
    /// Full-checkpoint cadence (policy pool snapshots are written every
    /// iteration regardless).
    pub checkpoint_every: u64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0],
            iterations: 100,
            out_dir: PathBuf::from("runs/experiment"),
            eval_every: 25,
            eval_episodes: 300,
            checkpoint_every: 100,
            early_stop: None,
        }
    }
}

/// Everything a reproducible experiment needs, as written in the TOML
/// config file. Sections mirror the module names: `[run]`, `[env]`,
/// `[rusp]`, `[train]`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub env: EnvConfig,
    pub rusp: RuspConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.rusp.validate()?;
        self.env.build()?.spec().validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::config("at least one seed required"));
        }
        Ok(())
    }

    /// Applies `RUSP_OUT_DIR` when set.
    pub fn apply_env_overrides(&mut self) {
        if let Ok(dir) = std::env::var("RUSP_OUT_DIR") {
            if !dir.is_empty() {
                self.run.out_dir = PathBuf::from(dir);
            }
        }
    }

    /// Hash of the semantic configuration. The output directory is
    /// excluded so identical experiments hash identically no matter where
    /// they write.
    pub fn config_hash(&self) -> String {
        let mut hashable = self.clone();
        hashable.run.out_dir = PathBuf::new();
        let json = serde_json::to_string(&hashable).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run.out_dir.join(format!("seed_{seed}"))
    }
}

// ---------------------------------------------------------------------------
// Checkpoint <-> trainer state

fn tensor_arrays(prefix: &str, params: &crate::tensor::ParamSet, data: &mut CheckpointData) {
    for (name, t) in params.iter() {
        data.push(format!("{prefix}/{name}"), t.shape().to_vec(), t.data().to_vec());
    }
}

fn restore_tensor_arrays(
    prefix: &str,
    params: &mut crate::tensor::ParamSet,
    data: &CheckpointData,
) -> Result<()> {
    for i in 0..params.len() {
        let (name, tensor) = params.at_mut(i);
        let (shape, values) = data.require(&format!("{prefix}/{name}"))?;
        if shape != tensor.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for {prefix}/{name}")));
        }
        tensor.data_mut().copy_from_slice(values);
    }
    Ok(())
}

fn norm_block_arrays(
    prefix: &str,
    block: &crate::trainer::NormalizerState,
    data: &mut CheckpointData,
) {
    data.push_f64s(format!("{prefix}/mean"), &block.mean);
    data.push_f64s(format!("{prefix}/mean_sq"), &block.mean_sq);
    data.push_u64(format!("{prefix}/updates"), block.updates);
    data.push_f64s(format!("{prefix}/beta"), &[block.beta]);
}

fn restore_norm_block(
    prefix: &str,
    block: &mut crate::trainer::NormalizerState,
    data: &CheckpointData,
) -> Result<()> {
    block.mean = data.get_f64s(&format!("{prefix}/mean"))?;
    block.mean_sq = data.get_f64s(&format!("{prefix}/mean_sq"))?;
    block.updates = data.get_u64(&format!("{prefix}/updates"))?;
    block.beta = data.get_f64s(&format!("{prefix}/beta"))?[0];
    Ok(())
}

fn adam_arrays(
    prefix: &str,
    opt: &crate::tensor::optim::OptimizerState,
    params: &crate::tensor::ParamSet,
    data: &mut CheckpointData,
) {
    data.push_u64(format!("{prefix}/step"), opt.step);
    for (idx, (name, t)) in params.iter().enumerate() {
        data.push(format!("{prefix}/m/{name}"), t.shape().to_vec(), opt.first_moment[idx].clone());
        data.push(format!("{prefix}/v/{name}"), t.shape().to_vec(), opt.second_moment[idx].clone());
    }
}

fn restore_adam(
    prefix: &str,
    opt: &mut crate::tensor::optim::OptimizerState,
    params: &crate::tensor::ParamSet,
    data: &CheckpointData,
) -> Result<()> {
    opt.step = data.get_u64(&format!("{prefix}/step"))?;
    for (idx, (name, _)) in params.iter().enumerate() {
        let (_, m) = data.require(&format!("{prefix}/m/{name}"))?;
        let (_, v) = data.require(&format!("{prefix}/v/{name}"))?;
        opt.first_moment[idx].copy_from_slice(m);
        opt.second_moment[idx].copy_from_slice(v);
    }
    Ok(())
}

/// Full trainer state as checkpoint arrays.
pub fn trainer_to_checkpoint(trainer: &Trainer) -> CheckpointData {
    let mut data = CheckpointData::new(trainer.iteration);
    tensor_arrays("policy", &trainer.policy.params, &mut data);
    tensor_arrays("value", &trainer.value.params, &mut data);
    adam_arrays("adam/policy", &trainer.opt_policy, &trainer.policy.params, &mut data);
    adam_arrays("adam/value", &trainer.opt_value, &trainer.value.params, &mut data);
    norm_block_arrays("norm/self", &trainer.normalizer.self_block, &mut data);
    norm_block_arrays("norm/entity", &trainer.normalizer.entity_block, &mut data);
    norm_block_arrays("norm/value_self", &trainer.normalizer.value_self_block, &mut data);
    norm_block_arrays("norm/value_entity", &trainer.normalizer.value_entity_block, &mut data);
    data
}

/// Restores a full checkpoint into a freshly constructed trainer.
pub fn restore_trainer(trainer: &mut Trainer, data: &CheckpointData) -> Result<()> {
    restore_tensor_arrays("policy", &mut trainer.policy.params, data)?;
    restore_tensor_arrays("value", &mut trainer.value.params, data)?;
    restore_adam("adam/policy", &mut trainer.opt_policy, &trainer.policy.params, data)?;
    restore_adam("adam/value", &mut trainer.opt_value, &trainer.value.params, data)?;
    restore_norm_block("norm/self", &mut trainer.normalizer.self_block, data)?;
    restore_norm_block("norm/entity", &mut trainer.normalizer.entity_block, data)?;
    restore_norm_block("norm/value_self", &mut trainer.normalizer.value_self_block, data)?;
    restore_norm_block("norm/value_entity", &mut trainer.normalizer.value_entity_block, data)?;
    trainer.iteration = data.version;
    Ok(())
}

/// Policy-only snapshot for the past-policy pool.
pub fn policy_to_checkpoint(net: &EntityNet, version: u64) -> CheckpointData {
    let mut data = CheckpointData::new(version);
    tensor_arrays("policy", &net.params, &mut data);
    data
}

fn restore_policy_like(template: &EntityNet, data: &CheckpointData) -> Result<EntityNet> {
    let mut net = template.clone();
    restore_tensor_arrays("policy", &mut net.params, data)?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// Scheduled evaluation

/// Runs the environment's evaluation protocols against the current policy.
pub fn scheduled_eval(
    env_cfg: &EnvConfig,
    policy: &EntityNet,
    normalizer: &ObsNormalizer,
    episodes: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<EvalReport>> {
    let net = NetRef { net: policy, normalizer };
    let nets = [net];
    let opts = EvalOptions { episodes, seed, mode: ActMode::Sample, par, max_wave: 256 };
    let mut reports = Vec::new();
    match env_cfg.name.as_str() {
        "ipd" => {
            let defects =
                selfplay_defects([EvalAgent::Net(0), EvalAgent::Net(0)], &nets, 10, &opts)?;
            reports.push(EvalReport {
                protocol: "selfplay".into(),
                episodes,
                selfplay_defects: Some(defects),
                ..Default::default()
            });
            let rec = classify_reciprocal(EvalAgent::Net(0), &nets, &opts)?;
            reports.push(EvalReport {
                protocol: "reciprocity".into(),
                episodes,
                defects_vs_alldefect: Some(rec.defects_vs_alldefect),
                defects_vs_allcooperate: Some(rec.defects_vs_allcooperate),
                reciprocity_margin: Some(rec.margin),
                reciprocal: Some(rec.reciprocal),
                ..Default::default()
            });
        }
        "indirect" => {
            let vs_d = eval_holdout(
                EvalAgent::Net(0),
                FixedStrategy::AllDefect,
                EvalAgent::Net(0),
                &nets,
                20,
                &opts,
            )?;
            let vs_c = eval_holdout(
                EvalAgent::Net(0),
                FixedStrategy::AllCooperate,
                EvalAgent::Net(0),
                &nets,
                20,
                &opts,
            )?;
            let rapport =
                eval_prior_rapport(EvalAgent::Net(0), EvalAgent::Net(0), &nets, (6, 6, 8), &opts)?;
            reports.push(EvalReport {
                protocol: "holdout".into(),
                episodes,
                holdout_defect_vs_alldefect: Some(vs_d),
                holdout_defect_vs_allcooperate: Some(vs_c),
                rapport_differential: Some(rapport),
                ..Default::default()
            });
        }
        "buddy" => {
            let tm = team_metrics(net, env_cfg, 50, &opts)?;
            reports.push(EvalReport {
                protocol: "team".into(),
                episodes,
                team_mean_reward: Some(tm.mean_reward),
                team_agents_on_team: Some(tm.agents_on_team),
                team_mean_length: Some(tm.mean_team_length),
                ..Default::default()
            });
        }
        other => return Err(Error::config(format!("no evaluation protocols for '{other}'"))),
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Training runs

fn ckpt_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.rckpt"))
}

fn pool_path(dir: &Path, version: u64) -> PathBuf {
    dir.join("pool").join(format!("v{version:06}.rckpt"))
}

fn save_full(trainer: &Trainer, dir: &Path) -> Result<()> {
    let data = trainer_to_checkpoint(trainer);
    write_checkpoint(&ckpt_path(dir, trainer.iteration), &data)?;
    write_checkpoint(&dir.join("ckpt_latest.rckpt"), &data)?;
    Ok(())
}

/// Latest full checkpoint in a run directory, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let latest = dir.join("ckpt_latest.rckpt");
    latest.exists().then_some(latest)
}

/// Rebuilds the past-policy pool from the pool directory, versions
/// `0..=iteration` inclusive.
fn reconstruct_pool(trainer: &mut Trainer, dir: &Path) -> Result<()> {
    let mut pool = crate::trainer::PastPolicyPool::new();
    for version in 0..=trainer.iteration {
        let path = pool_path(dir, version);
        let data = read_checkpoint(&path)?;
        if data.version != version {
            return Err(Error::Checkpoint(format!(
                "pool file {} carries version {}",
                path.display(),
                data.version
            )));
        }
        let net = restore_policy_like(&trainer.policy, &data)?;
        pool.push_frozen(std::sync::Arc::new(net));
    }
    trainer.pool = pool;
    // Snapshots published after the checkpoint was written are stale.
    let mut extra = trainer.iteration + 1;
    while pool_path(dir, extra).exists() {
        std::fs::remove_file(pool_path(dir, extra))?;
        extra += 1;
    }
    Ok(())
}

/// Outcome of one seed's training run.
#[derive(Debug, Clone)]
pub struct SeedRunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub iterations_run: u64,
    pub stopped_early: bool,
}

/// Trains one seed, writing checkpoints and metrics into its directory.
/// Resumes from the latest checkpoint when `resume` is set.
pub fn run_train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    par: Parallelism,
    resume: bool,
) -> Result<SeedRunOutcome> {
    let dir = cfg.seed_dir(seed);
    std::fs::create_dir_all(dir.join("pool"))?;
    let config_hash = cfg.config_hash();

    let config_path = dir.join("config.toml");
    if config_path.exists() {
        let existing = ExperimentConfig::load(&config_path)?;
        if existing.config_hash() != config_hash {
            return Err(Error::config(format!(
                "{} holds a different experiment (config hash mismatch)",
                dir.display()
            )));
        }
    } else {
        std::fs::write(&config_path, cfg.to_toml_string())?;
    }

    let mut trainer = Trainer::new(&cfg.env, cfg.rusp.clone(), cfg.train.clone(), seed, par)?;

    let metrics_path = dir.join("metrics.jsonl");
    if resume {
        if let Some(ckpt) = latest_checkpoint(&dir) {
            let data = read_checkpoint(&ckpt)?;
            restore_trainer(&mut trainer, &data)?;
            reconstruct_pool(&mut trainer, &dir)?;
            metrics::truncate_from(&metrics_path, trainer.iteration)?;
        }
    } else if latest_checkpoint(&dir).is_some() {
        return Err(Error::config(format!(
            "{} already contains checkpoints; pass resume to continue",
            dir.display()
        )));
    }

    if trainer.iteration == 0 {
        // Initial state: checkpoint plus the version-0 pool snapshot.
        save_full(&trainer, &dir)?;
        write_checkpoint(&pool_path(&dir, 0), &policy_to_checkpoint(&trainer.policy, 0))?;
    }

    let mut stop_streak = 0usize;
    let mut stopped_early = false;
    while trainer.iteration < cfg.run.iterations {
        let started = Instant::now();
        let stats = trainer.train_iteration()?;
        let iter_now = trainer.iteration;

        write_checkpoint(
            &pool_path(&dir, iter_now),
            &policy_to_checkpoint(&trainer.policy, iter_now),
        )?;

        let scheduled = cfg.run.eval_every > 0
            && (iter_now % cfg.run.eval_every == 0 || iter_now == cfg.run.iterations);
        let eval_reports = if scheduled {
            scheduled_eval(
                &cfg.env,
                &trainer.policy,
                &trainer.normalizer,
                cfg.run.eval_episodes,
                seed ^ iter_now,
                par,
            )?
        } else {
            Vec::new()
        };

        // Wall time is recorded as zero in sequential mode so that
        // fixed-seed single-threaded runs produce byte-identical metrics.
        let wall = if par.is_parallel() {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let record = MetricsRecord {
            iteration: iter_now,
            wall_time_s: wall,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            grad_norm: stats.grad_norm,
            episodes: stats.collect.episodes,
            mean_raw_reward: stats.collect.mean_raw_reward,
            mean_transformed_reward: stats.collect.mean_transformed_reward,
            past_replace_rate: stats.collect.past_replace_rate(),
            aborted: stats.aborted,
            eval: eval_reports.clone(),
            config_hash: config_hash.clone(),
        };
        metrics::append_record(&metrics_path, &record)?;

        if cfg.run.checkpoint_every > 0 && iter_now % cfg.run.checkpoint_every == 0 {
            save_full(&trainer, &dir)?;
        }

        if let (true, Some(stop)) = (scheduled, &cfg.run.early_stop) {
            if let Some(value) = record.metric(&stop.metric) {
                let hit = match stop.rule {
                    StopRule::AtOrBelow => value <= stop.threshold,
                    StopRule::AtOrAbove => value >= stop.threshold,
                };
                stop_streak = if hit { stop_streak + 1 } else { 0 };
                if stop_streak >= stop.patience {
                    stopped_early = true;
                }
            }
        }
        if stopped_early {
            break;
        }
    }
    save_full(&trainer, &dir)?;
    Ok(SeedRunOutcome {
        seed,
        dir,
        iterations_run: trainer.iteration,
        stopped_early,
    })
}

/// Trains every seed in the configuration (or a single override).
pub fn run_train(
    cfg: &ExperimentConfig,
    par: Parallelism,
    seed_override: Option<u64>,
    resume: bool,
) -> Result<Vec<SeedRunOutcome>> {
    cfg.validate()?;
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => cfg.run.seeds.clone(),
    };
    let mut outcomes = Vec::new();
    for seed in seeds {
        outcomes.push(run_train_seed(cfg, seed, par, resume)?);
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Standalone evaluation of a checkpoint

/// Loads the policy (and normalizer) from a checkpoint, using the run
/// directory's config for architecture and environment.
pub fn load_policy_for_eval(
    ckpt: &Path,
    config: Option<&Path>,
) -> Result<(ExperimentConfig, EntityNet, ObsNormalizer, u64)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = ckpt.parent().unwrap_or(Path::new("."));
            let candidate = dir.join("config.toml");
            if candidate.exists() {
                candidate
            } else {
                return Err(Error::config(
                    "no config.toml next to the checkpoint; pass --config",
                ));
            }
        }
    };
    let cfg = ExperimentConfig::load(&cfg_path)?;
    // Seed is irrelevant here: parameters are overwritten from the file.
    let mut trainer =
        Trainer::new(&cfg.env, cfg.rusp.clone(), cfg.train.clone(), 0, Parallelism::auto())?;
    let data = read_checkpoint(ckpt)?;
    restore_trainer(&mut trainer, &data)?;
    Ok((cfg, trainer.policy, trainer.normalizer, data.version))
}

/// Evaluates a checkpoint under one protocol and appends the report to
/// `eval_reports.jsonl` beside it.
pub fn run_eval(
    ckpt: &Path,
    config: Option<&Path>,
    protocol: &str,
    episodes: usize,
    seed: u64,
    mode: ActMode,
    par: Parallelism,
) -> Result<EvalReport> {
    let (cfg, policy, normalizer, version) = load_policy_for_eval(ckpt, config)?;
    let net = NetRef { net: &policy, normalizer: &normalizer };
    let nets = [net];
    let opts = EvalOptions { episodes, seed, mode, par, max_wave: 256 };
    let mut report = match protocol {
        "selfplay" => EvalReport {
            protocol: protocol.into(),
            episodes,
            selfplay_defects: Some(selfplay_defects(
                [EvalAgent::Net(0), EvalAgent::Net(0)],
                &nets,
                10,
                &opts,
            )?),
            ..Default::default()
        },
        "reciprocity" => {
            let rec = classify_reciprocal(EvalAgent::Net(0), &nets, &opts)?;
            EvalReport {
                protocol: protocol.into(),
                episodes,
                defects_vs_alldefect: Some(rec.defects_vs_alldefect),
                defects_vs_allcooperate: Some(rec.defects_vs_allcooperate),
                reciprocity_margin: Some(rec.margin),
                reciprocal: Some(rec.reciprocal),
                ..Default::default()
            }
        }
        "holdout" => {
            let vs_d = eval_holdout(
                EvalAgent::Net(0),
                FixedStrategy::AllDefect,
                EvalAgent::Net(0),
                &nets,
                20,
                &opts,
            )?;
            let vs_c = eval_holdout(
                EvalAgent::Net(0),
                FixedStrategy::AllCooperate,
                EvalAgent::Net(0),
                &nets,
                20,
                &opts,
            )?;
            EvalReport {
                protocol: protocol.into(),
                episodes,
                holdout_defect_vs_alldefect: Some(vs_d),
                holdout_defect_vs_allcooperate: Some(vs_c),
                ..Default::default()
            }
        }
        "rapport" => EvalReport {
            protocol: protocol.into(),
            episodes,
            rapport_differential: Some(eval_prior_rapport(
                EvalAgent::Net(0),
                EvalAgent::Net(0),
                &nets,
                (6, 6, 8),
                &opts,
            )?),
            ..Default::default()
        },
        "team" => {
            let tm = team_metrics(net, &cfg.env, 50, &opts)?;
            EvalReport {
                protocol: protocol.into(),
                episodes,
                team_mean_reward: Some(tm.mean_reward),
                team_agents_on_team: Some(tm.agents_on_team),
                team_mean_length: Some(tm.mean_team_length),
                ..Default::default()
            }
        }
        other => return Err(Error::config(format!("unknown protocol '{other}'"))),
    };
    report.protocol = format!("{protocol}@v{version}");
    if let Some(dir) = ckpt.parent() {
        let line = serde_json::to_string(&report)
            .map_err(|e| Error::config(format!("report serialization: {e}")))?;
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("eval_reports.jsonl"))?;
        writeln!(f, "{line}")?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Sweeps

/// One grid axis: a config field name and the values it takes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxis {
    pub field: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub field: String,
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
}

/// Applies one axis value to a config by field name.
pub fn apply_axis(cfg: &mut ExperimentConfig, field: &str, value: &str) -> Result<()> {
    let parse_f32 = |v: &str| -> Result<f32> {
        v.parse().map_err(|_| Error::config(format!("bad numeric value '{v}' for {field}")))
    };
    match field {
        "sigma_max" => cfg.rusp.sigma_max = parse_f32(value)?,
        "hardness_alpha" => cfg.rusp.hardness_alpha = parse_f32(value)?,
        "hardness_beta" => cfg.rusp.hardness_beta = parse_f32(value)?,
        "past_sample_prob" => cfg.train.past_sample_prob = parse_f32(value)? as f64,
        "noise_mode" => {
            cfg.rusp.noise_mode = match value {
                "asymmetric" => crate::rusp::NoiseMode::Asymmetric,
                "shared_sigma_asymmetric_noise" => {
                    crate::rusp::NoiseMode::SharedSigmaAsymmetricNoise
                }
                "fully_shared" => crate::rusp::NoiseMode::FullyShared,
                other => return Err(Error::config(format!("unknown noise mode '{other}'"))),
            }
        }
        "partition_mode" => {
            cfg.rusp.partition_mode = match value {
                "integer_partition" => crate::rusp::PartitionMode::IntegerPartition,
                "full_random" => crate::rusp::PartitionMode::FullRandom,
                other => return Err(Error::config(format!("unknown partition mode '{other}'"))),
            }
        }
        other => return Err(Error::config(format!("unknown sweep field '{other}'"))),
    }
    Ok(())
}

/// Runs the cross product of axis values and seeds, one subdirectory per
/// cell, and writes `sweep_manifest.json` listing every cell.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: Option<&SweepAxis>,
    par: Parallelism,
    resume: bool,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    let values: Vec<Option<String>> = match axis {
        None => vec![None],
        Some(a) if a.values.is_empty() => vec![None],
        Some(a) => a.values.iter().cloned().map(Some).collect(),
    };
    for value in &values {
        let mut cfg = base.clone();
        let label = match (axis, value) {
            (Some(a), Some(v)) => {
                apply_axis(&mut cfg, &a.field, v)?;
                format!("{}_{v}", a.field)
            }
            _ => "base".to_string(),
        };
        cfg.run.out_dir = base.run.out_dir.join(&label);
        for &seed in &base.run.seeds {
            run_train_seed(&cfg, seed, par, resume)?;
            cells.push(SweepCell {
                field: axis.map_or_else(
                    || "base".to_string(),
                    |a| a.field.clone(),
                ),
                value: value.clone().unwrap_or_else(|| "base".to_string()),
                seed,
                dir: cfg.seed_dir(seed),
            });
        }
    }
    let manifest = serde_json::to_string_pretty(&cells)
        .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
    std::fs::create_dir_all(&base.run.out_dir)?;
    std::fs::write(base.run.out_dir.join("sweep_manifest.json"), manifest)?;
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let s = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn config_hash_ignores_output_location_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.out_dir = PathBuf::from("/somewhere/else");
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.rusp.sigma_max = 0.25;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn axis_application_touches_the_right_field() {
        let mut cfg = ExperimentConfig::default();
        apply_axis(&mut cfg, "sigma_max", "0.5").unwrap();
        assert_eq!(cfg.rusp.sigma_max, 0.5);
        apply_axis(&mut cfg, "noise_mode", "fully_shared").unwrap();
        assert_eq!(cfg.rusp.noise_mode, crate::rusp::NoiseMode::FullyShared);
        assert!(apply_axis(&mut cfg, "nonsense", "1").is_err());
    }

    #[test]
    fn bad_config_is_rejected() {
        let toml = r#"
            [env]
            name = "ipd"
            [train]
            sgd_steps_per_iteration = 7
            sample_reuse_epochs = 5
        "#;
        assert!(matches!(ExperimentConfig::from_toml_str(toml), Err(Error::Config(_))));
    }
}
