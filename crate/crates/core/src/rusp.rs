//! Per-episode sampling of randomized uncertain social preferences.
//!
//! Each episode draws a partition of the agents into reward-sharing cliques,
//! a block-sparse row-normalized transformation matrix `T` over those
//! cliques, per-agent uncertainty levels `sigma[k][i][j]`, and per-agent
//! noisy views `view[k][i][j] ~ Normal(T[i][j], sigma[k][i][j]^2)`. Training
//! rewards are `T * r`; evaluation always uses the identity transformation
//! with zero uncertainty, which is the original selfish game.
//!
//! Everything here is a pure function of an explicit seeded generator, so
//! rollout workers can own independent streams with no shared state.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How uncertainty levels and noisy views relate across agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Both sigma and the noise are sampled independently per agent.
    #[default]
    Asymmetric,
    /// All agents share the same sigma for a pair, but draw independent noise.
    SharedSigmaAsymmetricNoise,
    /// All agents share both sigma and the noisy view.
    FullyShared,
}

/// How agents are grouped into cliques.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Uniform draw over all integer partitions of the agent count.
    #[default]
    IntegerPartition,
    /// Every entry of the matrix participates: one all-agents clique.
    FullRandom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RuspConfig {
    /// Upper bound of the per-pair uncertainty draw, in standard-deviation
    /// units.
    pub sigma_max: f32,
    /// Beta-distribution shape for within-clique weights; (1, 1) is uniform.
    pub hardness_alpha: f32,
    pub hardness_beta: f32,
    pub partition_mode: PartitionMode,
    pub noise_mode: NoiseMode,
    /// Draw weights from U[-1, 1] and normalize rows by the sum of absolute
    /// values. Exposed for experimentation; not an evaluation target.
    pub allow_antisocial: bool,
    /// Forces the identity transformation and zero uncertainty.
    pub evaluation_mode: bool,
}

impl Default for RuspConfig {
    fn default() -> Self {
        RuspConfig {
            sigma_max: 1.0,
            hardness_alpha: 1.0,
            hardness_beta: 1.0,
            partition_mode: PartitionMode::IntegerPartition,
            noise_mode: NoiseMode::Asymmetric,
            allow_antisocial: false,
            evaluation_mode: false,
        }
    }
}

impl RuspConfig {
    /// The unmodified selfish game: identity preferences, zero uncertainty.
    pub fn evaluation() -> Self {
        RuspConfig { sigma_max: 0.0, evaluation_mode: true, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_max < 0.0 {
            return Err(Error::config("sigma_max must be >= 0"));
        }
        if self.hardness_alpha <= 0.0 || self.hardness_beta <= 0.0 {
            return Err(Error::config("hardness shape parameters must be > 0"));
        }
        Ok(())
    }
}

/// The per-episode reward transformation: row-normalized weights `T` plus the
/// clique structure that generated its sparsity pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialPreferenceMatrix {
    pub n: usize,
    /// Row-major `n x n`; every row sums to one.
    pub weights: Vec<f32>,
    /// Disjoint cliques covering all agent indices.
    pub partition: Vec<Vec<usize>>,
}

impl SocialPreferenceMatrix {
    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        SocialPreferenceMatrix { n, weights, partition: (0..n).map(|i| vec![i]).collect() }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.weights[i * self.n + j]
    }

    pub fn is_identity(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == if i == j { 1.0 } else { 0.0 }))
    }
}

/// Per-agent standard deviations: `sigma[k][i][j]` is agent `k`'s uncertainty
/// about the pair `(i, j)`. Stored row-major as `n x n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyField {
    pub n: usize,
    pub sigma: Vec<f32>,
}

impl UncertaintyField {
    pub fn zeros(n: usize) -> Self {
        UncertaintyField { n, sigma: vec![0.0; n * n * n] }
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f32 {
        self.sigma[(k * self.n + i) * self.n + j]
    }

    #[inline]
    fn set(&mut self, k: usize, i: usize, j: usize, v: f32) {
        self.sigma[(k * self.n + i) * self.n + j] = v;
    }
}

/// Per-agent noisy samples of the transformation matrix, same layout as
/// [`UncertaintyField`]. Entries are deliberately not clipped to [0, 1]:
/// observation normalization absorbs the range, while clipping would erase
/// information about how noisy a sample was.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPreferenceView {
    pub n: usize,
    pub view: Vec<f32>,
}

impl NoisyPreferenceView {
    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f32 {
        self.view[(k * self.n + i) * self.n + j]
    }
}

/// Everything an episode needs: the true matrix plus per-agent uncertainty
/// and noisy views.
#[derive(Debug, Clone)]
pub struct SocialContext {
    pub prefs: SocialPreferenceMatrix,
    pub sigma: UncertaintyField,
    pub view: NoisyPreferenceView,
}

impl SocialContext {
    /// The unmodified selfish game.
    pub fn selfish(n: usize) -> Self {
        let prefs = SocialPreferenceMatrix::identity(n);
        let sigma = UncertaintyField::zeros(n);
        let view = NoisyPreferenceView { n, view: prefs_full_copy(&prefs) };
        SocialContext { prefs, sigma, view }
    }

    /// Samples a full episode context from the config.
    pub fn sample(n: usize, config: &RuspConfig, rng: &mut impl Rng) -> Self {
        if config.evaluation_mode {
            return SocialContext::selfish(n);
        }
        let partition = sample_partition(n, config, rng);
        let prefs = build_transformation(n, &partition, config, rng);
        let (sigma, view) = sample_uncertainty_and_views(&prefs, config, rng);
        SocialContext { prefs, sigma, view }
    }
}

fn prefs_full_copy(prefs: &SocialPreferenceMatrix) -> Vec<f32> {
    let n = prefs.n;
    let mut out = vec![0.0; n * n * n];
    for k in 0..n {
        out[k * n * n..(k + 1) * n * n].copy_from_slice(&prefs.weights);
    }
    out
}

/// All integer partitions of `n`, parts in non-increasing order.
pub fn enumerate_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, max_part: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining == 0 {
            out.push(prefix.clone());
            return;
        }
        for part in (1..=remaining.min(max_part)).rev() {
            prefix.push(part);
            rec(remaining - part, part, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, n, &mut Vec::new(), &mut out);
    out
}

/// Uniformly draws one integer partition of `n` and assigns agents to its
/// blocks through a uniformly random permutation.
pub fn sample_partition(n: usize, config: &RuspConfig, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    assert!(n >= 1);
    let sizes: Vec<usize> = match config.partition_mode {
        PartitionMode::FullRandom => vec![n],
        PartitionMode::IntegerPartition => {
            let all = enumerate_partitions(n);
            all[rng.gen_range(0..all.len())].clone()
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut blocks = Vec::with_capacity(sizes.len());
    let mut cursor = 0;
    for size in sizes {
        blocks.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    blocks
}

/// Fills within-clique weights (diagonal included) from the hardness
/// distribution and row-normalizes. Rows whose pre-normalization sum is
/// below 1e-6 are resampled so normalization can never divide by ~zero.
pub fn build_transformation(
    n: usize,
    partition: &[Vec<usize>],
    config: &RuspConfig,
    rng: &mut impl Rng,
) -> SocialPreferenceMatrix {
    let mut weights = vec![0.0; n * n];
    let uniform_hardness = config.hardness_alpha == 1.0 && config.hardness_beta == 1.0;
    let beta = if uniform_hardness {
        None
    } else {
        Some(Beta::new(config.hardness_alpha, config.hardness_beta).expect("validated shape"))
    };
    let draw = |rng: &mut dyn rand::RngCore| -> f32 {
        if config.allow_antisocial {
            rng.gen_range(-1.0..=1.0)
        } else {
            match &beta {
                Some(b) => b.sample(rng),
                None => rng.gen_range(0.0..1.0),
            }
        }
    };
    for block in partition {
        for &i in block {
            if block.len() == 1 {
                weights[i * n + i] = 1.0;
                continue;
            }
            loop {
                let mut norm = 0.0;
                for &j in block {
                    let w = draw(rng);
                    weights[i * n + j] = w;
                    norm += w.abs();
                }
                if norm >= 1e-6 {
                    for &j in block {
                        weights[i * n + j] /= norm;
                    }
                    break;
                }
            }
        }
    }
    SocialPreferenceMatrix { n, weights, partition: partition.to_vec() }
}

/// Draws uncertainty levels and noisy views according to the noise mode.
///
/// - asymmetric: sigma i.i.d. `U[0, sigma_max]` per `(k, i, j)`, independent
///   Gaussian noise per `(k, i, j)`;
/// - shared sigma, asymmetric noise: one sigma per `(i, j)` shared by all
///   viewers, noise still independent per viewer;
/// - fully shared: one sigma and one noisy sample per `(i, j)`, copied to
///   every viewer.
pub fn sample_uncertainty_and_views(
    prefs: &SocialPreferenceMatrix,
    config: &RuspConfig,
    rng: &mut impl Rng,
) -> (UncertaintyField, NoisyPreferenceView) {
    let n = prefs.n;
    let mut sigma = UncertaintyField::zeros(n);
    let mut view = NoisyPreferenceView { n, view: prefs_full_copy(prefs) };
    if config.evaluation_mode || config.sigma_max == 0.0 {
        return (sigma, view);
    }

    let noise = |rng: &mut dyn rand::RngCore, s: f32| -> f32 {
        let z: f32 = StandardNormal.sample(rng);
        s * z
    };
    match config.noise_mode {
        NoiseMode::Asymmetric => {
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let s = rng.gen_range(0.0..=config.sigma_max);
                        sigma.set(k, i, j, s);
                        view.view[(k * n + i) * n + j] += noise(rng, s);
                    }
                }
            }
        }
        NoiseMode::SharedSigmaAsymmetricNoise => {
            for i in 0..n {
                for j in 0..n {
                    let s = rng.gen_range(0.0..=config.sigma_max);
                    for k in 0..n {
                        sigma.set(k, i, j, s);
                        view.view[(k * n + i) * n + j] += noise(rng, s);
                    }
                }
            }
        }
        NoiseMode::FullyShared => {
            for i in 0..n {
                for j in 0..n {
                    let s = rng.gen_range(0.0..=config.sigma_max);
                    let eps = noise(rng, s);
                    for k in 0..n {
                        sigma.set(k, i, j, s);
                        view.view[(k * n + i) * n + j] += eps;
                    }
                }
            }
        }
    }
    (sigma, view)
}

/// Applies the reward transformation: `r' = T r`.
pub fn transform_rewards(prefs: &SocialPreferenceMatrix, raw: &[f32]) -> Vec<f32> {
    assert_eq!(raw.len(), prefs.n);
    let n = prefs.n;
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += prefs.weights[i * n + j] * raw[j];
        }
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn partition_of_one_is_trivial() {
        let mut r = rng(0);
        for _ in 0..20 {
            let p = sample_partition(1, &RuspConfig::default(), &mut r);
            assert_eq!(p, vec![vec![0]]);
        }
    }

    #[test]
    fn partitions_of_three_are_equiprobable() {
        // p(3) = 3: {3}, {2,1}, {1,1,1}, each with probability 1/3.
        let mut r = rng(1);
        let cfg = RuspConfig::default();
        let mut counts = [0usize; 3];
        let trials = 30_000;
        for _ in 0..trials {
            let p = sample_partition(3, &cfg, &mut r);
            let mut sizes: Vec<usize> = p.iter().map(Vec::len).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            match sizes.as_slice() {
                [3] => counts[0] += 1,
                [2, 1] => counts[1] += 1,
                [1, 1, 1] => counts[2] += 1,
                other => panic!("impossible partition {other:?}"),
            }
        }
        for &c in &counts {
            let f = c as f64 / trials as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn partition_blocks_cover_all_agents_disjointly() {
        let mut r = rng(2);
        let cfg = RuspConfig::default();
        for n in 1..=8 {
            for _ in 0..200 {
                let p = sample_partition(n, &cfg, &mut r);
                let mut seen = vec![false; n];
                for block in &p {
                    for &a in block {
                        assert!(!seen[a], "agent {a} in two blocks");
                        seen[a] = true;
                    }
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn all_singletons_give_identity_matrix() {
        let partition: Vec<Vec<usize>> = (0..4).map(|i| vec![i]).collect();
        let t = build_transformation(4, &partition, &RuspConfig::default(), &mut rng(3));
        assert!(t.is_identity());
    }

    #[test]
    fn rows_always_sum_to_one() {
        let mut r = rng(4);
        let cfg = RuspConfig::default();
        for _ in 0..500 {
            let n = 5;
            let p = sample_partition(n, &cfg, &mut r);
            let t = build_transformation(n, &p, &cfg, &mut r);
            for i in 0..n {
                let sum: f32 = (0..n).map(|j| t.get(i, j)).sum();
                assert!((sum - 1.0).abs() <= 1e-6, "row {i} sums to {sum}");
            }
        }
    }

    #[test]
    fn block_sparsity_matches_cliques() {
        let mut r = rng(5);
        let cfg = RuspConfig::default();
        for _ in 0..200 {
            let n = 6;
            let p = sample_partition(n, &cfg, &mut r);
            let t = build_transformation(n, &p, &cfg, &mut r);
            let mut clique_of = vec![0usize; n];
            for (b, block) in p.iter().enumerate() {
                for &a in block {
                    clique_of[a] = b;
                }
            }
            for i in 0..n {
                for j in 0..n {
                    if clique_of[i] != clique_of[j] {
                        assert_eq!(t.get(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn hard_preferences_concentrate_pairs_near_half() {
        // Beta(100, 1) weights in a 2-clique: by exchangeability the
        // normalized entries have mean 0.5, and with alpha=100 they
        // concentrate tightly around it.
        let cfg = RuspConfig { hardness_alpha: 100.0, ..Default::default() };
        let partition = vec![vec![0, 1]];
        let mut r = rng(6);
        let mut sum_off = 0.0f64;
        let trials = 10_000;
        for _ in 0..trials {
            let t = build_transformation(2, &partition, &cfg, &mut r);
            sum_off += t.get(0, 1) as f64;
        }
        let mean = sum_off / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean off-diagonal {mean}");
    }

    #[test]
    fn zero_sigma_views_equal_truth_exactly() {
        let cfg = RuspConfig { sigma_max: 0.0, ..Default::default() };
        let mut r = rng(7);
        let p = sample_partition(4, &cfg, &mut r);
        let t = build_transformation(4, &p, &cfg, &mut r);
        let (sigma, view) = sample_uncertainty_and_views(&t, &cfg, &mut r);
        for k in 0..4 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(sigma.get(k, i, j), 0.0);
                    assert_eq!(view.get(k, i, j), t.get(i, j), "bit-exact equality");
                }
            }
        }
    }

    #[test]
    fn fully_shared_views_are_identical_across_agents() {
        let cfg = RuspConfig { noise_mode: NoiseMode::FullyShared, ..Default::default() };
        let mut r = rng(8);
        let p = sample_partition(3, &cfg, &mut r);
        let t = build_transformation(3, &p, &cfg, &mut r);
        let (sigma, view) = sample_uncertainty_and_views(&t, &cfg, &mut r);
        for i in 0..3 {
            for j in 0..3 {
                for k in 1..3 {
                    assert_eq!(view.get(0, i, j), view.get(k, i, j));
                    assert_eq!(sigma.get(0, i, j), sigma.get(k, i, j));
                }
            }
        }
    }

    #[test]
    fn shared_sigma_mode_still_draws_independent_noise() {
        let cfg =
            RuspConfig { noise_mode: NoiseMode::SharedSigmaAsymmetricNoise, ..Default::default() };
        let mut r = rng(9);
        let t = build_transformation(2, &[vec![0, 1]], &cfg, &mut r);
        let (sigma, view) = sample_uncertainty_and_views(&t, &cfg, &mut r);
        assert_eq!(sigma.get(0, 0, 1), sigma.get(1, 0, 1));
        // Noise is independent, so views almost surely differ.
        assert_ne!(view.get(0, 0, 1), view.get(1, 0, 1));
    }

    #[test]
    fn asymmetric_noise_variance_matches_expected_sigma_squared() {
        // sigma ~ U[0,1] => E[sigma^2] = 1/3; the view residuals must show it.
        let cfg = RuspConfig { sigma_max: 1.0, ..Default::default() };
        let partition = vec![vec![0, 1]];
        let mut r = rng(10);
        let mut sq = 0.0f64;
        let trials = 100_000;
        for _ in 0..trials {
            let t = build_transformation(2, &partition, &cfg, &mut r);
            let (_, view) = sample_uncertainty_and_views(&t, &cfg, &mut r);
            let resid = (view.get(0, 0, 1) - t.get(0, 1)) as f64;
            sq += resid * resid;
        }
        let var = sq / trials as f64;
        assert!((var - 1.0 / 3.0).abs() < 0.05 / 3.0, "variance {var}");
    }

    #[test]
    fn transform_identity_is_a_no_op() {
        let t = SocialPreferenceMatrix::identity(2);
        assert_eq!(transform_rewards(&t, &[4.0, -2.0]), vec![4.0, -2.0]);
    }

    #[test]
    fn transform_hand_checked_dot_product() {
        let t = SocialPreferenceMatrix {
            n: 2,
            weights: vec![0.6, 0.4, 0.3, 0.7],
            partition: vec![vec![0, 1]],
        };
        let out = transform_rewards(&t, &[1.0, -2.0]);
        assert!((out[0] - -0.2).abs() < 1e-6);
        assert!((out[1] - -1.1).abs() < 1e-6);
    }

    #[test]
    fn equal_shares_average_the_rewards() {
        let t = SocialPreferenceMatrix {
            n: 2,
            weights: vec![0.5, 0.5, 0.5, 0.5],
            partition: vec![vec![0, 1]],
        };
        let out = transform_rewards(&t, &[3.0, -1.0]);
        assert_eq!(out, vec![1.0, 1.0]);
    }

    #[test]
    fn transformation_is_linear() {
        let mut r = rng(11);
        let cfg = RuspConfig::default();
        for _ in 0..100 {
            let n = 4;
            let p = sample_partition(n, &cfg, &mut r);
            let t = build_transformation(n, &p, &cfg, &mut r);
            let r1: Vec<f32> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
            let r2: Vec<f32> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
            let (a, b) = (1.7f32, -0.4f32);
            let combined: Vec<f32> = r1.iter().zip(&r2).map(|(x, y)| a * x + b * y).collect();
            let lhs = transform_rewards(&t, &combined);
            let t1 = transform_rewards(&t, &r1);
            let t2 = transform_rewards(&t, &r2);
            for i in 0..n {
                let rhs = a * t1[i] + b * t2[i];
                assert!((lhs[i] - rhs).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn evaluation_mode_is_the_selfish_game() {
        let cfg = RuspConfig { evaluation_mode: true, ..Default::default() };
        let ctx = SocialContext::sample(3, &cfg, &mut rng(12));
        assert!(ctx.prefs.is_identity());
        assert!(ctx.sigma.sigma.iter().all(|&s| s == 0.0));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(ctx.view.get(k, i, j), ctx.prefs.get(i, j));
                }
            }
        }
        let r = vec![1.5, -2.5, 0.0];
        assert_eq!(transform_rewards(&ctx.prefs, &r), r);
    }

    #[test]
    fn antisocial_rows_normalize_by_absolute_sum() {
        let cfg = RuspConfig { allow_antisocial: true, ..Default::default() };
        let mut r = rng(13);
        for _ in 0..200 {
            let t = build_transformation(2, &[vec![0, 1]], &cfg, &mut r);
            for i in 0..2 {
                let abs_sum: f32 = (0..2).map(|j| t.get(i, j).abs()).sum();
                assert!((abs_sum - 1.0).abs() <= 1e-6);
            }
        }
    }
}
