//! Exponential-moving-average observation normalization.
//!
//! Statistics are updated once per optimization step with that minibatch's
//! raw moments and bias-corrected on read, so early estimates behave like
//! plain sample averages long before the EMA horizon fills. Normalized
//! outputs are clipped to five standard deviations.

use serde::{Deserialize, Serialize};

pub const CLIP_SIGMAS: f32 = 5.0;

/// Running statistics for one feature block.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormalizerState {
    pub beta: f64,
    pub updates: u64,
    /// EMA of per-feature means.
    pub mean: Vec<f64>,
    /// EMA of per-feature raw second moments.
    pub mean_sq: Vec<f64>,
}

impl NormalizerState {
    pub fn new(dim: usize, beta: f64) -> Self {
        NormalizerState { beta, updates: 0, mean: vec![0.0; dim], mean_sq: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch of rows into the running statistics.
    pub fn update_rows(&mut self, data: &[f32], dim: usize) {
        assert_eq!(dim, self.dim());
        if dim == 0 || data.is_empty() {
            return;
        }
        let rows = data.len() / dim;
        assert_eq!(rows * dim, data.len());
        let inv = 1.0 / rows as f64;
        let mut batch_mean = vec![0.0f64; dim];
        let mut batch_sq = vec![0.0f64; dim];
        for row in data.chunks(dim) {
            for (j, &x) in row.iter().enumerate() {
                batch_mean[j] += x as f64 * inv;
                batch_sq[j] += (x as f64) * (x as f64) * inv;
            }
        }
        for j in 0..dim {
            self.mean[j] = self.beta * self.mean[j] + (1.0 - self.beta) * batch_mean[j];
            self.mean_sq[j] = self.beta * self.mean_sq[j] + (1.0 - self.beta) * batch_sq[j];
        }
        self.updates += 1;
    }

    /// Bias-corrected mean and standard deviation for one feature.
    fn stats(&self, j: usize) -> (f64, f64) {
        if self.updates == 0 {
            return (0.0, 1.0);
        }
        let correction = 1.0 - self.beta.powi(self.updates as i32);
        let mean = self.mean[j] / correction;
        let sq = self.mean_sq[j] / correction;
        let var = (sq - mean * mean).max(0.0);
        (mean, (var + 1e-8).sqrt())
    }

    /// Normalizes rows in place: `(x - mean) / std`, clipped to 5 sigmas.
    pub fn normalize_rows(&self, data: &mut [f32], dim: usize) {
        assert_eq!(dim, self.dim());
        if dim == 0 {
            return;
        }
        let stats: Vec<(f64, f64)> = (0..dim).map(|j| self.stats(j)).collect();
        for row in data.chunks_mut(dim) {
            for (j, x) in row.iter_mut().enumerate() {
                let (mean, std) = stats[j];
                let z = ((*x as f64 - mean) / std) as f32;
                *x = z.clamp(-CLIP_SIGMAS, CLIP_SIGMAS);
            }
        }
    }
}

/// Normalizers for each observation block. Policy and value networks share
/// the common (self, entity) statistics; the omniscient extras have their
/// own.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObsNormalizer {
    pub self_block: NormalizerState,
    pub entity_block: NormalizerState,
    pub value_self_block: NormalizerState,
    pub value_entity_block: NormalizerState,
}

impl ObsNormalizer {
    pub fn new(layout: crate::envs::ObsLayout, beta: f64) -> Self {
        ObsNormalizer {
            self_block: NormalizerState::new(layout.self_dim, beta),
            entity_block: NormalizerState::new(layout.entity_dim, beta),
            value_self_block: NormalizerState::new(layout.value_self_dim, beta),
            value_entity_block: NormalizerState::new(layout.value_entity_dim, beta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stationary_input_converges_to_unit_statistics() {
        // Feature 0 ~ N(3, 2^2), feature 1 ~ U[-1, 5].
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = NormalizerState::new(2, 0.99999);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            let z: f32 = rng.gen_range(-1.0f32..1.0) + rng.gen_range(-1.0f32..1.0);
            vec![3.0 + 2.0 * z, rng.gen_range(-1.0..5.0)]
        };
        for _ in 0..500 {
            let batch: Vec<f32> = (0..64).flat_map(|_| sample(&mut rng)).collect();
            state.update_rows(&batch, 2);
        }
        let eval: Vec<f32> = (0..20_000).flat_map(|_| sample(&mut rng)).collect();
        let mut normalized = eval.clone();
        state.normalize_rows(&mut normalized, 2);
        for j in 0..2 {
            let vals: Vec<f64> =
                normalized.chunks(2).map(|r| r[j] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 0.05, "feature {j} mean {mean}");
            let std = var.sqrt();
            assert!((0.9..=1.1).contains(&std), "feature {j} std {std}");
        }
    }

    #[test]
    fn outputs_are_clipped_to_five_sigmas() {
        let mut state = NormalizerState::new(1, 0.999);
        for _ in 0..100 {
            state.update_rows(&[0.0, 1.0, -1.0, 0.5, -0.5], 1);
        }
        let mut wild = vec![1e6f32, -1e6];
        state.normalize_rows(&mut wild, 1);
        assert_eq!(wild, vec![CLIP_SIGMAS, -CLIP_SIGMAS]);
    }

    #[test]
    fn untouched_normalizer_passes_values_through() {
        let state = NormalizerState::new(2, 0.99999);
        let mut data = vec![0.25, -3.0];
        state.normalize_rows(&mut data, 2);
        assert!((data[0] - 0.25).abs() < 1e-4);
        assert!((data[1] + 3.0).abs() < 1e-3);
    }

    #[test]
    fn bias_correction_makes_early_estimates_usable() {
        // One update with beta very close to 1: uncorrected EMA would be
        // ~1e-5 of the batch mean; corrected it matches the batch.
        let mut state = NormalizerState::new(1, 0.99999);
        let batch = vec![10.0f32; 32];
        state.update_rows(&batch, 1);
        let mut x = vec![10.0f32];
        state.normalize_rows(&mut x, 1);
        assert!(x[0].abs() < 0.05, "normalized batch mean should be ~0, got {}", x[0]);
    }

    #[test]
    fn variance_is_never_negative() {
        let mut state = NormalizerState::new(1, 0.9);
        for _ in 0..50 {
            state.update_rows(&[7.0; 16], 1);
        }
        let mut x = vec![7.0f32];
        state.normalize_rows(&mut x, 1);
        assert!(x[0].is_finite());
        assert!(x[0].abs() <= CLIP_SIGMAS);
    }
}
