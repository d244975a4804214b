//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};

/// Per-parameter first/second moment estimates plus a step counter.
///
/// Moment tensors are aligned index-for-index with the parameter set they
/// were created from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    #[serde(skip)]
    pub first_moment: Vec<Vec<f32>>,
    #[serde(skip)]
    pub second_moment: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, learning_rate: f32) -> Self {
        let first_moment = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let second_moment = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptimizerState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-5,
            first_moment,
            second_moment,
        }
    }

    /// One update. `grads` must align with `params` (same order, same shapes);
    /// entries may be `None` for parameters untouched this step.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f32>>]) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for idx in 0..params.len() {
            let Some(g) = &grads[idx] else { continue };
            let (_, tensor) = params.at_mut(idx);
            assert_eq!(g.len(), tensor.len(), "gradient shape mismatch at index {idx}");
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let theta = tensor.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                theta[j] -= (self.learning_rate as f64 * m_hat / (v_hat.sqrt() + self.epsilon as f64))
                    as f32;
            }
        }
    }

    /// Serializes the moment buffers as named tensors for checkpointing.
    pub fn moment_tensors(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (idx, (name, t)) in params.iter().enumerate() {
            out.push((format!("adam/m/{name}"), Tensor::new(t.shape().to_vec(), self.first_moment[idx].clone())));
            out.push((format!("adam/v/{name}"), Tensor::new(t.shape().to_vec(), self.second_moment[idx].clone())));
        }
        out
    }
}

/// Global gradient-norm clipping: scales all gradients so their joint L2
/// norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g {
            sq += x as f64 * x as f64;
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![value]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single_param(0.3);
        let mut opt = OptimizerState::new(&params, 3e-4);
        opt.apply(&mut params, &[Some(vec![0.0])]);
        assert_eq!(params.get("w").unwrap().data(), &[0.3]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_matches_bias_corrected_closed_form() {
        // At t=1: m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps) — essentially lr * sign(g).
        for &g in &[0.5f32, -2.0, 1e-3] {
            let mut params = single_param(1.0);
            let mut opt = OptimizerState::new(&params, 3e-4);
            opt.apply(&mut params, &[Some(vec![g])]);
            let expect = 1.0 - 3e-4 * g / (g.abs() + 1e-5);
            let got = params.get("w").unwrap().data()[0];
            assert!((got - expect).abs() < 1e-7, "g={g}: {got} vs {expect}");
        }
    }

    #[test]
    fn constant_gradient_step_size_approaches_learning_rate() {
        // Independent f64 simulation of the fixed point: with constant g the
        // per-step move approaches lr * g / (|g| + eps) ~ lr in magnitude.
        let g = 0.7f32;
        let mut params = single_param(0.0);
        let mut opt = OptimizerState::new(&params, 3e-4);
        let mut prev = 0.0f32;
        let mut step_size = 0.0f32;
        for _ in 0..5000 {
            opt.apply(&mut params, &[Some(vec![g])]);
            let cur = params.get("w").unwrap().data()[0];
            step_size = (cur - prev).abs();
            prev = cur;
        }

        // Oracle: simulate the same recurrence in f64.
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut theta = 0.0f64;
        let mut prev_t = 0.0f64;
        let mut oracle_step = 0.0f64;
        for t in 1..=5000u32 {
            m = 0.9 * m + 0.1 * g as f64;
            v = 0.999 * v + 0.001 * (g as f64) * (g as f64);
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            let delta = 3e-4 * mh / (vh.sqrt() + 1e-5);
            theta -= delta;
            oracle_step = (theta - prev_t).abs();
            prev_t = theta;
        }
        assert!((step_size as f64 - oracle_step).abs() < 1e-6);
        // Fixed point is within 5% of the learning rate.
        assert!((step_size - 3e-4).abs() < 0.05 * 3e-4, "step {step_size}");
    }

    #[test]
    fn grad_clip_rescales_to_max_norm() {
        let mut grads = vec![Some(vec![3.0, 4.0]), None];
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let g = grads[0].as_ref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6);
        assert!((g[1] - 0.8).abs() < 1e-6);
    }
}
