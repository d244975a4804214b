//! Generalized advantage estimation over complete episodes.

/// Standard GAE recursion over one episode's rewards and value estimates.
///
/// The episode is terminal: the value beyond the last step is zero. Returns
/// `(advantages, value_targets)` with `target[t] = advantage[t] + value[t]`.
/// Internals run in f64.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    gamma: f64,
    lambda: f64,
) -> (Vec<f32>, Vec<f32>) {
    assert_eq!(rewards.len(), values.len());
    let t_max = rewards.len();
    let mut adv = vec![0.0f32; t_max];
    let mut targets = vec![0.0f32; t_max];
    let mut running = 0.0f64;
    for t in (0..t_max).rev() {
        let next_value = if t + 1 < t_max { values[t + 1] as f64 } else { 0.0 };
        let delta = rewards[t] as f64 + gamma * next_value - values[t] as f64;
        running = delta + gamma * lambda * running;
        adv[t] = running as f32;
        targets[t] = (running + values[t] as f64) as f32;
    }
    (adv, targets)
}
