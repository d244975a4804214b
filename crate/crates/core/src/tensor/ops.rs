//! Forward kernels shared by the autodiff tape and the no-grad rollout path.

use crate::parallel::Parallelism;

use super::gemm;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Affine map plus activation: `out = act(x @ w + b)`.
///
/// `x` is `[m, in_dim]`, `w` is `[in_dim, out_dim]`, `b` is `[out_dim]`.
pub fn dense_forward(
    par: Parallelism,
    x: &[f32],
    m: usize,
    in_dim: usize,
    w: &[f32],
    b: &[f32],
    out_dim: usize,
    act: Activation,
) -> Vec<f32> {
    assert_eq!(x.len(), m * in_dim);
    assert_eq!(w.len(), in_dim * out_dim);
    assert_eq!(b.len(), out_dim);
    let mut out = vec![0.0; m * out_dim];
    gemm::sgemm(par, 1.0, x, m, in_dim, false, w, in_dim, out_dim, false, 0.0, &mut out);
    for row in out.chunks_mut(out_dim) {
        for (o, &bj) in row.iter_mut().zip(b) {
            *o = act.apply(*o + bj);
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// One step of a standard LSTM cell over a batch.
///
/// Gate blocks in the `4h`-wide weight matrices are ordered
/// input, forget, cell-candidate, output. Returns `(h_next, c_next, gates)`
/// where `gates` holds the post-activation gate values `[m, 4h]` needed by
/// the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn lstm_forward(
    par: Parallelism,
    x: &[f32],
    m: usize,
    in_dim: usize,
    h: &[f32],
    c: &[f32],
    wx: &[f32],
    wh: &[f32],
    bias: &[f32],
    hidden: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let gate_dim = 4 * hidden;
    assert_eq!(x.len(), m * in_dim);
    assert_eq!(h.len(), m * hidden);
    assert_eq!(c.len(), m * hidden);
    assert_eq!(wx.len(), in_dim * gate_dim);
    assert_eq!(wh.len(), hidden * gate_dim);
    assert_eq!(bias.len(), gate_dim);

    let mut pre = vec![0.0; m * gate_dim];
    gemm::sgemm(par, 1.0, x, m, in_dim, false, wx, in_dim, gate_dim, false, 0.0, &mut pre);
    gemm::sgemm(par, 1.0, h, m, hidden, false, wh, hidden, gate_dim, false, 1.0, &mut pre);

    let mut gates = vec![0.0; m * gate_dim];
    let mut h_next = vec![0.0; m * hidden];
    let mut c_next = vec![0.0; m * hidden];
    for r in 0..m {
        let p = &pre[r * gate_dim..(r + 1) * gate_dim];
        let g = &mut gates[r * gate_dim..(r + 1) * gate_dim];
        for j in 0..hidden {
            let i_g = sigmoid(p[j] + bias[j]);
            let f_g = sigmoid(p[hidden + j] + bias[hidden + j]);
            let cand = (p[2 * hidden + j] + bias[2 * hidden + j]).tanh();
            let o_g = sigmoid(p[3 * hidden + j] + bias[3 * hidden + j]);
            let c_new = f_g * c[r * hidden + j] + i_g * cand;
            g[j] = i_g;
            g[hidden + j] = f_g;
            g[2 * hidden + j] = cand;
            g[3 * hidden + j] = o_g;
            c_next[r * hidden + j] = c_new;
            h_next[r * hidden + j] = o_g * c_new.tanh();
        }
    }
    (h_next, c_next, gates)
}

/// Layer normalization over the last dimension with learned scale and shift.
///
/// Returns `(out, xhat, rstd)`; `xhat` is the normalized pre-affine value and
/// `rstd` the per-row reciprocal standard deviation, both saved for backward.
pub fn layer_norm_forward(
    x: &[f32],
    m: usize,
    d: usize,
    scale: &[f32],
    shift: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    assert_eq!(x.len(), m * d);
    assert_eq!(scale.len(), d);
    assert_eq!(shift.len(), d);
    assert!(d >= 2, "layer norm needs at least two features");
    let mut out = vec![0.0; m * d];
    let mut xhat = vec![0.0; m * d];
    let mut rstd = vec![0.0; m];
    for r in 0..m {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * scale[j] + shift[j];
        }
    }
    (out, xhat, rstd)
}

/// Mean over groups of `group` consecutive rows: `[m*group, d] -> [m, d]`.
pub fn mean_pool_rows(x: &[f32], groups: usize, group: usize, d: usize) -> Vec<f32> {
    assert_eq!(x.len(), groups * group * d);
    let inv = 1.0 / group as f32;
    let mut out = vec![0.0; groups * d];
    for g in 0..groups {
        let dst = &mut out[g * d..(g + 1) * d];
        for e in 0..group {
            let src = &x[(g * group + e) * d..(g * group + e + 1) * d];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
        for o in dst.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// Repeat each row `times` times: `[m, d] -> [m*times, d]`.
pub fn repeat_rows(x: &[f32], m: usize, times: usize, d: usize) -> Vec<f32> {
    assert_eq!(x.len(), m * d);
    let mut out = vec![0.0; m * times * d];
    for r in 0..m {
        let src = &x[r * d..(r + 1) * d];
        for t in 0..times {
            out[(r * times + t) * d..(r * times + t + 1) * d].copy_from_slice(src);
        }
    }
    out
}

/// Column-wise concatenation of `[m, da]` and `[m, db]`.
pub fn concat_cols(a: &[f32], b: &[f32], m: usize, da: usize, db: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * da);
    assert_eq!(b.len(), m * db);
    let d = da + db;
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        out[r * d..r * d + da].copy_from_slice(&a[r * da..(r + 1) * da]);
        out[r * d + da..(r + 1) * d].copy_from_slice(&b[r * db..(r + 1) * db]);
    }
    out
}

/// Masked softmax probabilities for one logit row. Masked entries get
/// probability zero. Returns `false` when every entry is masked.
pub fn masked_softmax_row(logits: &[f32], mask: Option<&[bool]>, probs: &mut [f32]) -> bool {
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f32::NEG_INFINITY;
    for (j, &z) in logits.iter().enumerate() {
        if valid(j) && z > max {
            max = z;
        }
    }
    if max == f32::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, &z) in logits.iter().enumerate() {
        let e = if valid(j) { (z - max).exp() } else { 0.0 };
        probs[j] = e;
        sum += e;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    true
}

/// Log-probability of `action` and entropy of a masked categorical row.
pub fn logprob_entropy_row(
    logits: &[f32],
    mask: Option<&[bool]>,
    action: usize,
    probs_out: &mut [f32],
) -> (f32, f32) {
    let ok = masked_softmax_row(logits, mask, probs_out);
    assert!(ok, "all actions masked");
    let p_a = probs_out[action];
    let logp = p_a.max(f32::MIN_POSITIVE).ln();
    let mut entropy = 0.0;
    for &p in probs_out.iter() {
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    (logp, entropy)
}

/// Inverse-CDF sample from a probability row using one uniform draw.
pub fn sample_from_probs(probs: &[f32], u: f32) -> usize {
    let mut acc = 0.0;
    let mut last_valid = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_valid = j;
            if u < acc {
                return j;
            }
        }
    }
    // Rounding can leave acc slightly under 1.
    last_valid
}

/// Index of the highest-probability entry.
pub fn argmax_probs(probs: &[f32]) -> usize {
    let mut best = 0;
    let mut best_p = f32::NEG_INFINITY;
    for (j, &p) in probs.iter().enumerate() {
        if p > best_p {
            best_p = p;
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_passthrough() {
        // Identity weights, zero bias, linear activation: x -> x.
        let d = 4;
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let x = vec![0.3, -1.2, 0.0, 7.5];
        let y = dense_forward(
            Parallelism::Sequential,
            &x,
            1,
            d,
            &w,
            &vec![0.0; d],
            d,
            Activation::Linear,
        );
        assert_eq!(x, y);
    }

    #[test]
    fn dense_zero_weights_yield_bias() {
        let b = vec![0.5, -2.0, 0.0];
        let x = vec![9.0, -3.0];
        let y = dense_forward(
            Parallelism::Sequential,
            &x,
            1,
            2,
            &vec![0.0; 6],
            &b,
            3,
            Activation::Relu,
        );
        // Post-activation bias: relu applied.
        assert_eq!(y, vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn dense_basis_vector_selects_weight_row() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (fan_in, fan_out) = (4, 3);
        let w: Vec<f32> = (0..fan_in * fan_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..fan_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = vec![1.0, 0.0, 0.0, 0.0];
        let y = dense_forward(Parallelism::Sequential, &x, 1, fan_in, &w, &b, fan_out, Activation::Linear);
        // Hand matrix-vector product: e1 @ W selects W's first row.
        for j in 0..fan_out {
            let want = w[j] + b[j];
            assert!((y[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_zero_everything_gives_zero_output() {
        let h = 8;
        let (h1, c1, _) = lstm_forward(
            Parallelism::Sequential,
            &vec![0.0; h],
            1,
            h,
            &vec![0.0; h],
            &vec![0.0; h],
            &vec![0.0; h * 4 * h],
            &vec![0.0; h * 4 * h],
            &vec![0.0; 4 * h],
            h,
        );
        assert!(h1.iter().all(|&v| v == 0.0));
        assert!(c1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_gate_preserves_cell() {
        // Large positive forget preactivation (via bias), zero input gate:
        // the cell state must survive the step to within 1e-3.
        let h = 4;
        let mut bias = vec![0.0; 4 * h];
        for j in 0..h {
            bias[h + j] = 30.0; // forget gate saturates at 1
            bias[j] = -30.0; // input gate saturates at 0
        }
        let c0 = vec![0.7, -1.3, 0.2, 2.0];
        let (_, c1, _) = lstm_forward(
            Parallelism::Sequential,
            &vec![0.0; h],
            1,
            h,
            &vec![0.0; h],
            &c0,
            &vec![0.0; h * 4 * h],
            &vec![0.0; h * 4 * h],
            &bias,
            h,
        );
        for (a, b) in c0.iter().zip(&c1) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn lstm_single_step_matches_scalar_reimplementation() {
        // Independent scalar oracle in f64 over a random step.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (m, din, h) = (3, 5, 6);
        let gen = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let x = gen(m * din, &mut rng);
        let h0 = gen(m * h, &mut rng);
        let c0 = gen(m * h, &mut rng);
        let wx = gen(din * 4 * h, &mut rng);
        let wh = gen(h * 4 * h, &mut rng);
        let b = gen(4 * h, &mut rng);
        let (h1, c1, _) =
            lstm_forward(Parallelism::Sequential, &x, m, din, &h0, &c0, &wx, &wh, &b, h);

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for r in 0..m {
            for j in 0..h {
                let mut pre = [0.0f64; 4];
                for (g, p) in pre.iter_mut().enumerate() {
                    let col = g * h + j;
                    for i in 0..din {
                        *p += x[r * din + i] as f64 * wx[i * 4 * h + col] as f64;
                    }
                    for i in 0..h {
                        *p += h0[r * h + i] as f64 * wh[i * 4 * h + col] as f64;
                    }
                    *p += b[col] as f64;
                }
                let (ig, fg, cand, og) = (sig(pre[0]), sig(pre[1]), pre[2].tanh(), sig(pre[3]));
                let c_new = fg * c0[r * h + j] as f64 + ig * cand;
                let h_new = og * c_new.tanh();
                assert!((c1[r * h + j] as f64 - c_new).abs() < 1e-6);
                assert!((h1[r * h + j] as f64 - h_new).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_constant_input_is_all_zero() {
        let (out, _, _) = layer_norm_forward(&[3.0; 6], 2, 3, &[1.0; 3], &[0.0; 3]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_point_row() {
        // [1,-1]: mean 0, variance 1, so output is [1,-1] up to the epsilon.
        let (out, _, _) = layer_norm_forward(&[1.0, -1.0], 1, 2, &[1.0; 2], &[0.0; 2]);
        assert!((out[0] - 1.0).abs() < 1e-4);
        assert!((out[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_mean_is_tiny() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (m, d) = (16, 32);
        let x: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (out, _, _) = layer_norm_forward(&x, m, d, &vec![1.0; d], &vec![0.0; d]);
        for r in 0..m {
            let mean: f32 = out[r * d..(r + 1) * d].iter().sum::<f32>() / d as f32;
            assert!(mean.abs() <= 1e-5, "row {r} mean {mean}");
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut p = vec![0.0; 5];
        assert!(masked_softmax_row(&[1.7; 5], None, &mut p));
        for &v in &p {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_extreme_logits_saturate() {
        let mut p = vec![0.0; 2];
        masked_softmax_row(&[1000.0, 0.0], None, &mut p);
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1] < 1e-6);
    }

    #[test]
    fn softmax_closed_form_two_entries() {
        // logits [ln 2, 0] -> [2/3, 1/3].
        let mut p = vec![0.0; 2];
        masked_softmax_row(&[2.0f32.ln(), 0.0], None, &mut p);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one_and_respects_mask() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let k = rng.gen_range(2..8);
            let logits: Vec<f32> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mut mask: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.7)).collect();
            mask[rng.gen_range(0..k)] = true;
            let mut p = vec![0.0; k];
            assert!(masked_softmax_row(&logits, Some(&mask), &mut p));
            let sum: f32 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            for (j, &v) in p.iter().enumerate() {
                assert!((0.0..=1.0).contains(&v));
                if !mask[j] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_all_masked_reports_failure() {
        let mut p = vec![0.0; 3];
        assert!(!masked_softmax_row(&[1.0, 2.0, 3.0], Some(&[false; 3]), &mut p));
    }

    #[test]
    fn pooling_and_repeat_are_inverse_on_identical_rows() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let rep = repeat_rows(&x, 2, 3, 2);
        let pooled = mean_pool_rows(&rep, 2, 3, 2);
        assert_eq!(pooled, x);
    }
}
