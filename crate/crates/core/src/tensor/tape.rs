//! Reverse-mode differentiation over a linear tape of fused operations.
//!
//! The tape records every primitive applied during a forward pass together
//! with the node indices of its inputs; `backward` replays the records in
//! exact reverse order, accumulating vector-Jacobian products into per-node
//! gradient buffers. Gradients are only propagated into nodes that
//! (transitively) depend on a parameter, so large observation inputs cost
//! nothing on the way back.

use crate::error::{Error, Result};
use crate::parallel::Parallelism;

use super::gemm;
use super::ops::{self, Activation};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, ta: bool, b: Var, tb: bool },
    AddRowBias { x: Var, b: Var },
    Relu { x: Var },
    /// Stored on the hidden-state output; runs the joint backward for the
    /// whole cell using this node's gradient and the cell node's gradient.
    LstmStep { x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var, cell: Var },
    /// Marker on the cell-state output; handled by `LstmStep`.
    LstmCellOut,
    LayerNorm { x: Var, scale: Var, shift: Var },
    MeanPoolRows { x: Var, group: usize },
    RepeatRows { x: Var, times: usize },
    ConcatCols { a: Var, b: Var },
    ConcatRows { parts: Vec<Var> },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    MulData { x: Var, coeffs: Vec<f32> },
    /// Stored on the entropy output; joint backward for (logp, entropy).
    LogProbEntropy { logits: Var, actions: Vec<usize>, mask: Option<Vec<bool>>, logp: Var },
    /// Marker on the log-probability output; handled by `LogProbEntropy`.
    LogProbOut,
    PpoLoss { logp: Var, logp_old: Vec<f32>, adv: Vec<f32>, weight: Vec<f32>, clip: f32 },
    MseLoss { v: Var, target: Vec<f32>, weight: Vec<f32> },
    MaskedMean { x: Var, weight: Vec<f32> },
    DotData { x: Var, coeffs: Vec<f32> },
    WeightedSum { terms: Vec<(Var, f32)> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
    saved: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Summary statistics a PPO loss node computes during its forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct PpoStats {
    /// Fraction of samples where the clipped branch was active.
    pub clip_fraction: f32,
    /// Mean of `logp_old - logp_new` over weighted samples (approximate KL).
    pub approx_kl: f32,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    par: Parallelism,
}

fn accumulate(grads: &mut [Option<Vec<f32>>], idx: usize, delta: &[f32]) {
    match &mut grads[idx] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => grads[idx] = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new(par: Parallelism) -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), par }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, saved: Vec<f32>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { rows, cols, value, saved, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::LstmCellOut | Op::LogProbOut => vec![],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::AddRowBias { x, b } => vec![*x, *b],
            Op::Relu { x } => vec![*x],
            Op::LstmStep { x, h, c, wx, wh, b, .. } => vec![*x, *h, *c, *wx, *wh, *b],
            Op::LayerNorm { x, scale, shift } => vec![*x, *scale, *shift],
            Op::MeanPoolRows { x, .. }
            | Op::RepeatRows { x, .. }
            | Op::Reshape { x }
            | Op::MulData { x, .. }
            | Op::MaskedMean { x, .. }
            | Op::DotData { x, .. } => vec![*x],
            Op::ConcatCols { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::ConcatRows { parts } => parts.clone(),
            Op::LogProbEntropy { logits, .. } => vec![*logits],
            Op::PpoLoss { logp, .. } => vec![*logp],
            Op::MseLoss { v, .. } => vec![*v],
            Op::WeightedSum { terms } => terms.iter().map(|(v, _)| *v).collect(),
        }
    }

    /// Register a gradient-free data node (observations, constants).
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f32>) -> Var {
        self.push(rows, cols, value, vec![], Op::Leaf)
    }

    /// Register a parameter leaf: gradients will be accumulated for it.
    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<f32>) -> Var {
        let v = self.push(rows, cols, value, vec![], Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul inner dimensions disagree");
        let mut out = vec![0.0; m * n];
        gemm::sgemm(
            self.par,
            1.0,
            &self.nodes[a.0].value,
            ar,
            ac,
            ta,
            &self.nodes[b.0].value,
            br,
            bc,
            tb,
            0.0,
            &mut out,
        );
        self.push(m, n, out, vec![], Op::Matmul { a, ta, b, tb })
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.nodes[b.0].value.len(), n, "bias width mismatch");
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(n) {
            for (o, &bj) in row.iter_mut().zip(&self.nodes[b.0].value) {
                *o += bj;
            }
        }
        self.push(m, n, out, vec![], Op::AddRowBias { x, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out: Vec<f32> = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(m, n, out, vec![], Op::Relu { x })
    }

    /// Affine map plus activation, composed from primitive nodes.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Var {
        let y = self.matmul(x, false, w, false);
        let y = self.add_row_bias(y, b);
        match act {
            Activation::Linear => y,
            Activation::Relu => self.relu(y),
        }
    }

    /// One recurrent cell step; returns `(h_next, c_next)`.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var) -> (Var, Var) {
        let (m, in_dim) = self.shape(x);
        let (_, hidden) = self.shape(h);
        assert_eq!(self.shape(c), (m, hidden));
        let (h_next, c_next, gates) = ops::lstm_forward(
            self.par,
            &self.nodes[x.0].value,
            m,
            in_dim,
            &self.nodes[h.0].value,
            &self.nodes[c.0].value,
            &self.nodes[wx.0].value,
            &self.nodes[wh.0].value,
            &self.nodes[b.0].value,
            hidden,
        );
        let cell = self.push(m, hidden, c_next, vec![], Op::LstmCellOut);
        let hid = self.push(m, hidden, h_next, gates, Op::LstmStep { x, h, c, wx, wh, b, cell });
        (hid, cell)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (m, d) = self.shape(x);
        let (out, xhat, rstd) = ops::layer_norm_forward(
            &self.nodes[x.0].value,
            m,
            d,
            &self.nodes[scale.0].value,
            &self.nodes[shift.0].value,
        );
        let mut saved = xhat;
        saved.extend_from_slice(&rstd);
        self.push(m, d, out, saved, Op::LayerNorm { x, scale, shift })
    }

    pub fn mean_pool_rows(&mut self, x: Var, group: usize) -> Var {
        let (m, d) = self.shape(x);
        assert!(group > 0 && m % group == 0, "pool group must divide rows");
        let groups = m / group;
        let out = ops::mean_pool_rows(&self.nodes[x.0].value, groups, group, d);
        self.push(groups, d, out, vec![], Op::MeanPoolRows { x, group })
    }

    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (m, d) = self.shape(x);
        let out = ops::repeat_rows(&self.nodes[x.0].value, m, times, d);
        self.push(m * times, d, out, vec![], Op::RepeatRows { x, times })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, da) = self.shape(a);
        let (mb, db) = self.shape(b);
        assert_eq!(m, mb, "concat row mismatch");
        let out = ops::concat_cols(&self.nodes[a.0].value, &self.nodes[b.0].value, m, da, db);
        self.push(m, da + db, out, vec![], Op::ConcatCols { a, b })
    }

    /// Vertical stack of same-width blocks.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].cols;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.nodes[p.0].cols, cols, "row-concat width mismatch");
            rows += self.nodes[p.0].rows;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(rows, cols, out, vec![], Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.nodes[x.0].value.clone();
        assert_eq!(value.len(), rows * cols, "reshape must preserve element count");
        self.push(rows, cols, value, vec![], Op::Reshape { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n));
        let out: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(m, n, out, vec![], Op::Add { a, b })
    }

    /// Elementwise product with a constant vector (gradient masking).
    pub fn mul_data(&mut self, x: Var, coeffs: Vec<f32>) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(coeffs.len(), m * n);
        let out: Vec<f32> =
            self.nodes[x.0].value.iter().zip(&coeffs).map(|(v, c)| v * c).collect();
        self.push(m, n, out, vec![], Op::MulData { x, coeffs })
    }

    /// Per-row masked-categorical log-probability of the chosen action and
    /// entropy. Returns `(logp, entropy)`, both `[m, 1]`.
    pub fn logprob_entropy(
        &mut self,
        logits: Var,
        actions: Vec<usize>,
        mask: Option<Vec<bool>>,
    ) -> (Var, Var) {
        let (m, k) = self.shape(logits);
        assert_eq!(actions.len(), m);
        if let Some(mk) = &mask {
            assert_eq!(mk.len(), m * k);
        }
        let mut logp = vec![0.0; m];
        let mut ent = vec![0.0; m];
        let mut probs = vec![0.0; m * k];
        for r in 0..m {
            let row_mask = mask.as_ref().map(|v| &v[r * k..(r + 1) * k]);
            let (lp, h) = ops::logprob_entropy_row(
                &self.nodes[logits.0].value[r * k..(r + 1) * k],
                row_mask,
                actions[r],
                &mut probs[r * k..(r + 1) * k],
            );
            logp[r] = lp;
            ent[r] = h;
        }
        let logp_var = self.push(m, 1, logp, vec![], Op::LogProbOut);
        let ent_var =
            self.push(m, 1, ent, probs, Op::LogProbEntropy { logits, actions, mask, logp: logp_var });
        (logp_var, ent_var)
    }

    /// Negated clipped-surrogate objective, averaged over weighted samples.
    pub fn ppo_loss(
        &mut self,
        logp: Var,
        logp_old: Vec<f32>,
        adv: Vec<f32>,
        weight: Vec<f32>,
        clip: f32,
    ) -> Var {
        let (m, n) = self.shape(logp);
        assert_eq!(n, 1);
        assert_eq!(logp_old.len(), m);
        assert_eq!(adv.len(), m);
        assert_eq!(weight.len(), m);
        let count: f32 = weight.iter().sum::<f32>().max(1.0);
        let mut loss = 0.0;
        let mut clipped = 0.0;
        let mut kl = 0.0;
        for i in 0..m {
            let ratio = (self.nodes[logp.0].value[i] - logp_old[i]).exp();
            let s1 = ratio * adv[i];
            let s2 = ratio.clamp(1.0 - clip, 1.0 + clip) * adv[i];
            loss -= weight[i] * s1.min(s2);
            if s1 > s2 {
                clipped += weight[i];
            }
            kl += weight[i] * (logp_old[i] - self.nodes[logp.0].value[i]);
        }
        let saved = vec![clipped / count, kl / count];
        self.push(1, 1, vec![loss / count], saved, Op::PpoLoss { logp, logp_old, adv, weight, clip })
    }

    /// Clip fraction and approximate KL recorded by a `ppo_loss` node.
    pub fn ppo_stats(&self, loss: Var) -> PpoStats {
        let node = &self.nodes[loss.0];
        match node.op {
            Op::PpoLoss { .. } => {
                PpoStats { clip_fraction: node.saved[0], approx_kl: node.saved[1] }
            }
            _ => PpoStats::default(),
        }
    }

    /// Weighted mean squared error against fixed targets.
    pub fn mse_loss(&mut self, v: Var, target: Vec<f32>, weight: Vec<f32>) -> Var {
        let (m, n) = self.shape(v);
        assert_eq!(n, 1);
        assert_eq!(target.len(), m);
        assert_eq!(weight.len(), m);
        let count: f32 = weight.iter().sum::<f32>().max(1.0);
        let mut loss = 0.0;
        for i in 0..m {
            let d = self.nodes[v.0].value[i] - target[i];
            loss += weight[i] * d * d;
        }
        self.push(1, 1, vec![loss / count], vec![], Op::MseLoss { v, target, weight })
    }

    /// Weighted mean of a column vector.
    pub fn masked_mean(&mut self, x: Var, weight: Vec<f32>) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(n, 1);
        assert_eq!(weight.len(), m);
        let count: f32 = weight.iter().sum::<f32>().max(1.0);
        let s: f32 =
            self.nodes[x.0].value.iter().zip(&weight).map(|(v, w)| v * w).sum::<f32>() / count;
        self.push(1, 1, vec![s], vec![], Op::MaskedMean { x, weight })
    }

    /// Fixed-coefficient contraction to a scalar (test plumbing).
    pub fn dot_data(&mut self, x: Var, coeffs: Vec<f32>) -> Var {
        assert_eq!(self.nodes[x.0].value.len(), coeffs.len());
        let s: f32 = self.nodes[x.0].value.iter().zip(&coeffs).map(|(v, c)| v * c).sum();
        self.push(1, 1, vec![s], vec![], Op::DotData { x, coeffs })
    }

    /// Linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut s = 0.0;
        for &(v, c) in terms {
            assert_eq!(self.nodes[v.0].value.len(), 1, "weighted_sum expects scalars");
            s += c * self.nodes[v.0].value[0];
        }
        self.push(1, 1, vec![s], vec![], Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Reverse pass from a scalar loss. Gradients for all parameter nodes
    /// (and intermediates that need them) are accumulated on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lnode = &self.nodes[loss.0];
        if lnode.value.len() != 1 {
            return Err(Error::config("backward target must be a scalar"));
        }
        if !lnode.value[0].is_finite() {
            return Err(Error::divergence(format!("loss is {}", lnode.value[0])));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // LSTM and logp/entropy pairs are handled at their second node.
            if matches!(self.nodes[i].op, Op::LstmCellOut | Op::LogProbOut | Op::Leaf) {
                continue;
            }
            if self.grads[i].is_none() && !self.sibling_has_grad(i) {
                continue;
            }
            self.backward_node(i);
        }

        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, grad) {
                if node.needs_grad && g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::divergence("non-finite parameter gradient"));
                }
            }
        }
        Ok(())
    }

    fn sibling_has_grad(&self, i: usize) -> bool {
        // A joint-backward op must also run when only its paired output
        // received a gradient.
        match &self.nodes[i].op {
            Op::LstmStep { cell, .. } => self.grads[cell.0].is_some(),
            Op::LogProbEntropy { logp, .. } => self.grads[logp.0].is_some(),
            _ => false,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&mut self, i: usize) {
        let d_out = self.grads[i].take().unwrap_or_else(|| vec![0.0; self.nodes[i].value.len()]);
        // Ops are matched by moving lightweight copies of their metadata out;
        // heavy payloads stay borrowed inside each arm.
        match &self.nodes[i].op {
            Op::Leaf | Op::LstmCellOut | Op::LogProbOut => {}

            &Op::Matmul { a, ta, b, tb } => {
                let (ar, ac) = self.shape(a);
                let (br, bc) = self.shape(b);
                let (m, n) = (self.nodes[i].rows, self.nodes[i].cols);
                if self.needs(a) {
                    let mut g = self.grads[a.0].take().unwrap_or_else(|| vec![0.0; ar * ac]);
                    if !ta {
                        // dA = dC @ op(B)^T
                        gemm::sgemm(self.par, 1.0, &d_out, m, n, false, &self.nodes[b.0].value, br, bc, !tb, 1.0, &mut g);
                    } else {
                        // dA_storage = op(B) @ dC^T
                        gemm::sgemm(self.par, 1.0, &self.nodes[b.0].value, br, bc, tb, &d_out, m, n, true, 1.0, &mut g);
                    }
                    self.grads[a.0] = Some(g);
                }
                if self.needs(b) {
                    let mut g = self.grads[b.0].take().unwrap_or_else(|| vec![0.0; br * bc]);
                    if !tb {
                        // dB = op(A)^T @ dC
                        gemm::sgemm(self.par, 1.0, &self.nodes[a.0].value, ar, ac, !ta, &d_out, m, n, false, 1.0, &mut g);
                    } else {
                        // dB_storage = dC^T @ op(A)
                        gemm::sgemm(self.par, 1.0, &d_out, m, n, true, &self.nodes[a.0].value, ar, ac, ta, 1.0, &mut g);
                    }
                    self.grads[b.0] = Some(g);
                }
            }

            &Op::AddRowBias { x, b } => {
                let n = self.nodes[i].cols;
                if self.needs(x) {
                    accumulate(&mut self.grads, x.0, &d_out);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; n];
                    for row in d_out.chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut self.grads, b.0, &db);
                }
            }

            &Op::Relu { x } => {
                if self.needs(x) {
                    let dx: Vec<f32> = d_out
                        .iter()
                        .zip(&self.nodes[i].value)
                        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.grads, x.0, &dx);
                }
            }

            &Op::LstmStep { x, h, c, wx, wh, b, cell } => {
                self.backward_lstm(i, x, h, c, wx, wh, b, cell, &d_out);
            }

            &Op::LayerNorm { x, scale, shift } => {
                let (m, d) = (self.nodes[i].rows, self.nodes[i].cols);
                let xhat = &self.nodes[i].saved[..m * d];
                let rstd = &self.nodes[i].saved[m * d..];
                let scale_v = &self.nodes[scale.0].value;
                if self.needs(shift) {
                    let mut dshift = vec![0.0; d];
                    for row in d_out.chunks(d) {
                        for (s, &g) in dshift.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                    accumulate(&mut self.grads, shift.0, &dshift);
                }
                if self.needs(scale) {
                    let mut dscale = vec![0.0; d];
                    for (r, row) in d_out.chunks(d).enumerate() {
                        for j in 0..d {
                            dscale[j] += row[j] * xhat[r * d + j];
                        }
                    }
                    accumulate(&mut self.grads, scale.0, &dscale);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; m * d];
                    for r in 0..m {
                        let row = &d_out[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = row[j] * scale_v[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        mean_dxhat /= d as f32;
                        mean_dxhat_xhat /= d as f32;
                        for j in 0..d {
                            let dxh = row[j] * scale_v[j];
                            dx[r * d + j] =
                                rstd[r] * (dxh - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(&mut self.grads, x.0, &dx);
                }
            }

            &Op::MeanPoolRows { x, group } => {
                if self.needs(x) {
                    let d = self.nodes[i].cols;
                    let groups = self.nodes[i].rows;
                    let inv = 1.0 / group as f32;
                    let mut dx = vec![0.0; groups * group * d];
                    for g in 0..groups {
                        let src = &d_out[g * d..(g + 1) * d];
                        for e in 0..group {
                            let dst = &mut dx[(g * group + e) * d..(g * group + e + 1) * d];
                            for (o, &s) in dst.iter_mut().zip(src) {
                                *o = s * inv;
                            }
                        }
                    }
                    accumulate(&mut self.grads, x.0, &dx);
                }
            }

            &Op::RepeatRows { x, times } => {
                if self.needs(x) {
                    let d = self.nodes[i].cols;
                    let m = self.nodes[i].rows / times;
                    let mut dx = vec![0.0; m * d];
                    for r in 0..m {
                        for t in 0..times {
                            let src = &d_out[(r * times + t) * d..(r * times + t + 1) * d];
                            let dst = &mut dx[r * d..(r + 1) * d];
                            for (o, &s) in dst.iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    }
                    accumulate(&mut self.grads, x.0, &dx);
                }
            }

            &Op::ConcatCols { a, b } => {
                let m = self.nodes[i].rows;
                let da = self.nodes[a.0].cols;
                let db = self.nodes[b.0].cols;
                let d = da + db;
                if self.needs(a) {
                    let mut ga = vec![0.0; m * da];
                    for r in 0..m {
                        ga[r * da..(r + 1) * da].copy_from_slice(&d_out[r * d..r * d + da]);
                    }
                    accumulate(&mut self.grads, a.0, &ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; m * db];
                    for r in 0..m {
                        gb[r * db..(r + 1) * db].copy_from_slice(&d_out[r * d + da..(r + 1) * d]);
                    }
                    accumulate(&mut self.grads, b.0, &gb);
                }
            }

            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if self.needs(p) {
                        accumulate(&mut self.grads, p.0, &d_out[offset..offset + len]);
                    }
                    offset += len;
                }
            }

            &Op::Reshape { x } => {
                if self.needs(x) {
                    accumulate(&mut self.grads, x.0, &d_out);
                }
            }

            &Op::Add { a, b } => {
                if self.needs(a) {
                    accumulate(&mut self.grads, a.0, &d_out);
                }
                if self.needs(b) {
                    accumulate(&mut self.grads, b.0, &d_out);
                }
            }

            Op::MulData { x, coeffs } => {
                let x = *x;
                if self.needs(x) {
                    let dx: Vec<f32> = d_out.iter().zip(coeffs).map(|(&g, &c)| g * c).collect();
                    accumulate(&mut self.grads, x.0, &dx);
                }
            }

            Op::LogProbEntropy { logits, actions, mask, logp } => {
                let (logits, logp) = (*logits, *logp);
                if !self.needs(logits) {
                    return;
                }
                let (m, k) = self.shape(logits);
                let probs = &self.nodes[i].saved;
                let d_ent = &d_out;
                let zero = vec![0.0; m];
                let d_logp = self.grads[logp.0].as_deref().unwrap_or(&zero);
                let ent_vals = &self.nodes[i].value;
                let mut dz = vec![0.0; m * k];
                for r in 0..m {
                    let a = actions[r];
                    for j in 0..k {
                        if let Some(mk) = mask {
                            if !mk[r * k + j] {
                                continue;
                            }
                        }
                        let p = probs[r * k + j];
                        let mut g = d_logp[r] * ((j == a) as u8 as f32 - p);
                        if p > 0.0 {
                            g -= d_ent[r] * p * (p.max(f32::MIN_POSITIVE).ln() + ent_vals[r]);
                        }
                        dz[r * k + j] = g;
                    }
                }
                accumulate(&mut self.grads, logits.0, &dz);
            }

            Op::PpoLoss { logp, logp_old, adv, weight, clip } => {
                let logp = *logp;
                let clip = *clip;
                if !self.needs(logp) {
                    return;
                }
                let m = logp_old.len();
                let count: f32 = weight.iter().sum::<f32>().max(1.0);
                let scale = d_out[0] / count;
                let lp = &self.nodes[logp.0].value;
                let mut dlp = vec![0.0; m];
                for idx in 0..m {
                    let ratio = (lp[idx] - logp_old[idx]).exp();
                    let s1 = ratio * adv[idx];
                    let s2 = ratio.clamp(1.0 - clip, 1.0 + clip) * adv[idx];
                    // min picks the unclipped branch on ties, where the
                    // gradient is A * d(ratio)/d(logp) = A * ratio.
                    if s1 <= s2 {
                        dlp[idx] = -scale * weight[idx] * adv[idx] * ratio;
                    }
                }
                accumulate(&mut self.grads, logp.0, &dlp);
            }

            Op::MseLoss { v, target, weight } => {
                let v = *v;
                if !self.needs(v) {
                    return;
                }
                let count: f32 = weight.iter().sum::<f32>().max(1.0);
                let scale = d_out[0] / count;
                let dv: Vec<f32> = self.nodes[v.0]
                    .value
                    .iter()
                    .zip(target.iter().zip(weight))
                    .map(|(&vi, (&t, &w))| scale * 2.0 * w * (vi - t))
                    .collect();
                accumulate(&mut self.grads, v.0, &dv);
            }

            Op::MaskedMean { x, weight } => {
                let x = *x;
                if !self.needs(x) {
                    return;
                }
                let count: f32 = weight.iter().sum::<f32>().max(1.0);
                let scale = d_out[0] / count;
                let dx: Vec<f32> = weight.iter().map(|&w| scale * w).collect();
                accumulate(&mut self.grads, x.0, &dx);
            }

            Op::DotData { x, coeffs } => {
                let x = *x;
                if !self.needs(x) {
                    return;
                }
                let dx: Vec<f32> = coeffs.iter().map(|&c| d_out[0] * c).collect();
                accumulate(&mut self.grads, x.0, &dx);
            }

            Op::WeightedSum { terms } => {
                let terms = terms.clone();
                for (v, c) in terms {
                    if self.needs(v) {
                        accumulate(&mut self.grads, v.0, &[d_out[0] * c]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_lstm(
        &mut self,
        node: usize,
        x: Var,
        h: Var,
        c: Var,
        wx: Var,
        wh: Var,
        b: Var,
        cell: Var,
        d_h_next: &[f32],
    ) {
        let (m, hidden) = (self.nodes[node].rows, self.nodes[node].cols);
        let gate_dim = 4 * hidden;
        let gates = &self.nodes[node].saved;
        let c_next = &self.nodes[cell.0].value;
        let c_prev = &self.nodes[c.0].value;
        let zero;
        let d_c_next: &[f32] = match self.grads[cell.0].take() {
            Some(g) => {
                zero = g;
                &zero
            }
            None => {
                zero = vec![0.0; m * hidden];
                &zero
            }
        };

        let mut d_pre = vec![0.0; m * gate_dim];
        let mut d_c_prev = vec![0.0; m * hidden];
        for r in 0..m {
            for j in 0..hidden {
                let idx = r * hidden + j;
                let i_g = gates[r * gate_dim + j];
                let f_g = gates[r * gate_dim + hidden + j];
                let cand = gates[r * gate_dim + 2 * hidden + j];
                let o_g = gates[r * gate_dim + 3 * hidden + j];
                let tanh_c = c_next[idx].tanh();
                let dc_total = d_c_next[idx] + d_h_next[idx] * o_g * (1.0 - tanh_c * tanh_c);
                let d_o = d_h_next[idx] * tanh_c;
                d_pre[r * gate_dim + j] = dc_total * cand * i_g * (1.0 - i_g);
                d_pre[r * gate_dim + hidden + j] = dc_total * c_prev[idx] * f_g * (1.0 - f_g);
                d_pre[r * gate_dim + 2 * hidden + j] = dc_total * i_g * (1.0 - cand * cand);
                d_pre[r * gate_dim + 3 * hidden + j] = d_o * o_g * (1.0 - o_g);
                d_c_prev[idx] = dc_total * f_g;
            }
        }

        if self.needs(c) {
            accumulate(&mut self.grads, c.0, &d_c_prev);
        }
        if self.needs(b) {
            let mut db = vec![0.0; gate_dim];
            for row in d_pre.chunks(gate_dim) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            accumulate(&mut self.grads, b.0, &db);
        }
        if self.needs(x) {
            let (xr, xc) = self.shape(x);
            let mut g = self.grads[x.0].take().unwrap_or_else(|| vec![0.0; xr * xc]);
            let wx_v = &self.nodes[wx.0].value;
            gemm::sgemm(self.par, 1.0, &d_pre, m, gate_dim, false, wx_v, xc, gate_dim, true, 1.0, &mut g);
            self.grads[x.0] = Some(g);
        }
        if self.needs(h) {
            let mut g = self.grads[h.0].take().unwrap_or_else(|| vec![0.0; m * hidden]);
            let wh_v = &self.nodes[wh.0].value;
            gemm::sgemm(self.par, 1.0, &d_pre, m, gate_dim, false, wh_v, hidden, gate_dim, true, 1.0, &mut g);
            self.grads[h.0] = Some(g);
        }
        if self.needs(wx) {
            let (xr, xc) = self.shape(x);
            let mut g = self.grads[wx.0].take().unwrap_or_else(|| vec![0.0; xc * gate_dim]);
            let x_v = &self.nodes[x.0].value;
            gemm::sgemm(self.par, 1.0, x_v, xr, xc, true, &d_pre, m, gate_dim, false, 1.0, &mut g);
            self.grads[wx.0] = Some(g);
        }
        if self.needs(wh) {
            let mut g = self.grads[wh.0].take().unwrap_or_else(|| vec![0.0; hidden * gate_dim]);
            let h_v = &self.nodes[h.0].value;
            gemm::sgemm(self.par, 1.0, h_v, m, hidden, true, &d_pre, m, gate_dim, false, 1.0, &mut g);
            self.grads[wh.0] = Some(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new(Parallelism::Sequential);
        let x = tape.param(1, 4, vec![0.5, -1.0, 2.0, 3.0]);
        let loss = tape.dot_data(x, vec![1.0; 4]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_square_is_two_x() {
        let mut tape = Tape::new(Parallelism::Sequential);
        let x = tape.param(1, 1, vec![1.7]);
        // loss = (x - 0)^2
        let loss = tape.mse_loss(x, vec![0.0], vec![1.0]);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - 2.0 * 1.7).abs() < 1e-6);
    }

    #[test]
    fn constant_inputs_receive_no_gradient() {
        let mut tape = Tape::new(Parallelism::Sequential);
        let x = tape.input(1, 2, vec![1.0, 2.0]);
        let w = tape.param(2, 1, vec![3.0, 4.0]);
        let y = tape.matmul(x, false, w, false);
        let loss = tape.dot_data(y, vec![1.0]);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gradients_accumulate_across_consumers() {
        let mut tape = Tape::new(Parallelism::Sequential);
        let x = tape.param(1, 1, vec![3.0]);
        let a = tape.mul_data(x, vec![2.0]);
        let b = tape.mul_data(x, vec![5.0]);
        let s = tape.add(a, b);
        let loss = tape.dot_data(s, vec![1.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn non_finite_loss_is_a_divergence_error() {
        let mut tape = Tape::new(Parallelism::Sequential);
        let x = tape.param(1, 1, vec![f32::INFINITY]);
        let loss = tape.dot_data(x, vec![1.0]);
        assert!(matches!(tape.backward(loss), Err(Error::NumericalDivergence(_))));
    }

    #[test]
    fn ppo_clipped_sample_gets_zero_gradient() {
        // Positive advantage with ratio above 1 + clip: surrogate is clipped,
        // so the sample contributes no gradient.
        let mut tape = Tape::new(Parallelism::Sequential);
        let logp = tape.param(1, 1, vec![0.5]);
        let loss = tape.ppo_loss(logp, vec![0.0], vec![1.0], vec![1.0], 0.2);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(logp).unwrap(), &[0.0]);
        assert!(tape.ppo_stats(loss).clip_fraction > 0.99);
    }

    #[test]
    fn ppo_ratio_one_matches_unclipped_gradient() {
        // At ratio exactly 1 the clip is inactive; gradient is -A.
        let mut tape = Tape::new(Parallelism::Sequential);
        let logp = tape.param(1, 1, vec![-0.3]);
        let loss = tape.ppo_loss(logp, vec![-0.3], vec![2.5], vec![1.0], 0.2);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(logp).unwrap(), &[-2.5]);
        assert_eq!(tape.ppo_stats(loss).clip_fraction, 0.0);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        use rand::{Rng, SeedableRng};
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
            let mut tape = Tape::new(Parallelism::Sequential);
            let x_data: Vec<f32> = (0..6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w_data: Vec<f32> = (0..8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = tape.input(6, 8, x_data);
            let w = tape.param(8, 4, w_data);
            let b = tape.param(1, 4, vec![0.1, -0.2, 0.3, 0.0]);
            let y = tape.dense(x, w, b, Activation::Relu);
            tape.value(y).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())));
    }
}
