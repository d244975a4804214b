//! Entity-invariant recurrent policy and omniscient value network.
//!
//! Both networks share one architecture: the agent's own features are
//! concatenated with each other agent's features, every such row goes
//! through a shared two-layer embedding, the embeddings are mean-pooled
//! across entities into a fixed-size vector, and that vector passes through
//! one more dense layer, an LSTM step, and layer normalization before the
//! heads. Mean pooling makes every scalar head invariant to entity order;
//! entity-attention heads concatenate the post-layernorm trunk onto each
//! entity embedding and score them with a shared 1-output MLP, which makes
//! them equivariant instead.
//!
//! The policy and value networks never share parameters. The value network
//! consumes the same observation plus omniscient extras (the true
//! preference matrix and other agents' noisy views), and its single scalar
//! head estimates the value.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::HeadSpec;
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::tensor::ops::{self, Activation};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// Output heads a network can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Categorical(usize),
    /// One logit per entity via the shared attention scorer.
    Entity,
    /// Single linear output (value estimate).
    Scalar,
}

impl HeadKind {
    pub fn from_spec(spec: HeadSpec) -> Self {
        match spec {
            HeadSpec::Categorical(k) => HeadKind::Categorical(k),
            HeadSpec::Entity => HeadKind::Entity,
        }
    }
}

/// One recurrent entity-invariant network: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct EntityNet {
    pub hidden: usize,
    pub in_dim: usize,
    pub n_entities: usize,
    pub heads: Vec<HeadKind>,
    pub params: ParamSet,
}

/// Per-agent recurrent state, reset to zeros at episode start.
#[derive(Debug, Clone)]
pub struct RecurrentState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl RecurrentState {
    pub fn zeros(hidden: usize) -> Self {
        RecurrentState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

pub const DEFAULT_HIDDEN: usize = 128;

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data)
}

impl EntityNet {
    /// Fresh network with Glorot-uniform weights, zero biases, identity
    /// layer norm.
    pub fn init(
        in_dim: usize,
        n_entities: usize,
        hidden: usize,
        heads: Vec<HeadKind>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = ParamSet::new();
        p.insert("embed1/w", glorot(in_dim, hidden, rng));
        p.insert("embed1/b", Tensor::zeros(vec![hidden]));
        p.insert("embed2/w", glorot(hidden, hidden, rng));
        p.insert("embed2/b", Tensor::zeros(vec![hidden]));
        p.insert("trunk/w", glorot(hidden, hidden, rng));
        p.insert("trunk/b", Tensor::zeros(vec![hidden]));
        p.insert("lstm/wx", glorot(hidden, 4 * hidden, rng));
        p.insert("lstm/wh", glorot(hidden, 4 * hidden, rng));
        p.insert("lstm/b", Tensor::zeros(vec![4 * hidden]));
        p.insert("ln/scale", Tensor::full(vec![hidden], 1.0));
        p.insert("ln/shift", Tensor::zeros(vec![hidden]));
        let mut need_scorer = false;
        for (i, head) in heads.iter().enumerate() {
            match head {
                HeadKind::Categorical(k) => {
                    p.insert(format!("head{i}/w"), glorot(hidden, *k, rng));
                    p.insert(format!("head{i}/b"), Tensor::zeros(vec![*k]));
                }
                HeadKind::Scalar => {
                    p.insert(format!("head{i}/w"), glorot(hidden, 1, rng));
                    p.insert(format!("head{i}/b"), Tensor::zeros(vec![1]));
                }
                HeadKind::Entity => need_scorer = true,
            }
        }
        if need_scorer {
            p.insert("attn/w1", glorot(2 * hidden, hidden, rng));
            p.insert("attn/b1", Tensor::zeros(vec![hidden]));
            p.insert("attn/w2", glorot(hidden, 1, rng));
            p.insert("attn/b2", Tensor::zeros(vec![1]));
        }
        EntityNet { hidden, in_dim, n_entities, heads, params: p }
    }

    fn t(&self, name: &str) -> &[f32] {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).data()
    }
}

/// Batched forward pass output (no gradients).
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// Per head: `[batch, k]` logits (or `[batch, 1]` values for scalar
    /// heads).
    pub head_outputs: Vec<Vec<f32>>,
    pub h_next: Vec<f32>,
    pub c_next: Vec<f32>,
    /// Post-layernorm trunk activation, `[batch, hidden]`.
    pub trunk: Vec<f32>,
}

/// Forward pass over a batch without recording gradients.
///
/// `x_entities` is `[batch * n_entities, in_dim]` with each agent's entity
/// rows contiguous; `h`/`c` are `[batch, hidden]`.
pub fn forward(
    net: &EntityNet,
    par: Parallelism,
    x_entities: &[f32],
    h: &[f32],
    c: &[f32],
    batch: usize,
) -> Result<ForwardOut> {
    let (e_dim, hid) = (net.n_entities, net.hidden);
    if x_entities.len() != batch * e_dim * net.in_dim {
        return Err(Error::config(format!(
            "entity input is {} values, expected {} ({} rows of {})",
            x_entities.len(),
            batch * e_dim * net.in_dim,
            batch * e_dim,
            net.in_dim
        )));
    }
    let rows = batch * e_dim;
    let e1 = ops::dense_forward(
        par,
        x_entities,
        rows,
        net.in_dim,
        net.t("embed1/w"),
        net.t("embed1/b"),
        hid,
        Activation::Relu,
    );
    let e2 = ops::dense_forward(
        par,
        &e1,
        rows,
        hid,
        net.t("embed2/w"),
        net.t("embed2/b"),
        hid,
        Activation::Relu,
    );
    let pooled = ops::mean_pool_rows(&e2, batch, e_dim, hid);
    let trunk_in = ops::dense_forward(
        par,
        &pooled,
        batch,
        hid,
        net.t("trunk/w"),
        net.t("trunk/b"),
        hid,
        Activation::Relu,
    );
    let (h_next, c_next, _) = ops::lstm_forward(
        par,
        &trunk_in,
        batch,
        hid,
        h,
        c,
        net.t("lstm/wx"),
        net.t("lstm/wh"),
        net.t("lstm/b"),
        hid,
    );
    if h_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::divergence("non-finite recurrent state"));
    }
    let (trunk, _, _) =
        ops::layer_norm_forward(&h_next, batch, hid, net.t("ln/scale"), net.t("ln/shift"));

    let mut head_outputs = Vec::with_capacity(net.heads.len());
    for (i, head) in net.heads.iter().enumerate() {
        match head {
            HeadKind::Categorical(k) => {
                head_outputs.push(ops::dense_forward(
                    par,
                    &trunk,
                    batch,
                    hid,
                    net.t(&format!("head{i}/w")),
                    net.t(&format!("head{i}/b")),
                    *k,
                    Activation::Linear,
                ));
            }
            HeadKind::Scalar => {
                head_outputs.push(ops::dense_forward(
                    par,
                    &trunk,
                    batch,
                    hid,
                    net.t(&format!("head{i}/w")),
                    net.t(&format!("head{i}/b")),
                    1,
                    Activation::Linear,
                ));
            }
            HeadKind::Entity => {
                let rep = ops::repeat_rows(&trunk, batch, e_dim, hid);
                let cat = ops::concat_cols(&rep, &e2, rows, hid, hid);
                let a1 = ops::dense_forward(
                    par,
                    &cat,
                    rows,
                    2 * hid,
                    net.t("attn/w1"),
                    net.t("attn/b1"),
                    hid,
                    Activation::Relu,
                );
                let scores = ops::dense_forward(
                    par,
                    &a1,
                    rows,
                    hid,
                    net.t("attn/w2"),
                    net.t("attn/b2"),
                    1,
                    Activation::Linear,
                );
                // [batch * E, 1] read as [batch, E] logits.
                head_outputs.push(scores);
            }
        }
    }
    Ok(ForwardOut { head_outputs, h_next, c_next, trunk })
}

/// Parameter handles for one network registered on a tape.
pub struct TapedNet {
    vars: Vec<(String, Var)>,
}

impl TapedNet {
    /// Registers every parameter of `net` as a tape leaf.
    pub fn register(tape: &mut Tape, net: &EntityNet) -> Self {
        let vars = net
            .params
            .iter()
            .map(|(name, t)| {
                let (rows, cols) = if t.shape().len() >= 2 {
                    (t.shape()[0], t.shape()[1..].iter().product())
                } else {
                    (1, t.len())
                };
                (name.to_string(), tape.param(rows, cols, t.data().to_vec()))
            })
            .collect();
        TapedNet { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Gradients in parameter order, `None` where no gradient flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f32>>> {
        self.vars.iter().map(|(_, v)| tape.grad(*v).map(|g| g.to_vec())).collect()
    }
}

/// Taped forward step mirroring [`forward`]. Returns per-head output vars
/// plus the next recurrent state vars.
pub fn forward_taped(
    tape: &mut Tape,
    net: &EntityNet,
    vars: &TapedNet,
    x_entities: Var,
    h: Var,
    c: Var,
    batch: usize,
) -> (Vec<Var>, Var, Var) {
    let e_dim = net.n_entities;
    let e1 = tape.dense(x_entities, vars.var("embed1/w"), vars.var("embed1/b"), Activation::Relu);
    let e2 = tape.dense(e1, vars.var("embed2/w"), vars.var("embed2/b"), Activation::Relu);
    let pooled = tape.mean_pool_rows(e2, e_dim);
    let trunk_in = tape.dense(pooled, vars.var("trunk/w"), vars.var("trunk/b"), Activation::Relu);
    let (h_next, c_next) =
        tape.lstm_step(trunk_in, h, c, vars.var("lstm/wx"), vars.var("lstm/wh"), vars.var("lstm/b"));
    let trunk = tape.layer_norm(h_next, vars.var("ln/scale"), vars.var("ln/shift"));

    let mut heads = Vec::with_capacity(net.heads.len());
    for (i, head) in net.heads.iter().enumerate() {
        match head {
            HeadKind::Categorical(_) | HeadKind::Scalar => {
                let w = vars.var(&format!("head{i}/w"));
                let b = vars.var(&format!("head{i}/b"));
                heads.push(tape.dense(trunk, w, b, Activation::Linear));
            }
            HeadKind::Entity => {
                let rep = tape.repeat_rows(trunk, e_dim);
                let cat = tape.concat_cols(rep, e2);
                let a1 = tape.dense(cat, vars.var("attn/w1"), vars.var("attn/b1"), Activation::Relu);
                let scores =
                    tape.dense(a1, vars.var("attn/w2"), vars.var("attn/b2"), Activation::Linear);
                heads.push(tape.reshape(scores, batch, e_dim));
            }
        }
    }
    (heads, h_next, c_next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Argmax,
}

/// Arity of each sampled head: `k` for categoricals, the entity count for
/// attention heads. Scalar heads are not sampled.
pub fn head_arity(head: HeadKind, n_entities: usize) -> usize {
    match head {
        HeadKind::Categorical(k) => k,
        HeadKind::Entity => n_entities,
        HeadKind::Scalar => 0,
    }
}

/// Samples (or argmaxes) every head of one agent's forward output.
///
/// `head_logits[i]` is laid out `[batch, arity_i]` and `row` selects the
/// agent's row. Returns per-head action indices and log-probabilities.
/// Fails when a head's distribution has no valid entry.
pub fn select_actions(
    heads: &[HeadKind],
    n_entities: usize,
    head_logits: &[Vec<f32>],
    row: usize,
    masks: Option<&[Option<Vec<bool>>]>,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut actions = Vec::with_capacity(heads.len());
    let mut logps = Vec::with_capacity(heads.len());
    for (idx, head) in heads.iter().enumerate() {
        let k = head_arity(*head, n_entities);
        if k == 0 {
            continue;
        }
        let logits = &head_logits[idx][row * k..(row + 1) * k];
        let mask = masks.and_then(|m| m[idx].as_ref()).map(|m| &m[row * k..(row + 1) * k]);
        let mut probs = vec![0.0; k];
        if !ops::masked_softmax_row(logits, mask, &mut probs) {
            return Err(Error::InvalidActionSet(format!("head {idx}: every action masked")));
        }
        let a = match mode {
            ActMode::Argmax => ops::argmax_probs(&probs),
            ActMode::Sample => {
                let u: f32 = rng.gen();
                ops::sample_from_probs(&probs, u)
            }
        };
        actions.push(a);
        logps.push(probs[a].max(f32::MIN_POSITIVE).ln());
    }
    Ok((actions, logps))
}

/// Which heads contribute gradient for a chosen action combination.
///
/// Convention: an entity head is only trained on steps where the preceding
/// binary head chose to engage (action 0); its log-probability and entropy
/// are masked out otherwise, because those gradients would be pure noise.
pub fn head_activity(heads: &[HeadKind], actions: &[usize]) -> Vec<bool> {
    let engaged = match heads.first() {
        Some(HeadKind::Categorical(2)) if heads.len() > 1 => actions[0] == 0,
        _ => true,
    };
    heads
        .iter()
        .map(|h| match h {
            HeadKind::Entity => engaged,
            _ => true,
        })
        .collect()
}
