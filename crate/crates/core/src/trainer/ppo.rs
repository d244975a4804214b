//! Clipped-surrogate PPO update over BPTT chunk minibatches.

use crate::envs::ObsLayout;
use crate::error::Result;
use crate::parallel::Parallelism;
use crate::policy::{forward_taped, head_arity, EntityNet, TapedNet};
use crate::tensor::optim::{clip_grad_norm, OptimizerState};
use crate::tensor::tape::Tape;

use super::normalizer::ObsNormalizer;
use super::rollout::RolloutBuffer;
use super::TrainConfig;

#[derive(Debug, Clone, Copy, Default)]
pub struct MinibatchStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

/// One SGD step on a minibatch of chunk indices: forward both networks
/// through the chunk, assemble the composite loss, backpropagate, clip the
/// joint gradient norm, and apply the optimizers. The observation
/// normalizer folds in this minibatch's raw features afterwards, so the
/// statistics used to compute the loss are the ones that were current when
/// the step began.
#[allow(clippy::too_many_arguments)]
pub fn ppo_minibatch_step(
    buffer: &RolloutBuffer,
    idxs: &[usize],
    policy: &mut EntityNet,
    value: &mut EntityNet,
    opt_policy: &mut OptimizerState,
    opt_value: &mut OptimizerState,
    normalizer: &mut ObsNormalizer,
    layout: ObsLayout,
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<MinibatchStats> {
    let m = idxs.len();
    let bptt = buffer.bptt;
    let n_heads = policy.heads.len();
    let n_ent = layout.n_entities;
    let hidden = policy.hidden;

    // Time-major assembly. Raw features are normalized with the statistics
    // as they stand right now.
    let mut x_pol: Vec<Vec<f32>> = Vec::with_capacity(bptt);
    let mut x_val: Vec<Vec<f32>> = Vec::with_capacity(bptt);
    let mut actions_per_head: Vec<Vec<Vec<usize>>> = vec![Vec::with_capacity(bptt); n_heads];
    let mut active_per_head: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(bptt); n_heads];
    let mut behavior_total: Vec<f32> = Vec::with_capacity(m * bptt);
    let mut adv: Vec<f32> = Vec::with_capacity(m * bptt);
    let mut targets: Vec<f32> = Vec::with_capacity(m * bptt);
    let mut valid: Vec<f32> = Vec::with_capacity(m * bptt);
    let mut h0 = Vec::with_capacity(m * hidden);
    let mut c0 = Vec::with_capacity(m * hidden);
    let mut vh0 = Vec::with_capacity(m * hidden);
    let mut vc0 = Vec::with_capacity(m * hidden);

    for &i in idxs {
        let ch = &buffer.chunks[i];
        h0.extend_from_slice(&ch.policy_h0);
        c0.extend_from_slice(&ch.policy_c0);
        vh0.extend_from_slice(&ch.value_h0);
        vc0.extend_from_slice(&ch.value_c0);
    }

    for t in 0..bptt {
        let mut xp = Vec::with_capacity(m * n_ent * layout.policy_in_dim());
        let mut xv = Vec::with_capacity(m * n_ent * layout.value_in_dim());
        let mut acts: Vec<Vec<usize>> = vec![Vec::with_capacity(m); n_heads];
        let mut act_mask: Vec<Vec<f32>> = vec![Vec::with_capacity(m); n_heads];
        for &i in idxs {
            let ch = &buffer.chunks[i];
            // Normalize blocks for this step.
            let mut self_n =
                ch.obs_self[t * layout.self_dim..(t + 1) * layout.self_dim].to_vec();
            normalizer.self_block.normalize_rows(&mut self_n, layout.self_dim);
            let ew = n_ent * layout.entity_dim;
            let mut ent_n = ch.obs_entity[t * ew..(t + 1) * ew].to_vec();
            normalizer.entity_block.normalize_rows(&mut ent_n, layout.entity_dim);
            let mut vself_n = ch.obs_value_self
                [t * layout.value_self_dim..(t + 1) * layout.value_self_dim]
                .to_vec();
            normalizer.value_self_block.normalize_rows(&mut vself_n, layout.value_self_dim);
            let vw = n_ent * layout.value_entity_dim;
            let mut vent_n = ch.obs_value_entity[t * vw..(t + 1) * vw].to_vec();
            normalizer.value_entity_block.normalize_rows(&mut vent_n, layout.value_entity_dim);

            for e in 0..n_ent {
                xp.extend_from_slice(&self_n);
                xp.extend_from_slice(
                    &ent_n[e * layout.entity_dim..(e + 1) * layout.entity_dim],
                );
                xv.extend_from_slice(&self_n);
                xv.extend_from_slice(&vself_n);
                xv.extend_from_slice(
                    &ent_n[e * layout.entity_dim..(e + 1) * layout.entity_dim],
                );
                xv.extend_from_slice(
                    &vent_n
                        [e * layout.value_entity_dim..(e + 1) * layout.value_entity_dim],
                );
            }

            let step_valid = ch.valid[t];
            let mut behavior = 0.0;
            for hi in 0..n_heads {
                let a = ch.actions[t * n_heads + hi] as usize;
                let head_on = ch.head_active[t * n_heads + hi] as u8 as f32;
                acts[hi].push(a);
                act_mask[hi].push(head_on * step_valid);
                behavior += head_on * ch.behavior_logp[t * n_heads + hi];
            }
            behavior_total.push(behavior);
            adv.push(ch.advantages[t]);
            targets.push(ch.value_targets[t]);
            valid.push(step_valid);
        }
        x_pol.push(xp);
        x_val.push(xv);
        for hi in 0..n_heads {
            actions_per_head[hi].push(std::mem::take(&mut acts[hi]));
            active_per_head[hi].push(std::mem::take(&mut act_mask[hi]));
        }
    }

    // Forward both networks through the chunk on one tape.
    let mut tape = Tape::new(par);
    let pol_vars = TapedNet::register(&mut tape, policy);
    let val_vars = TapedNet::register(&mut tape, value);
    let mut h = tape.input(m, hidden, h0);
    let mut c = tape.input(m, hidden, c0);
    let mut vh = tape.input(m, hidden, vh0);
    let mut vc = tape.input(m, hidden, vc0);

    let mut logp_steps = Vec::with_capacity(bptt);
    let mut ent_steps = Vec::with_capacity(bptt);
    let mut value_steps = Vec::with_capacity(bptt);
    for t in 0..bptt {
        let xp = tape.input(m * n_ent, layout.policy_in_dim(), std::mem::take(&mut x_pol[t]));
        let (heads, h1, c1) = forward_taped(&mut tape, policy, &pol_vars, xp, h, c, m);
        h = h1;
        c = c1;
        let mut logp_total = None;
        let mut ent_total = None;
        for hi in 0..n_heads {
            let arity = head_arity(policy.heads[hi], n_ent);
            if arity == 0 {
                continue;
            }
            let (logp, ent) =
                tape.logprob_entropy(heads[hi], actions_per_head[hi][t].clone(), None);
            let mask = active_per_head[hi][t].clone();
            let logp_m = tape.mul_data(logp, mask.clone());
            let ent_m = tape.mul_data(ent, mask);
            logp_total = Some(match logp_total {
                None => logp_m,
                Some(acc) => tape.add(acc, logp_m),
            });
            ent_total = Some(match ent_total {
                None => ent_m,
                Some(acc) => tape.add(acc, ent_m),
            });
        }
        logp_steps.push(logp_total.expect("at least one head"));
        ent_steps.push(ent_total.expect("at least one head"));

        let xv = tape.input(m * n_ent, layout.value_in_dim(), std::mem::take(&mut x_val[t]));
        let (vheads, vh1, vc1) = forward_taped(&mut tape, value, &val_vars, xv, vh, vc, m);
        vh = vh1;
        vc = vc1;
        value_steps.push(vheads[0]);
    }

    let logp_all = tape.concat_rows(&logp_steps);
    let ent_all = tape.concat_rows(&ent_steps);
    let v_all = tape.concat_rows(&value_steps);

    let ppo = tape.ppo_loss(logp_all, behavior_total, adv, valid.clone(), cfg.ppo_clip);
    let ent_mean = tape.masked_mean(ent_all, valid.clone());
    let vmse = tape.mse_loss(v_all, targets, valid);
    let loss = tape.weighted_sum(&[
        (ppo, 1.0),
        (ent_mean, -cfg.entropy_coef),
        (vmse, cfg.value_loss_coef),
    ]);
    tape.backward(loss)?;

    let stats_node = tape.ppo_stats(ppo);
    let mut grads_p = pol_vars.grads(&tape);
    let mut grads_v = val_vars.grads(&tape);

    // Joint norm clip across both networks.
    let mut all: Vec<Option<Vec<f32>>> = Vec::new();
    all.append(&mut grads_p);
    all.append(&mut grads_v);
    let norm = clip_grad_norm(&mut all, cfg.grad_clip);
    let grads_v = all.split_off(policy.params.len());
    let grads_p = all;

    opt_policy.apply(&mut policy.params, &grads_p);
    opt_value.apply(&mut value.params, &grads_v);

    // Fold this minibatch's raw (valid) observations into the running
    // normalizer statistics.
    update_normalizer(buffer, idxs, normalizer, layout);

    Ok(MinibatchStats {
        policy_loss: tape.value(ppo)[0] as f64,
        value_loss: tape.value(vmse)[0] as f64,
        entropy: tape.value(ent_mean)[0] as f64,
        clip_fraction: stats_node.clip_fraction as f64,
        approx_kl: stats_node.approx_kl as f64,
        grad_norm: norm as f64,
    })
}

fn update_normalizer(
    buffer: &RolloutBuffer,
    idxs: &[usize],
    normalizer: &mut ObsNormalizer,
    layout: ObsLayout,
) {
    let bptt = buffer.bptt;
    let mut self_rows = Vec::new();
    let mut ent_rows = Vec::new();
    let mut vself_rows = Vec::new();
    let mut vent_rows = Vec::new();
    for &i in idxs {
        let ch = &buffer.chunks[i];
        for t in 0..bptt.min(ch.len) {
            self_rows
                .extend_from_slice(&ch.obs_self[t * layout.self_dim..(t + 1) * layout.self_dim]);
            let ew = layout.n_entities * layout.entity_dim;
            ent_rows.extend_from_slice(&ch.obs_entity[t * ew..(t + 1) * ew]);
            vself_rows.extend_from_slice(
                &ch.obs_value_self[t * layout.value_self_dim..(t + 1) * layout.value_self_dim],
            );
            let vw = layout.n_entities * layout.value_entity_dim;
            vent_rows.extend_from_slice(&ch.obs_value_entity[t * vw..(t + 1) * vw]);
        }
    }
    normalizer.self_block.update_rows(&self_rows, layout.self_dim);
    normalizer.entity_block.update_rows(&ent_rows, layout.entity_dim);
    normalizer.value_self_block.update_rows(&vself_rows, layout.value_self_dim);
    normalizer.value_entity_block.update_rows(&vent_rows, layout.value_entity_dim);
}
