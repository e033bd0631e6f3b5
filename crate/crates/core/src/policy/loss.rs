use serde::{Deserialize, Serialize};

use super::net::{FusionPolicyNet, ACTIONS};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph};

/// Teacher probabilities are floored here before the KL is taken.
pub const TEACHER_PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub c_v: f64,
    pub c_d: f64,
    pub c_e: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub clip: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            c_v: 0.5,
            c_d: 1.0,
            c_e: 0.01,
            lambda: 10.0,
            sigma: 0.1,
            clip: 0.2,
            gamma: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub distill_loss: f64,
    pub kl_value: f64,
    pub kl_penalty: f64,
    pub entropy: f64,
    pub total: f64,
}

/// One minibatch in row-major layout. `teacher_pi[i]` is set on rows where
/// the teacher was consulted; `teacher_action[i]` likewise.
#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    pub inputs: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Target-network values of the successor states.
    pub next_values: Vec<f64>,
    pub teacher_pi: Vec<Option<[f64; ACTIONS]>>,
    pub teacher_action: Vec<Option<usize>>,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// 1 − ε on the chosen action, ε/(n−1) elsewhere.
pub fn smoothed_one_hot(action: usize, eps: f64) -> [f64; ACTIONS] {
    let mut p = [eps / (ACTIONS - 1) as f64; ACTIONS];
    p[action] = 1.0 - eps;
    p
}

fn floored(q: &[f64]) -> Vec<f64> {
    let c: Vec<f64> = q.iter().map(|v| v.max(TEACHER_PROB_FLOOR)).collect();
    let s: f64 = c.iter().sum();
    c.into_iter().map(|v| v / s).collect()
}

/// KL(p ‖ q) with `q` floored and renormalised; 0·log 0 = 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let q = floored(q);
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// λ·max(0, kl − σ)².
pub fn kl_penalty(kl: f64, sigma: f64, lambda: f64) -> f64 {
    lambda * (kl - sigma).max(0.0).powi(2)
}

/// Clipped surrogate from probability ratios and advantages.
pub fn ppo_policy_loss(ratios: &[f64], advantages: &[f64], clip: f64) -> f64 {
    let n = ratios.len().max(1) as f64;
    -ratios
        .iter()
        .zip(advantages)
        .map(|(r, a)| (r * a).min(r.clamp(1.0 - clip, 1.0 + clip) * a))
        .sum::<f64>()
        / n
}

/// Mean squared Bellman error against r + γ·V_g(s′)·(1 − done).
pub fn value_loss(
    predicted: &[f64],
    rewards: &[f64],
    next_values: &[f64],
    dones: &[bool],
    gamma: f64,
) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Usage("value loss on an empty batch".into()));
    }
    let s: f64 = predicted
        .iter()
        .zip(bellman_targets(rewards, next_values, dones, gamma))
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok(s / predicted.len() as f64)
}

pub fn bellman_targets(rewards: &[f64], next_values: &[f64], dones: &[bool], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(next_values)
        .zip(dones)
        .map(|((r, v), d)| if *d { *r } else { r + gamma * v })
        .collect()
}

/// Mean negative log-likelihood of demonstrated actions; 0 when empty.
pub fn distill_loss(probs_of_demo_actions: &[f64]) -> f64 {
    if probs_of_demo_actions.is_empty() {
        return 0.0;
    }
    -probs_of_demo_actions.iter().map(|p| p.ln()).sum::<f64>() / probs_of_demo_actions.len() as f64
}

/// Combines precomputed components. `report.total` is overwritten.
pub fn total_loss(components: LossReport, w: &LossWeights) -> LossReport {
    LossReport {
        total: components.policy_loss + w.c_v * components.value_loss + w.c_d * components.distill_loss
            + components.kl_penalty
            - w.c_e * components.entropy,
        ..components
    }
}

/// Builds the full student objective on a tape and returns its gradients.
pub fn loss_and_grads(
    net: &FusionPolicyNet,
    batch: &LossBatch,
    w: &LossWeights,
) -> Result<(LossReport, Gradients)> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::Usage("loss on an empty batch".into()));
    }
    let mut g = Graph::new(net.store());
    let x = g.input(m, net.config().input_dim, batch.inputs.clone())?;
    let f = net.forward_graph(&mut g, x)?;

    // Clipped surrogate.
    let logp_a = g.gather(f.log_pi, &batch.actions)?;
    let old = g.input(m, 1, batch.old_log_probs.clone())?;
    let adv = g.input(m, 1, batch.advantages.clone())?;
    let diff = g.sub(logp_a, old)?;
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - w.clip, 1.0 + w.clip);
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr = g.mean(surr);
    let policy = g.scale(surr, -1.0);

    // Critic: V against λ-returns, Q̃(s,a) against the one-step target.
    let ret = g.input(m, 1, batch.returns.clone())?;
    let dv = g.sub(f.v, ret)?;
    let dv = g.square(dv);
    let v_loss = g.mean(dv);
    let targets = bellman_targets(&batch.rewards, &batch.next_values, &batch.dones, w.gamma);
    let q_a = g.gather(f.q, &batch.actions)?;
    let tq = g.input(m, 1, targets)?;
    let dq = g.sub(q_a, tq)?;
    let dq = g.square(dq);
    let q_loss = g.mean(dq);
    let value = g.add(v_loss, q_loss)?;

    // Entropy.
    let plp = g.mul(f.pi, f.log_pi)?;
    let neg_h = g.sum_rows(plp);
    let neg_h = g.mean(neg_h);
    let entropy = g.scale(neg_h, -1.0);

    let mut total = g.scale(value, w.c_v);
    total = g.add(policy, total)?;
    let ent_term = g.scale(entropy, -w.c_e);
    total = g.add(total, ent_term)?;

    // KL(π̃ ‖ π^T) over teacher-labelled rows, squared hinge at σ.
    let labelled: Vec<usize> = (0..m).filter(|&i| batch.teacher_pi[i].is_some()).collect();
    let (mut kl_value, mut kl_pen) = (0.0, 0.0);
    if !labelled.is_empty() && w.lambda != 0.0 {
        let log_t: Vec<f64> = labelled
            .iter()
            .flat_map(|&i| floored(&batch.teacher_pi[i].expect("labelled")))
            .map(f64::ln)
            .collect();
        let pi_l = g.select_rows(f.pi, &labelled)?;
        let lp_l = g.select_rows(f.log_pi, &labelled)?;
        let lt = g.input(labelled.len(), ACTIONS, log_t)?;
        let d = g.sub(lp_l, lt)?;
        let terms = g.mul(pi_l, d)?;
        let rows = g.sum_rows(terms);
        let kl = g.mean(rows);
        let excess = g.add_scalar(kl, -w.sigma);
        let excess = g.relu(excess);
        let sq = g.square(excess);
        let pen = g.scale(sq, w.lambda);
        kl_value = g.scalar(kl);
        kl_pen = g.scalar(pen);
        total = g.add(total, pen)?;
    } else if !labelled.is_empty() {
        kl_value = labelled
            .iter()
            .map(|&i| {
                let p = &g.value(f.pi)[i * ACTIONS..(i + 1) * ACTIONS];
                kl_divergence(p, &batch.teacher_pi[i].expect("labelled"))
            })
            .sum::<f64>()
            / labelled.len() as f64;
    }

    // Distillation of the teacher head on demonstrated actions.
    let demos: Vec<usize> = (0..m).filter(|&i| batch.teacher_action[i].is_some()).collect();
    let mut distill = 0.0;
    if let (Some(t_lp), false) = (f.teacher_log_pi, demos.is_empty()) {
        let acts: Vec<usize> = demos.iter().map(|&i| batch.teacher_action[i].expect("demo")).collect();
        let rows = g.select_rows(t_lp, &demos)?;
        let picked = g.gather(rows, &acts)?;
        let nll = g.mean(picked);
        let nll = g.scale(nll, -1.0);
        distill = g.scalar(nll);
        if w.c_d != 0.0 {
            let term = g.scale(nll, w.c_d);
            total = g.add(total, term)?;
        }
    }

    let report = LossReport {
        policy_loss: g.scalar(policy),
        value_loss: g.scalar(value),
        distill_loss: distill,
        kl_value,
        kl_penalty: kl_pen,
        entropy: g.scalar(entropy),
        total: g.scalar(total),
    };
    let grads = g.backward(total)?;
    Ok((report, grads))
}
