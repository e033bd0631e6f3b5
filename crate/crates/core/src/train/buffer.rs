use crate::policy::{LossBatch, ACTIONS};

/// One stored decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub input: Vec<f64>,
    pub next_input: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Terminal event: no bootstrap past this step.
    pub done: bool,
    /// Episode boundary (terminal or cut at the end of a rollout).
    pub episode_end: bool,
    pub teacher_pi: Option<[f64; ACTIONS]>,
    pub teacher_action: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    items: Vec<Transition>,
    capacity: usize,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Vec::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(self.items.len() < self.capacity);
        self.items.push(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Marks the last transition as an episode boundary, e.g. when the
    /// rollout ends mid-episode.
    pub fn close_episode(&mut self) {
        if let Some(last) = self.items.last_mut() {
            last.episode_end = true;
        }
    }

    pub fn labelled(&self) -> usize {
        self.items.iter().filter(|t| t.teacher_pi.is_some()).count()
    }

    /// Gathers rows `idx` into a loss batch. `advantages`, `returns` and
    /// `next_values` are indexed like the buffer.
    pub fn batch(&self, idx: &[usize], advantages: &[f64], returns: &[f64], next_values: &[f64]) -> LossBatch {
        let mut b = LossBatch::default();
        let mut adv = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = &self.items[i];
            b.inputs.extend_from_slice(&t.input);
            b.actions.push(t.action);
            b.old_log_probs.push(t.log_prob);
            adv.push(advantages[i]);
            b.returns.push(returns[i]);
            b.rewards.push(t.reward);
            b.dones.push(t.done);
            b.next_values.push(next_values[i]);
            b.teacher_pi.push(t.teacher_pi);
            b.teacher_action.push(t.teacher_action);
        }
        b.advantages = normalize(&adv);
        b
    }
}

/// Zero mean, unit variance; a constant vector maps to zeros.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    if x.is_empty() {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    x.iter().map(|v| (v - mean) / (sd + 1e-8)).collect()
}

/// Generalised advantage estimation over a buffer that may contain several
/// episodes. `next_values[t]` is V(s_{t+1}); it is ignored where `dones[t]`.
/// Returns (advantages, value targets).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    episode_ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        if episode_ends[t] {
            carry = 0.0;
        }
        let boot = if dones[t] { 0.0 } else { next_values[t] };
        let delta = rewards[t] + gamma * boot - values[t];
        carry = delta + gamma * lambda * carry;
        adv[t] = carry;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}
