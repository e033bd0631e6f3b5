use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::FusionPolicyNet;
use crate::risk::{self, RiskParams};
use crate::sim::{Event, ScenarioConfig, ScenarioState, TraceWriter};

/// Default evaluation seeds are `EVAL_SEED_BASE + i`, disjoint from training.
pub const EVAL_SEED_BASE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub success_rate: f64,
    pub eval_reward: f64,
    pub avg_speed: f64,
    pub delta_ttcp: f64,
    /// Mean forward-pass wall time per decision (s).
    pub decision_time: f64,
}

impl EvalReport {
    /// Equality on everything except the wall-clock column.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.step == other.step
            && self.success_rate == other.success_rate
            && self.eval_reward == other.eval_reward
            && self.avg_speed == other.avg_speed
            && self.delta_ttcp == other.delta_ttcp
    }
}

/// Greedy rollouts of `net` on seeds `seed_base..seed_base + episodes`.
/// When `trace` is set every decision step is appended to it.
pub fn evaluate(
    net: &FusionPolicyNet,
    scenario: &ScenarioConfig,
    risk_params: &RiskParams,
    episodes: usize,
    seed_base: u64,
    step: u64,
    mut trace: Option<&mut TraceWriter>,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let mut successes = 0usize;
    let mut ret_sum = 0.0;
    let mut speed_sum = 0.0;
    let mut speed_n = 0usize;
    let mut dttcp_sum = 0.0;
    let mut time_sum = 0.0;
    let mut decisions = 0usize;
    for i in 0..episodes {
        let (mut env, mut obs) = ScenarioState::reset(scenario, seed_base + i as u64)?;
        env.set_risk_params(*risk_params);
        let mut ret = 0.0;
        let mut taus = Vec::new();
        loop {
            let t0 = Instant::now();
            let out = net.forward_obs(&obs)?;
            time_sum += t0.elapsed().as_secs_f64();
            decisions += 1;
            let action = out.greedy();
            let record_before = trace.is_some().then(|| env.clone());
            let o = env.step(action)?;
            if let (Some(w), Some(before)) = (trace.as_deref_mut(), record_before) {
                w.write(&before.to_record(Some(action), Some(&o)))?;
            }
            ret += o.reward;
            speed_sum += env.ego().speed;
            speed_n += 1;
            taus.push(o.info.tau_min);
            if o.has(Event::Success) {
                successes += 1;
            }
            obs = o.observation;
            if o.done {
                break;
            }
        }
        ret_sum += ret;
        dttcp_sum += risk::delta_ttcp_metric(&taus, risk_params.horizon)?;
    }
    let n = episodes as f64;
    Ok(EvalReport {
        step,
        success_rate: successes as f64 / n,
        eval_reward: ret_sum / n,
        avg_speed: speed_sum / speed_n as f64,
        delta_ttcp: dttcp_sum / n,
        decision_time: (time_sum / decisions as f64).max(f64::MIN_POSITIVE),
    })
}
