//! Time-to-conflict-point (TTCP) estimates and the risk functional Ω.
//!
//! τ for a vehicle pair is the time of closest approach under constant
//! velocity extrapolation, reported only when the closest distance falls
//! inside the conflict radius. Ω for a step is
//! `max(1/τ_min, β·1{infraction})` with `1/∞ = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Maneuver, ScenarioState, StepOutcome, VehicleState};

/// τ values below this are clamped before inversion so Ω stays finite.
pub const TAU_FLOOR: f64 = 0.01;
/// Leading context kept before each flagged run.
pub const FLAG_PAD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskParams {
    pub beta: f64,
    pub delta: f64,
    pub conflict_radius: f64,
    pub horizon: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        Self {
            beta: 10.0,
            delta: 5.0,
            conflict_radius: 4.0,
            horizon: 6.0,
        }
    }
}

impl RiskParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("risk.beta", self.beta),
            ("risk.delta", self.delta),
            ("risk.conflict_radius", self.conflict_radius),
            ("risk.horizon", self.horizon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleConflict {
    pub id: u32,
    /// Seconds until the conflict point, `f64::INFINITY` when none.
    pub tau: f64,
    /// Distance at the (clamped) closest-approach time.
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConflictAssessment {
    pub per_vehicle: Vec<VehicleConflict>,
    pub tau_min: f64,
    pub risky: bool,
}

impl ConflictAssessment {
    pub fn tau_of(&self, id: u32) -> Option<f64> {
        self.per_vehicle.iter().find(|c| c.id == id).map(|c| c.tau)
    }
}

/// Closest approach of relative motion `dp + t·dv` on `[0, horizon]`.
/// Returns `(t*, distance at t*)`.
pub fn closest_approach(dp: [f64; 2], dv: [f64; 2], horizon: f64) -> (f64, f64) {
    let vv = dv[0] * dv[0] + dv[1] * dv[1];
    let t = if vv == 0.0 {
        0.0
    } else {
        (-(dp[0] * dv[0] + dp[1] * dv[1]) / vv).clamp(0.0, horizon)
    };
    let d = (dp[0] + t * dv[0]).hypot(dp[1] + t * dv[1]);
    (t, d)
}

fn conflict(ego: &VehicleState, other: &VehicleState, params: &RiskParams) -> (f64, f64) {
    let ev = ego.velocity();
    let ov = other.velocity();
    let dp = [other.x - ego.x, other.y - ego.y];
    let dv = [ov[0] - ev[0], ov[1] - ev[1]];
    let (t, d) = closest_approach(dp, dv, params.horizon);
    let tau = if d <= params.conflict_radius {
        t
    } else {
        f64::INFINITY
    };
    (tau, d)
}

pub fn ttcp(ego: &VehicleState, other: &VehicleState, params: &RiskParams) -> f64 {
    conflict(ego, other, params).0
}

pub fn assess(state: &ScenarioState, params: &RiskParams) -> ConflictAssessment {
    let ego = state.ego();
    let per_vehicle: Vec<VehicleConflict> = state
        .others()
        .iter()
        .map(|o| {
            let (tau, min_distance) = conflict(ego, o, params);
            VehicleConflict {
                id: o.id,
                tau,
                min_distance,
            }
        })
        .collect();
    let tau_min = per_vehicle
        .iter()
        .map(|c| c.tau)
        .fold(f64::INFINITY, f64::min);
    ConflictAssessment {
        per_vehicle,
        tau_min,
        risky: tau_min < params.horizon,
    }
}

/// Ω = max(1/max(τ, TAU_FLOOR), β·1{infraction}).
pub fn omega(tau_min: f64, infraction: bool, beta: f64) -> f64 {
    let inv = if tau_min.is_finite() {
        1.0 / tau_min.max(TAU_FLOOR)
    } else {
        0.0
    };
    let penalty = if infraction { beta } else { 0.0 };
    inv.max(penalty)
}

/// Ω of a transition that has already happened.
pub fn omega_of_outcome(outcome: &StepOutcome, params: &RiskParams) -> f64 {
    omega(outcome.info.tau_min, outcome.infraction(), params.beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEvaluation {
    pub omega: f64,
    pub tau_min: f64,
    pub infraction: bool,
}

/// Ω for taking `maneuver` from `state`, evaluated on a copy advanced by one
/// decision period. The input state is left untouched.
pub fn risk(state: &ScenarioState, maneuver: Maneuver, params: &RiskParams) -> RiskEvaluation {
    if state.is_terminal() {
        let a = assess(state, params);
        return RiskEvaluation {
            omega: omega(a.tau_min, false, params.beta),
            tau_min: a.tau_min,
            infraction: false,
        };
    }
    let mut probe = state.clone();
    probe.set_risk_params(*params);
    let out = probe
        .step(maneuver)
        .expect("non-terminal state accepts a step");
    RiskEvaluation {
        omega: omega_of_outcome(&out, params),
        tau_min: out.info.tau_min,
        infraction: out.infraction(),
    }
}

/// Inclusive index ranges covering each maximal run with Ω ≥ δ, each
/// extended by `FLAG_PAD` steps of leading context. Runs are not merged,
/// so padded ranges may overlap; see [`merge_ranges`].
pub fn flag_segments(omegas: &[f64], delta: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &w) in omegas.iter().enumerate() {
        match (w >= delta, start) {
            (true, None) => start = Some(t),
            (false, Some(k)) => {
                out.push((k.saturating_sub(FLAG_PAD), t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(k) = start {
        out.push((k.saturating_sub(FLAG_PAD), omegas.len() - 1));
    }
    out
}

/// Merges overlapping or adjacent inclusive ranges.
pub fn merge_ranges(ranges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut sorted = ranges.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (a, b) in sorted {
        match out.last_mut() {
            Some(last) if a <= last.1 + 1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Mean over decision steps of `min(τ_min, horizon)`.
pub fn delta_ttcp_metric(tau_mins: &[f64], horizon: f64) -> Result<f64> {
    if tau_mins.is_empty() {
        return Err(Error::Usage(
            "delta_ttcp_metric needs at least one decision step".into(),
        ));
    }
    Ok(tau_mins.iter().map(|t| t.min(horizon)).sum::<f64>() / tau_mins.len() as f64)
}
