use serde::{Deserialize, Serialize};

use crate::risk::ConflictAssessment;
use crate::sim::{Observation, MAX_NEIGHBORS};

/// Ego block (x, y, v_x, v_y, cos θ, sin θ), then relative (x, y, v_x, v_y)
/// per neighbour slot, then τ per slot.
pub const STATE_DIM: usize = 6 + 4 * MAX_NEIGHBORS + MAX_NEIGHBORS;
const TAU_OFFSET: usize = 6 + 4 * MAX_NEIGHBORS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn neighbor_position(&self, k: usize) -> [f64; 2] {
        let o = 6 + 4 * k;
        [self.0[o], self.0[o + 1]]
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.0[TAU_OFFSET + k]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Deterministic encoding of one decision step. Infinite τ and empty slots
/// store `horizon`.
pub fn encode_state(obs: &Observation, assessment: &ConflictAssessment, horizon: f64) -> StateVector {
    let mut z = vec![0.0; STATE_DIM];
    z[..6].copy_from_slice(&obs.ego);
    for k in 0..obs.neighbor_count {
        let col = &obs.neighbors[k];
        z[6 + 4 * k..6 + 4 * k + 4].copy_from_slice(&col[..4]);
    }
    for k in 0..MAX_NEIGHBORS {
        let tau = obs
            .neighbor_ids
            .get(k)
            .and_then(|id| assessment.tau_of(*id))
            .unwrap_or(f64::INFINITY);
        z[TAU_OFFSET + k] = tau.min(horizon);
    }
    StateVector(z)
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::{assess, RiskParams};
    use crate::sim::{ScenarioConfig, ScenarioKind, ScenarioState};

    #[test]
    fn empty_road_layout() {
        let mut c = ScenarioConfig::preset(ScenarioKind::Highway);
        c.n_background = 0;
        let (s, obs) = ScenarioState::reset(&c, 0).unwrap();
        let p = RiskParams::default();
        let z = encode_state(&obs, &assess(&s, &p), p.horizon);
        assert_eq!(z.0.len(), 36);
        assert_eq!(&z.0[..6], &obs.ego);
        assert!(z.0[6..TAU_OFFSET].iter().all(|v| *v == 0.0));
        assert!(z.0[TAU_OFFSET..].iter().all(|v| *v == p.horizon));
    }

    #[test]
    fn positions_decode_from_layout() {
        let c = ScenarioConfig::preset(ScenarioKind::Highway);
        let (s, obs) = ScenarioState::reset(&c, 5).unwrap();
        let p = RiskParams::default();
        let a = assess(&s, &p);
        let z = encode_state(&obs, &a, p.horizon);
        assert_eq!(z, encode_state(&obs, &a, p.horizon));
        for k in 0..obs.neighbor_count {
            assert_eq!(z.neighbor_position(k), [obs.neighbors[k][0], obs.neighbors[k][1]]);
        }
    }

    #[test]
    fn cosine_conventions() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((cosine(&[2.0, 1.0], &[2.0, 1.0]) - 1.0).abs() < 1e-15);
    }
}
