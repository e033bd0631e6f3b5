use serde::{Deserialize, Serialize};

use super::VehicleState;

/// Features per vehicle: x, y, v_x, v_y, cos θ, sin θ.
pub const FEATURES: usize = 6;
/// Neighbour slots in the observation matrix.
pub const MAX_NEIGHBORS: usize = 6;

/// Ego block in world coordinates plus a 6×N neighbour matrix, one column
/// per vehicle, holding positions and velocities relative to the ego and
/// the neighbour's absolute heading encoding. Unused columns are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ego: [f64; FEATURES],
    pub neighbors: [[f64; FEATURES]; MAX_NEIGHBORS],
    pub neighbor_count: usize,
    /// Vehicle id behind each filled column (diagnostic, not a feature).
    pub neighbor_ids: Vec<u32>,
}

impl Observation {
    /// Ego block followed by the neighbour columns.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FEATURES * (MAX_NEIGHBORS + 1));
        v.extend_from_slice(&self.ego);
        for col in &self.neighbors {
            v.extend_from_slice(col);
        }
        v
    }

    pub fn flat_dim() -> usize {
        FEATURES * (MAX_NEIGHBORS + 1)
    }

    pub(crate) fn build(ego: &VehicleState, others: &[&VehicleState], radius: f64) -> Self {
        let ev = ego.velocity();
        let mut candidates: Vec<(f64, &VehicleState)> = others
            .iter()
            .map(|o| ((o.x - ego.x).hypot(o.y - ego.y), *o))
            .filter(|(d, _)| *d <= radius)
            .collect();
        // Stable sort keeps id order for equal distances.
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        candidates.truncate(MAX_NEIGHBORS);

        let mut neighbors = [[0.0; FEATURES]; MAX_NEIGHBORS];
        let mut ids = Vec::with_capacity(candidates.len());
        for (col, (_, o)) in neighbors.iter_mut().zip(&candidates) {
            let ov = o.velocity();
            *col = [
                o.x - ego.x,
                o.y - ego.y,
                ov[0] - ev[0],
                ov[1] - ev[1],
                o.heading.cos(),
                o.heading.sin(),
            ];
            ids.push(o.id);
        }
        Self {
            ego: [
                ego.x,
                ego.y,
                ev[0],
                ev[1],
                ego.heading.cos(),
                ego.heading.sin(),
            ],
            neighbors,
            neighbor_count: candidates.len(),
            neighbor_ids: ids,
        }
    }

    pub fn ego_speed(&self) -> f64 {
        self.ego[2].hypot(self.ego[3])
    }

    pub fn ego_heading(&self) -> f64 {
        self.ego[5].atan2(self.ego[4])
    }

    /// World position and velocity of neighbour column `k`.
    pub fn neighbor_world(&self, k: usize) -> ([f64; 2], [f64; 2]) {
        let c = &self.neighbors[k];
        (
            [c[0] + self.ego[0], c[1] + self.ego[1]],
            [c[2] + self.ego[2], c[3] + self.ego[3]],
        )
    }
}
