use serde::{Deserialize, Serialize};

use super::constraint::{forbidden, ConstraintRule};
use crate::risk::ConflictAssessment;
use crate::sim::{
    idm_accel, wrap_angle, DriverProfile, Maneuver, Observation, ScenarioKind, ScenarioState,
    LANE_WIDTH,
};

const CONFLICT_TAU: f64 = 2.0;
const CLEAR_TAU: f64 = 4.0;
const SLOW_FRACTION: f64 = 0.8;
const CROSSING_ANGLE: f64 = std::f64::consts::PI / 6.0;
const GAP_SAFE_DECEL: f64 = 4.0;
const MIN_GAP: f64 = 2.0;
const SUBSTITUTES: [Maneuver; 5] = [
    Maneuver::Cruise,
    Maneuver::SlowDown,
    Maneuver::SpeedUp,
    Maneuver::TurnLeft,
    Maneuver::TurnRight,
];

/// Road facts the observation alone does not carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingContext {
    pub scenario: ScenarioKind,
    pub ego_lane: i32,
    pub goal_lane: Option<i32>,
    pub desired_speed: f64,
}

impl DrivingContext {
    pub fn from_state(state: &ScenarioState) -> Self {
        Self {
            scenario: state.kind(),
            ego_lane: state.ego().lane,
            goal_lane: state.goal_lane(),
            desired_speed: state.ego().profile.desired_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborDigest {
    pub id: u32,
    pub dx: f64,
    pub dy: f64,
    pub speed: f64,
    pub heading: f64,
    /// `None` when there is no conflict within the horizon.
    pub tau: Option<f64>,
}

/// Everything the rule cascade needs, in a form that survives a JSON
/// round trip through a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub driving: DrivingContext,
    pub ego_x: f64,
    pub ego_y: f64,
    pub ego_speed: f64,
    pub ego_heading: f64,
    pub tau_min: Option<f64>,
    pub neighbors: Vec<NeighborDigest>,
    #[serde(default)]
    pub constraints: Vec<ConstraintRule>,
}

fn finite(t: f64) -> Option<f64> {
    t.is_finite().then_some(t)
}

impl DecisionContext {
    pub fn new(
        obs: &Observation,
        assessment: &ConflictAssessment,
        driving: DrivingContext,
        constraints: &[ConstraintRule],
    ) -> Self {
        let neighbors = (0..obs.neighbor_count)
            .map(|k| {
                let c = &obs.neighbors[k];
                let (_, vel) = obs.neighbor_world(k);
                let id = obs.neighbor_ids[k];
                NeighborDigest {
                    id,
                    dx: c[0],
                    dy: c[1],
                    speed: vel[0].hypot(vel[1]),
                    heading: c[5].atan2(c[4]),
                    tau: assessment.tau_of(id).and_then(finite),
                }
            })
            .collect();
        Self {
            driving,
            ego_x: obs.ego[0],
            ego_y: obs.ego[1],
            ego_speed: obs.ego_speed(),
            ego_heading: obs.ego_heading(),
            tau_min: finite(assessment.tau_min),
            neighbors,
            constraints: constraints.to_vec(),
        }
    }

    pub fn tau_min_or_inf(&self) -> f64 {
        self.tau_min.unwrap_or(f64::INFINITY)
    }

    pub fn forbidden(&self) -> Vec<Maneuver> {
        forbidden(
            &self.constraints,
            self.driving.scenario,
            self.tau_min_or_inf(),
            self.ego_speed,
        )
    }

    fn is_ahead(&self, n: &NeighborDigest) -> bool {
        n.dx * self.ego_heading.cos() + n.dy * self.ego_heading.sin() > 0.0
    }

    fn is_crossing(&self, n: &NeighborDigest) -> bool {
        wrap_angle(n.heading - self.ego_heading).abs() > CROSSING_ANGLE
    }

    /// IDM-style acceptance of the gap in `lane` on a straight road.
    /// Next lane change toward the goal lane: (maneuver, next lane, goal).
    fn lane_move(&self) -> Option<(Maneuver, i32, i32)> {
        let d = &self.driving;
        let goal = d.goal_lane.filter(|g| *g != d.ego_lane)?;
        Some(if goal < d.ego_lane {
            (Maneuver::TurnLeft, d.ego_lane - 1, goal)
        } else {
            (Maneuver::TurnRight, d.ego_lane + 1, goal)
        })
    }

    pub fn gap_is_safe(&self, lane: i32) -> bool {
        let profile = DriverProfile::standard(self.driving.scenario);
        let in_lane = |n: &&NeighborDigest| {
            (-(self.ego_y + n.dy) / LANE_WIDTH).round() as i32 == lane
        };
        let leader = self
            .neighbors
            .iter()
            .filter(in_lane)
            .filter(|n| n.dx >= 0.0)
            .min_by(|a, b| a.dx.total_cmp(&b.dx));
        let follower = self
            .neighbors
            .iter()
            .filter(in_lane)
            .filter(|n| n.dx < 0.0)
            .max_by(|a, b| a.dx.total_cmp(&b.dx));
        if let Some(l) = leader {
            let gap = l.dx - 5.0;
            if gap < MIN_GAP || idm_accel(gap, self.ego_speed, l.speed, &profile).accel < -GAP_SAFE_DECEL {
                return false;
            }
        }
        if let Some(f) = follower {
            let gap = -f.dx - 5.0;
            if gap < MIN_GAP || idm_accel(gap, f.speed, self.ego_speed, &profile).accel < -GAP_SAFE_DECEL {
                return false;
            }
        }
        true
    }
}

/// Rule cascade; returns the maneuver and a one-line rationale.
pub fn decide_from_context(dc: &DecisionContext) -> (Maneuver, String) {
    let tau_min = dc.tau_min_or_inf();
    let d = &dc.driving;
    let conflict = dc
        .neighbors
        .iter()
        .filter(|n| n.tau.is_some_and(|t| t < CONFLICT_TAU))
        .find(|n| dc.is_ahead(n) || dc.is_crossing(n));
    let (choice, why) = if let Some(n) = conflict {
        (
            Maneuver::SlowDown,
            format!(
                "vehicle {} conflicts in {:.2} s, yield",
                n.id,
                n.tau.unwrap_or(tau_min)
            ),
        )
    } else if let Some((m, next, goal)) = dc.lane_move().filter(|(_, next, _)| dc.gap_is_safe(*next)) {
        (m, format!("gap in lane {next} is safe, move toward lane {goal}"))
    } else if dc.ego_speed < SLOW_FRACTION * d.desired_speed && tau_min > CLEAR_TAU {
        (
            Maneuver::SpeedUp,
            format!("speed {:.1} m/s below target and no near conflict", dc.ego_speed),
        )
    } else if let Some((_, next, _)) = dc.lane_move() {
        (Maneuver::Cruise, format!("waiting for a gap in lane {next}"))
    } else {
        (Maneuver::Cruise, "no conflict, keep speed".to_string())
    };

    let banned = dc.forbidden();
    if !banned.contains(&choice) {
        return (choice, why);
    }
    let alt = SUBSTITUTES
        .iter()
        .copied()
        .find(|m| !banned.contains(m))
        .unwrap_or(Maneuver::SlowDown);
    (alt, format!("{why}; {choice} is forbidden by an active constraint"))
}

pub fn scripted_decide(
    obs: &Observation,
    assessment: &ConflictAssessment,
    driving: DrivingContext,
    constraints: &[ConstraintRule],
) -> Maneuver {
    decide_from_context(&DecisionContext::new(obs, assessment, driving, constraints)).0
}
