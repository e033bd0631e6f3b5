//! Deterministic kinematic traffic simulator.
//!
//! Three scenarios share one engine: an unprotected left turn at an
//! unsignalised intersection, an on-ramp merge, and a four-lane highway.
//! Background traffic follows IDM with MOBIL lane changes; the ego vehicle
//! executes one of five high-level maneuvers through a PD lateral / P
//! longitudinal controller on a kinematic bicycle model.

mod geometry;
mod idm;
mod observation;
mod scenario;
mod trace;

pub use geometry::{rectangles_overlap, Path, Projection};
pub use idm::{idm_accel, IdmAccel, EMERGENCY_DECEL};
pub use observation::{Observation, FEATURES, MAX_NEIGHBORS};
pub use scenario::{ScenarioState, StepInfo, StepOutcome};
pub use trace::{TraceRecord, TraceWriter, VehicleRecord};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANE_WIDTH: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Intersection,
    Merge,
    Highway,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::Intersection, Self::Merge, Self::Highway];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Intersection => "intersection",
            Self::Merge => "merge",
            Self::Highway => "highway",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "intersection" => Ok(Self::Intersection),
            "merge" => Ok(Self::Merge),
            "highway" => Ok(Self::Highway),
            other => Err(Error::config(
                "scenario.kind",
                format!("unknown scenario `{other}` (expected intersection|merge|highway)"),
            )),
        }
    }
}

/// The five high-level maneuvers, encoded 0..4 for the policy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    SlowDown = 0,
    Cruise = 1,
    SpeedUp = 2,
    TurnLeft = 3,
    TurnRight = 4,
}

impl Maneuver {
    pub const COUNT: usize = 5;
    pub const ALL: [Maneuver; 5] = [
        Self::SlowDown,
        Self::Cruise,
        Self::SpeedUp,
        Self::TurnLeft,
        Self::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            Self::SlowDown => "slow_down",
            Self::Cruise => "cruise",
            Self::SpeedUp => "speed_up",
            Self::TurnLeft => "turn_left",
            Self::TurnRight => "turn_right",
        }
    }

    /// Accepts the snake_case token plus a few spellings models tend to emit.
    pub fn parse_token(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "slowdown" | "decelerate" | "brake" => Some(Self::SlowDown),
            "cruise" | "idle" | "keep" | "maintain" => Some(Self::Cruise),
            "speedup" | "accelerate" | "faster" => Some(Self::SpeedUp),
            "turnleft" | "laneleft" | "left" => Some(Self::TurnLeft),
            "turnright" | "laneright" | "right" => Some(Self::TurnRight),
            _ => None,
        }
    }
}

impl fmt::Display for Maneuver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Conservative,
    Standard,
    Aggressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    pub name: ProfileName,
    pub desired_speed: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub min_gap: f64,
    pub politeness: f64,
    pub lane_change_accel_gain_threshold: f64,
}

impl DriverProfile {
    pub fn standard(kind: ScenarioKind) -> Self {
        let desired_speed = match kind {
            ScenarioKind::Intersection => 8.0,
            ScenarioKind::Merge | ScenarioKind::Highway => 25.0,
        };
        Self {
            name: ProfileName::Standard,
            desired_speed,
            time_headway: 1.5,
            max_accel: 1.5,
            comfort_decel: 2.0,
            min_gap: 2.0,
            politeness: 0.5,
            lane_change_accel_gain_threshold: 0.2,
        }
    }

    pub fn conservative(kind: ScenarioKind) -> Self {
        let s = Self::standard(kind);
        Self {
            name: ProfileName::Conservative,
            desired_speed: s.desired_speed * 0.8,
            max_accel: s.max_accel * 0.8,
            time_headway: s.time_headway + 0.5,
            ..s
        }
    }

    pub fn aggressive(kind: ScenarioKind) -> Self {
        let s = Self::standard(kind);
        Self {
            name: ProfileName::Aggressive,
            desired_speed: s.desired_speed * 1.2,
            max_accel: s.max_accel * 1.2,
            time_headway: s.time_headway - 0.5,
            ..s
        }
    }

    pub fn named(name: ProfileName, kind: ScenarioKind) -> Self {
        match name {
            ProfileName::Conservative => Self::conservative(kind),
            ProfileName::Standard => Self::standard(kind),
            ProfileName::Aggressive => Self::aggressive(kind),
        }
    }

    /// Ego limits: standard preferences with a firmer actuator envelope.
    pub fn ego(kind: ScenarioKind) -> Self {
        Self {
            max_accel: 3.0,
            comfort_decel: 5.0,
            ..Self::standard(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("desired_speed", self.desired_speed),
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfort_decel", self.comfort_decel),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("profile.{field}"), "must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.politeness) {
            return Err(Error::config("profile.politeness", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub heading: f64,
    pub lane: i32,
    pub length: f64,
    pub width: f64,
    pub profile: DriverProfile,
    pub is_ego: bool,
    /// Index into the scenario's path table.
    pub path: usize,
    pub target_lane: i32,
    pub target_speed: f64,
}

impl VehicleState {
    pub fn velocity(&self) -> [f64; 2] {
        [
            self.speed * self.heading.cos(),
            self.speed * self.heading.sin(),
        ]
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn wheelbase(&self) -> f64 {
        0.6 * self.length
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuccessRegion {
    /// Ego centre beyond `x`, laterally at or above `min_y`.
    PastX { x: f64, min_y: f64 },
    /// Ego centre beyond `y` on the exit road.
    PastY { y: f64 },
}

impl SuccessRegion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Self::PastX { x: gx, min_y } => x >= gx && y >= min_y,
            Self::PastY { y: gy } => y >= gy && x.abs() <= LANE_WIDTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_v: f64,
    pub w_c: f64,
    pub w_o: f64,
    pub w_s: f64,
    pub v_lo: f64,
    pub v_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n_background: usize,
    pub spawn_speed_mean: f64,
    pub spawn_speed_std: f64,
    pub disturbance_fraction: f64,
    pub dt_physics: f64,
    pub decision_period: f64,
    pub horizon: usize,
    pub success_region: SuccessRegion,
    pub seed: u64,
    pub ego_start_speed: f64,
    pub sensing_radius: f64,
    pub reward: RewardWeights,
}

impl ScenarioConfig {
    pub fn preset(kind: ScenarioKind) -> Self {
        let base_reward = RewardWeights {
            w_v: 0.4,
            w_c: 1.0,
            w_o: 1.0,
            w_s: 1.0,
            v_lo: 15.0,
            v_hi: 30.0,
        };
        let (n_background, mean, std, horizon, region, start, reward) = match kind {
            ScenarioKind::Intersection => (
                8,
                8.0,
                1.5,
                30,
                SuccessRegion::PastY { y: 30.0 },
                6.0,
                RewardWeights {
                    v_lo: 2.0,
                    v_hi: 10.0,
                    ..base_reward
                },
            ),
            ScenarioKind::Merge => (
                10,
                22.0,
                3.0,
                30,
                SuccessRegion::PastX {
                    x: 320.0,
                    min_y: -6.0,
                },
                16.0,
                base_reward,
            ),
            ScenarioKind::Highway => (
                20,
                22.0,
                3.0,
                40,
                SuccessRegion::PastX {
                    x: 700.0,
                    min_y: -14.0,
                },
                22.0,
                RewardWeights {
                    v_lo: 20.0,
                    ..base_reward
                },
            ),
        };
        Self {
            kind,
            n_background,
            spawn_speed_mean: mean,
            spawn_speed_std: std,
            disturbance_fraction: 0.15,
            dt_physics: 0.1,
            decision_period: 1.0,
            horizon,
            success_region: region,
            seed: 0,
            ego_start_speed: start,
            sensing_radius: 100.0,
            reward,
        }
    }

    /// Number of physics sub-steps per decision.
    pub fn substeps(&self) -> usize {
        (self.decision_period / self.dt_physics).round() as usize
    }

    pub fn disturbed_count(&self) -> usize {
        (self.disturbance_fraction * self.n_background as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.disturbance_fraction) {
            return Err(Error::config(
                "scenario.disturbance_fraction",
                "must lie in [0, 1]",
            ));
        }
        if !(self.dt_physics > 0.0) {
            return Err(Error::config("scenario.dt_physics", "must be > 0"));
        }
        let ratio = self.decision_period / self.dt_physics;
        if !(self.decision_period > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::config(
                "scenario.decision_period",
                "must be a positive integer multiple of dt_physics",
            ));
        }
        if self.horizon == 0 {
            return Err(Error::config("scenario.horizon", "must be > 0"));
        }
        if !(self.spawn_speed_mean > 0.0) {
            return Err(Error::config("scenario.spawn_speed_mean", "must be > 0"));
        }
        if !(self.spawn_speed_std >= 0.0) {
            return Err(Error::config("scenario.spawn_speed_std", "must be >= 0"));
        }
        if !(self.ego_start_speed >= 0.0) {
            return Err(Error::config("scenario.ego_start_speed", "must be >= 0"));
        }
        if !(self.sensing_radius > 0.0) {
            return Err(Error::config("scenario.sensing_radius", "must be > 0"));
        }
        if !(self.reward.v_hi > self.reward.v_lo) {
            return Err(Error::config("scenario.reward.v_hi", "must exceed v_lo"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Collision,
    OffRoad,
    Success,
    Timeout,
}

/// r = w_v·clip((v − v_lo)/(v_hi − v_lo), 0, 1) − w_c·1{collision} − w_o·1{off_road} + w_s·1{success}
pub fn reward(weights: &RewardWeights, ego_speed: f64, _maneuver: Maneuver, events: &[Event]) -> f64 {
    let speed_term =
        ((ego_speed - weights.v_lo) / (weights.v_hi - weights.v_lo)).clamp(0.0, 1.0);
    let has = |e: Event| if events.contains(&e) { 1.0 } else { 0.0 };
    weights.w_v * speed_term - weights.w_c * has(Event::Collision) - weights.w_o * has(Event::OffRoad)
        + weights.w_s * has(Event::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maneuver_encoding_is_stable() {
        for (i, m) in Maneuver::ALL.iter().enumerate() {
            assert_eq!(m.index(), i);
            assert_eq!(Maneuver::from_index(i), Some(*m));
            assert_eq!(Maneuver::parse_token(m.token()), Some(*m));
        }
        assert_eq!(Maneuver::from_index(5), None);
        assert_eq!(Maneuver::parse_token("SpeedUp"), Some(Maneuver::SpeedUp));
        assert_eq!(Maneuver::parse_token("jump"), None);
    }

    #[test]
    fn reward_at_top_speed_is_speed_weight() {
        let w = ScenarioConfig::preset(ScenarioKind::Highway).reward;
        assert_eq!(reward(&w, w.v_hi, Maneuver::Cruise, &[]), 0.4);
    }

    #[test]
    fn collision_reward_bounded_by_penalty() {
        let w = ScenarioConfig::preset(ScenarioKind::Merge).reward;
        for v in [0.0, 10.0, 25.0, 40.0] {
            assert!(reward(&w, v, Maneuver::SpeedUp, &[Event::Collision]) <= -1.0 + w.w_v);
        }
    }

    #[test]
    fn validate_names_offending_field() {
        let mut c = ScenarioConfig::preset(ScenarioKind::Merge);
        c.decision_period = 0.25 + 0.1;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("decision_period"), "{err}");
        let mut c = ScenarioConfig::preset(ScenarioKind::Merge);
        c.disturbance_fraction = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("disturbance_fraction"));
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn profiles_follow_scaling_rules() {
        let k = ScenarioKind::Highway;
        let (c, s, a) = (
            DriverProfile::conservative(k),
            DriverProfile::standard(k),
            DriverProfile::aggressive(k),
        );
        assert_eq!(c.desired_speed, 20.0);
        assert_eq!(a.desired_speed, 30.0);
        assert_eq!(c.time_headway, s.time_headway + 0.5);
        assert_eq!(a.time_headway, s.time_headway - 0.5);
        for p in [c, s, a] {
            p.validate().unwrap();
        }
    }
}
