use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::{rectangles_overlap, Path};
use super::idm::{idm_accel, EMERGENCY_DECEL};
use super::observation::Observation;
use super::trace::{TraceRecord, VehicleRecord};
use super::{
    reward, wrap_angle, DriverProfile, Event, Maneuver, ProfileName, ScenarioConfig,
    ScenarioKind, VehicleState, LANE_WIDTH,
};
use crate::error::{Error, Result};
use crate::risk::{self, RiskParams};

pub(crate) const LAT_KP: f64 = 0.4;
pub(crate) const LAT_KD: f64 = 0.3;
pub(crate) const LON_KP: f64 = 0.5;
/// Target-speed change per SpeedUp / SlowDown decision (m/s).
pub const TARGET_SPEED_STEP: f64 = 2.0;
const MAX_STEER: f64 = 0.6;
const MOBIL_SAFE_DECEL: f64 = 4.0;
/// Longitudinal end of the merge acceleration lane (m).
pub const MERGE_RAMP_END: f64 = 200.0;
const VEHICLE_LENGTH: f64 = 5.0;
const VEHICLE_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Smallest ego-to-vehicle centre distance seen during the sub-steps.
    pub min_distance: f64,
    /// (vehicle id, τ) after the step; `f64::INFINITY` means no conflict.
    pub ttcp: Vec<(u32, f64)>,
    pub tau_min: f64,
    /// A follower had to emergency-brake behind the ego.
    pub emergency_clamp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub events: Vec<Event>,
    pub info: StepInfo,
}

impl StepOutcome {
    pub fn has(&self, e: Event) -> bool {
        self.events.contains(&e)
    }

    pub fn infraction(&self) -> bool {
        self.has(Event::Collision) || self.has(Event::OffRoad) || self.info.emergency_clamp
    }
}

/// Full kinematic ground truth for one episode. The ego is always vehicle 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioState {
    config: ScenarioConfig,
    paths: Vec<Path>,
    vehicles: Vec<VehicleState>,
    decision_step: usize,
    time: f64,
    terminal: bool,
    disturbed: Vec<u32>,
    risk: RiskParams,
}

fn ego_layout(kind: ScenarioKind) -> (Vec<Path>, f64, i32) {
    match kind {
        ScenarioKind::Highway => (
            vec![Path::Straight {
                origin: [0.0, 0.0],
                heading: 0.0,
            }],
            0.0,
            1,
        ),
        ScenarioKind::Merge => (
            vec![Path::Straight {
                origin: [0.0, 0.0],
                heading: 0.0,
            }],
            20.0,
            2,
        ),
        ScenarioKind::Intersection => (
            vec![
                Path::LeftTurn {
                    entry: [-4.0, -2.0],
                    heading: 0.0,
                    radius: 6.0,
                },
                // Westbound, northbound and southbound crossing traffic,
                // each with s = 0 at the intersection centre line.
                Path::Straight {
                    origin: [0.0, 2.0],
                    heading: PI,
                },
                Path::Straight {
                    origin: [2.0, 0.0],
                    heading: FRAC_PI_2,
                },
                Path::Straight {
                    origin: [-2.0, 0.0],
                    heading: -FRAC_PI_2,
                },
            ],
            -46.0,
            0,
        ),
    }
}

/// Candidate (path, lane, s) spawn slots for background traffic.
fn spawn_slots(kind: ScenarioKind, ego_s: f64, ego_lane: i32) -> Vec<(usize, i32, f64)> {
    let mut slots = Vec::new();
    match kind {
        ScenarioKind::Highway | ScenarioKind::Merge => {
            let lanes = if kind == ScenarioKind::Highway { 0..4 } else { 0..2 };
            let (lo, hi) = if kind == ScenarioKind::Highway {
                (-100.0, 400.0)
            } else {
                (-100.0, 350.0)
            };
            for lane in lanes {
                let mut s: f64 = lo;
                while s <= hi {
                    if !(lane == ego_lane && (s - ego_s).abs() < 20.0) {
                        slots.push((0, lane, s));
                    }
                    s += 25.0;
                }
            }
        }
        ScenarioKind::Intersection => {
            for path in 1..=3 {
                for k in 0..8 {
                    slots.push((path, 0, -15.0 - 15.0 * k as f64));
                }
            }
        }
    }
    slots
}

fn valid_background_lanes(kind: ScenarioKind) -> std::ops::RangeInclusive<i32> {
    match kind {
        ScenarioKind::Highway => 0..=3,
        ScenarioKind::Merge => 0..=1,
        ScenarioKind::Intersection => 0..=0,
    }
}

fn off_road(kind: ScenarioKind, x: f64, y: f64) -> bool {
    match kind {
        ScenarioKind::Highway => y > 2.0 || y < -14.0,
        ScenarioKind::Merge => {
            let lower = if x <= MERGE_RAMP_END { -10.0 } else { -6.0 };
            y > 2.0 || y < lower
        }
        ScenarioKind::Intersection => !(y.abs() <= LANE_WIDTH || x.abs() <= LANE_WIDTH),
    }
}

fn lane_of_offset(offset: f64) -> i32 {
    (-offset / LANE_WIDTH).round() as i32
}

fn sample_speed(rng: &mut ChaCha8Rng, mean: f64, std: f64, cap: f64) -> f64 {
    if std == 0.0 {
        return mean.clamp(0.0, cap);
    }
    let normal = Normal::new(mean, std).expect("std validated >= 0");
    for _ in 0..32 {
        let v = normal.sample(rng);
        if (0.0..=cap).contains(&v) {
            return v;
        }
    }
    mean.clamp(0.0, cap)
}

impl ScenarioState {
    /// Builds the initial state. Identical `(config, seed)` pairs give
    /// bit-identical states.
    pub fn reset(config: &ScenarioConfig, seed: u64) -> Result<(Self, Observation)> {
        config.validate()?;
        let kind = config.kind;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (paths, ego_s, ego_lane) = ego_layout(kind);

        let ego_profile = DriverProfile::ego(kind);
        let (pos, heading) = paths[0].point(ego_s, -LANE_WIDTH * ego_lane as f64);
        let mut vehicles = vec![VehicleState {
            id: 0,
            x: pos[0],
            y: pos[1],
            speed: config.ego_start_speed,
            heading,
            lane: ego_lane,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            profile: ego_profile,
            is_ego: true,
            path: 0,
            target_lane: ego_lane,
            target_speed: config.ego_start_speed,
        }];

        let mut slots = spawn_slots(kind, ego_s, ego_lane);
        if config.n_background > slots.len() {
            return Err(Error::config(
                "scenario.n_background",
                format!(
                    "{} vehicles requested but the {kind} layout has {} spawn slots",
                    config.n_background,
                    slots.len()
                ),
            ));
        }
        slots.shuffle(&mut rng);
        let names = [
            ProfileName::Conservative,
            ProfileName::Standard,
            ProfileName::Aggressive,
        ];
        for (i, &(path, lane, s)) in slots.iter().take(config.n_background).enumerate() {
            let profile = DriverProfile::named(names[rng.random_range(0..3)], kind);
            let jitter = rng.random_range(-4.0..=4.0);
            let speed = sample_speed(
                &mut rng,
                config.spawn_speed_mean,
                config.spawn_speed_std,
                1.5 * profile.desired_speed,
            );
            let (p, h) = paths[path].point(s + jitter, -LANE_WIDTH * lane as f64);
            vehicles.push(VehicleState {
                id: i as u32 + 1,
                x: p[0],
                y: p[1],
                speed,
                heading: h,
                lane,
                length: VEHICLE_LENGTH,
                width: VEHICLE_WIDTH,
                profile,
                is_ego: false,
                path,
                target_lane: lane,
                target_speed: profile.desired_speed,
            });
        }

        let mut idx: Vec<usize> = (1..vehicles.len()).collect();
        idx.shuffle(&mut rng);
        let mut disturbed: Vec<u32> = Vec::new();
        for &i in idx.iter().take(config.disturbed_count()) {
            let m = config.spawn_speed_mean;
            let v = rng.random_range(0.3 * m..=1.7 * m);
            let veh = &mut vehicles[i];
            veh.speed = v;
            // The deviation persists: the driver keeps the abnormal speed.
            veh.profile.desired_speed = v.max(1.0);
            veh.target_speed = veh.profile.desired_speed;
            disturbed.push(veh.id);
        }
        disturbed.sort_unstable();

        let state = Self {
            config: config.clone(),
            paths,
            vehicles,
            decision_step: 0,
            time: 0.0,
            terminal: false,
            disturbed,
            risk: RiskParams::default(),
        };
        let obs = state.observe();
        Ok((state, obs))
    }

    /// Rebuilds a state from a trace record (used for teacher dry-runs).
    pub fn from_record(config: &ScenarioConfig, record: &TraceRecord) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        let (paths, _, _) = ego_layout(kind);
        let mk = |r: &VehicleRecord, is_ego: bool| -> VehicleState {
            let path = if is_ego {
                0
            } else {
                infer_path(kind, r.heading)
            };
            let profile = if is_ego {
                DriverProfile::ego(kind)
            } else {
                DriverProfile::standard(kind)
            };
            VehicleState {
                id: r.id,
                x: r.x,
                y: r.y,
                speed: r.speed,
                heading: r.heading,
                lane: r.lane,
                length: r.length,
                width: r.width,
                profile,
                is_ego,
                path,
                target_lane: r.lane,
                target_speed: if is_ego { r.speed } else { profile.desired_speed },
            }
        };
        let mut vehicles = vec![mk(&record.ego, true)];
        vehicles.extend(record.neighbors.iter().map(|r| mk(r, false)));
        for v in &vehicles {
            if !(v.speed >= 0.0 && v.length > 0.0 && v.width > 0.0) {
                return Err(Error::parse(
                    "trace record",
                    format!("vehicle {} has invalid speed or dimensions", v.id),
                ));
            }
        }
        Ok(Self {
            config: config.clone(),
            paths,
            vehicles,
            decision_step: record.t,
            time: record.t as f64 * config.decision_period,
            terminal: false,
            disturbed: Vec::new(),
            risk: RiskParams::default(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn kind(&self) -> ScenarioKind {
        self.config.kind
    }

    pub fn ego(&self) -> &VehicleState {
        &self.vehicles[0]
    }

    pub fn others(&self) -> &[VehicleState] {
        &self.vehicles[1..]
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn decision_step(&self) -> usize {
        self.decision_step
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn disturbed_ids(&self) -> &[u32] {
        &self.disturbed
    }

    pub fn risk_params(&self) -> &RiskParams {
        &self.risk
    }

    pub fn set_risk_params(&mut self, params: RiskParams) {
        self.risk = params;
    }

    /// Places a background vehicle directly (tests and scripted setups).
    pub fn insert_vehicle(&mut self, mut v: VehicleState) -> u32 {
        v.id = self.vehicles.iter().map(|v| v.id).max().unwrap_or(0) + 1;
        v.is_ego = false;
        let id = v.id;
        self.vehicles.push(v);
        id
    }

    pub fn clear_background(&mut self) {
        self.vehicles.truncate(1);
        self.disturbed.clear();
    }

    pub fn ego_mut(&mut self) -> &mut VehicleState {
        &mut self.vehicles[0]
    }

    /// Lane the ego should reach to make progress, if any.
    pub fn goal_lane(&self) -> Option<i32> {
        match self.kind() {
            ScenarioKind::Merge if self.ego().lane >= 2 => Some(1),
            _ => None,
        }
    }

    pub fn observe(&self) -> Observation {
        let others: Vec<&VehicleState> = self.vehicles[1..].iter().collect();
        Observation::build(&self.vehicles[0], &others, self.config.sensing_radius)
    }

    fn lane_center(&self, lane: i32) -> f64 {
        -LANE_WIDTH * lane as f64
    }

    /// Nearest vehicle ahead of `i` in `lane` of its own path, as (gap, speed, index).
    fn leader_in_lane(&self, i: usize, lane: i32) -> Option<(f64, f64, usize)> {
        let me = &self.vehicles[i];
        let path = &self.paths[me.path];
        let pi = path.project(me.position());
        let center = self.lane_center(lane);
        let mut best: Option<(f64, f64, usize)> = None;
        for (j, o) in self.vehicles.iter().enumerate() {
            if j == i {
                continue;
            }
            let pj = path.project(o.position());
            if (pj.offset - center).abs() >= LANE_WIDTH / 2.0
                || pj.s <= pi.s
                || wrap_angle(o.heading - pj.heading).cos() < 0.3
            {
                continue;
            }
            let gap = pj.s - pi.s - (me.length + o.length) / 2.0;
            if best.map_or(true, |(g, _, _)| gap < g) {
                best = Some((gap, o.speed, j));
            }
        }
        best
    }

    /// Nearest vehicle behind arc length `s` in `lane` of `path`, skipping `skip`.
    fn follower_in_lane(&self, path_idx: usize, lane: i32, s: f64, skip: usize) -> Option<(f64, usize)> {
        let path = &self.paths[path_idx];
        let center = self.lane_center(lane);
        let mut best: Option<(f64, usize)> = None;
        for (j, o) in self.vehicles.iter().enumerate() {
            if j == skip {
                continue;
            }
            let pj = path.project(o.position());
            if (pj.offset - center).abs() >= LANE_WIDTH / 2.0
                || pj.s >= s
                || wrap_angle(o.heading - pj.heading).cos() < 0.3
            {
                continue;
            }
            let d = s - pj.s;
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        best
    }

    fn idm_for(&self, i: usize, leader: Option<(f64, f64, usize)>) -> f64 {
        let v = &self.vehicles[i];
        match leader {
            Some((gap, vl, _)) => idm_accel(gap, v.speed, vl, &v.profile).accel,
            None => idm_accel(f64::INFINITY, v.speed, 0.0, &v.profile).accel,
        }
    }

    /// MOBIL lane-change decisions for background vehicles on multi-lane roads.
    fn mobil_decisions(&mut self) {
        let lanes = valid_background_lanes(self.kind());
        if lanes.start() == lanes.end() {
            return;
        }
        let mut changes = Vec::new();
        for i in 1..self.vehicles.len() {
            let me = &self.vehicles[i];
            let path = self.paths[me.path];
            let pr = path.project(me.position());
            if me.lane != me.target_lane
                || (pr.offset - self.lane_center(me.lane)).abs() > 0.5
            {
                continue;
            }
            let s = pr.s;
            let p = me.profile;
            let old_lead = self.leader_in_lane(i, me.lane);
            let a_old = self.idm_for(i, old_lead);
            let old_follow = self.follower_in_lane(me.path, me.lane, s, i);
            let (of_gain_old, of_gain_new) = match old_follow {
                Some((d, f)) => {
                    let fv = &self.vehicles[f];
                    let gap_me = d - (fv.length + me.length) / 2.0;
                    let with_me = idm_accel(gap_me, fv.speed, me.speed, &fv.profile).accel;
                    let without = match old_lead {
                        Some((g, vl, _)) => {
                            let gap = g + d + me.length;
                            idm_accel(gap, fv.speed, vl, &fv.profile).accel
                        }
                        None => idm_accel(f64::INFINITY, fv.speed, 0.0, &fv.profile).accel,
                    };
                    (with_me, without)
                }
                None => (0.0, 0.0),
            };

            let mut best: Option<(f64, i32)> = None;
            for cand in [me.lane - 1, me.lane + 1] {
                if !lanes.contains(&cand) {
                    continue;
                }
                let lead = self.leader_in_lane(i, cand);
                if matches!(lead, Some((g, _, _)) if g <= 1.0) {
                    continue;
                }
                let a_new = self.idm_for(i, lead);
                let (nf_old, nf_new) = match self.follower_in_lane(me.path, cand, s, i) {
                    Some((d, f)) => {
                        let fv = &self.vehicles[f];
                        let gap_me = d - (fv.length + me.length) / 2.0;
                        if gap_me <= 1.0 {
                            continue;
                        }
                        let with_me = idm_accel(gap_me, fv.speed, me.speed, &fv.profile).accel;
                        if with_me < -MOBIL_SAFE_DECEL {
                            continue;
                        }
                        let before = match lead {
                            Some((g, vl, _)) => {
                                let gap = g + d + me.length;
                                idm_accel(gap, fv.speed, vl, &fv.profile).accel
                            }
                            None => {
                                idm_accel(f64::INFINITY, fv.speed, 0.0, &fv.profile).accel
                            }
                        };
                        (before, with_me)
                    }
                    None => (0.0, 0.0),
                };
                let incentive = a_new - a_old
                    + p.politeness * ((nf_new - nf_old) + (of_gain_new - of_gain_old));
                if incentive > p.lane_change_accel_gain_threshold
                    && best.map_or(true, |(b, _)| incentive > b)
                {
                    best = Some((incentive, cand));
                }
            }
            if let Some((_, lane)) = best {
                changes.push((i, lane));
            }
        }
        for (i, lane) in changes {
            self.vehicles[i].target_lane = lane;
        }
    }

    fn apply_maneuver(&mut self, maneuver: Maneuver) {
        let ego = &mut self.vehicles[0];
        let cap = 1.4 * ego.profile.desired_speed;
        match maneuver {
            Maneuver::SlowDown => {
                ego.target_speed = (ego.target_speed - TARGET_SPEED_STEP).max(0.0)
            }
            Maneuver::Cruise => {}
            Maneuver::SpeedUp => {
                ego.target_speed = (ego.target_speed + TARGET_SPEED_STEP).min(cap)
            }
            Maneuver::TurnLeft => ego.target_lane -= 1,
            Maneuver::TurnRight => ego.target_lane += 1,
        }
    }

    /// One physics sub-step for every vehicle. Returns whether a follower
    /// emergency-braked behind the ego.
    fn substep(&mut self, dt: f64) -> bool {
        let n = self.vehicles.len();
        let mut controls = Vec::with_capacity(n);
        let mut ego_emergency = false;
        for i in 0..n {
            let v = &self.vehicles[i];
            let accel = if v.is_ego {
                (LON_KP * (v.target_speed - v.speed))
                    .clamp(-v.profile.comfort_decel, v.profile.max_accel)
            } else {
                let mut lead = self.leader_in_lane(i, v.lane);
                if v.target_lane != v.lane {
                    if let Some(alt) = self.leader_in_lane(i, v.target_lane) {
                        if lead.map_or(true, |l| alt.0 < l.0) {
                            lead = Some(alt);
                        }
                    }
                }
                match lead {
                    Some((gap, vl, j)) => {
                        let a = idm_accel(gap, v.speed, vl, &v.profile);
                        if a.emergency && j == 0 {
                            ego_emergency = true;
                        }
                        a.accel
                    }
                    None => idm_accel(f64::INFINITY, v.speed, 0.0, &v.profile).accel,
                }
            };

            let pr = self.paths[v.path].project(v.position());
            let target_offset = self.lane_center(v.target_lane);
            let e = pr.offset - target_offset;
            let e_h = wrap_angle(v.heading - pr.heading);
            let kappa = if pr.curvature != 0.0 {
                pr.curvature / (1.0 - pr.curvature * target_offset)
            } else {
                0.0
            };
            let yaw_rate = v.speed * kappa - (LAT_KP * e + LAT_KD * v.speed * e_h);
            let l = v.wheelbase();
            let steer = (yaw_rate * l / v.speed.max(0.5)).atan().clamp(-MAX_STEER, MAX_STEER);
            controls.push((accel.clamp(-EMERGENCY_DECEL, v.profile.max_accel.max(0.0)), steer));
        }
        for (v, (a, steer)) in self.vehicles.iter_mut().zip(controls) {
            let l = v.wheelbase();
            v.x += v.speed * v.heading.cos() * dt;
            v.y += v.speed * v.heading.sin() * dt;
            v.heading = wrap_angle(v.heading + v.speed / l * steer.tan() * dt);
            v.speed = (v.speed + a * dt).max(0.0);
        }
        for i in 0..n {
            let pr = self.paths[self.vehicles[i].path].project(self.vehicles[i].position());
            let lane = lane_of_offset(pr.offset);
            let v = &mut self.vehicles[i];
            v.lane = lane;
            if !v.is_ego && (pr.offset - -LANE_WIDTH * v.target_lane as f64).abs() < 0.5 {
                v.lane = v.target_lane;
            }
        }
        ego_emergency
    }

    /// Advances one decision period under `maneuver`.
    pub fn step(&mut self, maneuver: Maneuver) -> Result<StepOutcome> {
        if self.terminal {
            return Err(Error::Usage("step called on a terminal state".into()));
        }
        self.apply_maneuver(maneuver);
        self.mobil_decisions();

        let dt = self.config.dt_physics;
        let mut events = Vec::new();
        let mut min_distance = f64::INFINITY;
        let mut emergency = false;
        for _ in 0..self.config.substeps() {
            emergency |= self.substep(dt);
            self.time += dt;
            let ego = &self.vehicles[0];
            for o in &self.vehicles[1..] {
                min_distance = min_distance.min((o.x - ego.x).hypot(o.y - ego.y));
            }
            if self.vehicles[1..].iter().any(|o| rectangles_overlap(ego, o)) {
                events.push(Event::Collision);
                break;
            }
            if off_road(self.kind(), ego.x, ego.y) {
                events.push(Event::OffRoad);
                break;
            }
            if self.config.success_region.contains(ego.x, ego.y) {
                events.push(Event::Success);
                break;
            }
        }
        self.decision_step += 1;
        if events.is_empty() && self.decision_step >= self.config.horizon {
            events.push(Event::Timeout);
        }
        self.terminal = !events.is_empty();

        let observation = self.observe();
        let ego = &self.vehicles[0];
        let ttcp: Vec<(u32, f64)> = self.vehicles[1..]
            .iter()
            .map(|o| (o.id, risk::ttcp(ego, o, &self.risk)))
            .collect();
        let tau_min = ttcp.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        let r = reward(&self.config.reward, ego.speed, maneuver, &events);
        Ok(StepOutcome {
            observation,
            reward: r,
            done: self.terminal,
            events,
            info: StepInfo {
                min_distance,
                ttcp,
                tau_min,
                emergency_clamp: emergency,
            },
        })
    }

    pub fn to_record(&self, maneuver: Option<Maneuver>, outcome: Option<&StepOutcome>) -> TraceRecord {
        let obs = self.observe();
        let rec = |v: &VehicleState| VehicleRecord::from(v);
        TraceRecord {
            t: self.decision_step,
            scenario: self.kind(),
            ego: rec(self.ego()),
            neighbors: obs
                .neighbor_ids
                .iter()
                .filter_map(|id| self.vehicles.iter().find(|v| v.id == *id))
                .map(rec)
                .collect(),
            maneuver,
            reward: outcome.map(|o| o.reward),
            events: outcome.map(|o| o.events.clone()).unwrap_or_default(),
            tau_min: outcome.and_then(|o| o.info.tau_min.is_finite().then_some(o.info.tau_min)),
        }
    }
}

fn infer_path(kind: ScenarioKind, heading: f64) -> usize {
    match kind {
        ScenarioKind::Intersection => {
            let candidates = [(1, PI), (2, FRAC_PI_2), (3, -FRAC_PI_2)];
            candidates
                .iter()
                .min_by(|a, b| {
                    wrap_angle(heading - a.1)
                        .abs()
                        .total_cmp(&wrap_angle(heading - b.1).abs())
                })
                .map(|c| c.0)
                .unwrap_or(1)
        }
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty(kind: ScenarioKind) -> ScenarioState {
        let mut c = ScenarioConfig::preset(kind);
        c.n_background = 0;
        ScenarioState::reset(&c, 1).unwrap().0
    }

    #[test]
    fn reset_is_deterministic() {
        let c = ScenarioConfig::preset(ScenarioKind::Merge);
        let (a, oa) = ScenarioState::reset(&c, 7).unwrap();
        let (b, ob) = ScenarioState::reset(&c, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        let (c2, _) = ScenarioState::reset(&c, 8).unwrap();
        assert_ne!(a.vehicles, c2.vehicles);
    }

    #[test]
    fn disturbance_count_is_rounded_fraction() {
        let mut c = ScenarioConfig::preset(ScenarioKind::Highway);
        c.n_background = 20;
        let (s, _) = ScenarioState::reset(&c, 3).unwrap();
        assert_eq!(s.disturbed_ids().len(), 3);
        assert_eq!(s.others().len(), 20);
        let mean = c.spawn_speed_mean;
        for id in s.disturbed_ids() {
            let v = s.vehicles.iter().find(|v| v.id == *id).unwrap();
            assert!(v.speed >= 0.3 * mean && v.speed <= 1.7 * mean);
        }
    }

    #[test]
    fn spawn_speeds_truncated() {
        let mut c = ScenarioConfig::preset(ScenarioKind::Highway);
        c.disturbance_fraction = 0.0;
        c.spawn_speed_std = 40.0;
        for seed in 0..20 {
            let (s, _) = ScenarioState::reset(&c, seed).unwrap();
            for v in s.others() {
                assert!(v.speed >= 0.0 && v.speed <= 1.5 * v.profile.desired_speed);
            }
        }
    }

    #[test]
    fn empty_traffic_has_zero_neighbor_matrix() {
        let s = empty(ScenarioKind::Merge);
        let obs = s.observe();
        assert_eq!(obs.neighbor_count, 0);
        assert!(obs.neighbors.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_config_names_field() {
        let mut c = ScenarioConfig::preset(ScenarioKind::Intersection);
        c.n_background = 500;
        let err = ScenarioState::reset(&c, 0).unwrap_err().to_string();
        assert!(err.contains("n_background"), "{err}");
    }

    #[test]
    fn cruise_at_desired_speed_holds_speed() {
        let mut s = empty(ScenarioKind::Highway);
        let v0 = s.ego().profile.desired_speed;
        s.ego_mut().speed = v0;
        s.ego_mut().target_speed = v0;
        let out = s.step(Maneuver::Cruise).unwrap();
        assert!((s.ego().speed - v0).abs() < 0.1);
        assert!(!out.done);
    }

    #[test]
    fn turn_left_approaches_new_lane_monotonically() {
        let mut s = empty(ScenarioKind::Highway);
        {
            let e = s.ego_mut();
            e.lane = 2;
            e.target_lane = 2;
            e.y = -8.0;
            e.speed = 25.0;
            e.target_speed = 25.0;
        }
        s.apply_maneuver(Maneuver::TurnLeft);
        assert_eq!(s.ego().target_lane, 1);
        let start = (s.ego().y - -4.0).abs();
        let mut prev = start;
        for _ in 0..s.config.substeps() {
            s.substep(s.config.dt_physics);
            let err = (s.ego().y - -4.0).abs();
            assert!(err <= prev, "lateral error grew: {prev} -> {err}");
            prev = err;
        }
        assert!(prev < start);
    }

    #[test]
    fn overlapping_vehicle_produces_collision() {
        let mut s = empty(ScenarioKind::Highway);
        let mut other = s.ego().clone();
        other.x += 3.0;
        other.speed = 0.0;
        other.target_speed = 0.0;
        other.profile = DriverProfile::standard(ScenarioKind::Highway);
        s.insert_vehicle(other);
        let out = s.step(Maneuver::Cruise).unwrap();
        assert!(out.has(Event::Collision));
        assert!(!out.has(Event::Success));
        assert!(out.done);
        assert!(out.reward <= -1.0 + s.config.reward.w_v);
        assert!(matches!(s.step(Maneuver::Cruise), Err(Error::Usage(_))));
    }

    #[test]
    fn merge_without_merging_goes_off_road() {
        let mut c = ScenarioConfig::preset(ScenarioKind::Merge);
        c.n_background = 0;
        let (mut s, _) = ScenarioState::reset(&c, 0).unwrap();
        let mut last = None;
        for _ in 0..c.horizon {
            let out = s.step(Maneuver::SpeedUp).unwrap();
            if out.done {
                last = Some(out);
                break;
            }
        }
        assert!(last.unwrap().has(Event::OffRoad));
    }

    #[test]
    fn intersection_turn_reaches_exit_road() {
        let mut c = ScenarioConfig::preset(ScenarioKind::Intersection);
        c.n_background = 0;
        let (mut s, _) = ScenarioState::reset(&c, 0).unwrap();
        let mut events = Vec::new();
        for _ in 0..c.horizon {
            let out = s.step(Maneuver::Cruise).unwrap();
            if out.done {
                events = out.events;
                break;
            }
        }
        assert_eq!(events, vec![Event::Success]);
    }

    #[test]
    fn episodes_terminate_within_horizon() {
        for kind in ScenarioKind::ALL {
            let c = ScenarioConfig::preset(kind);
            let (mut s, _) = ScenarioState::reset(&c, 11).unwrap();
            let mut steps = 0;
            while !s.is_terminal() {
                s.step(Maneuver::ALL[steps % 3]).unwrap();
                steps += 1;
            }
            assert!(steps <= c.horizon);
        }
    }
}
