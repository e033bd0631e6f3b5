//! C ABI over the simulator, the conflict-time estimate and the policy.
//!
//! Handles are opaque and owned by the caller, who must release them with
//! the matching `*_free`. Every fallible call returns a [`TellStatus`]; on
//! failure [`tell_last_error`] describes the cause for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use telldrive::policy::{features, FusionPolicyNet, NetConfig, ACTIONS, INPUT_DIM};
use telldrive::risk::{self, RiskParams};
use telldrive::sim::{Event, Maneuver, ScenarioConfig, ScenarioKind, ScenarioState};
use telldrive::tensor::Checkpoint;
use telldrive::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TellStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Usage = 4,
    Checkpoint = 5,
    Architecture = 6,
    Io = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TellScenario {
    Intersection = 0,
    Merge = 1,
    Highway = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TellStepResult {
    pub reward: f64,
    /// Smallest conflict time after the step; `INFINITY` when conflict-free.
    pub tau_min: f64,
    pub done: bool,
    pub collision: bool,
    pub off_road: bool,
    pub success: bool,
    pub timeout: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TellVehicle {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub heading: f64,
    pub lane: i32,
}

/// Simulator handle.
pub struct TellSim {
    state: ScenarioState,
}

/// Policy network handle.
pub struct TellPolicy {
    net: FusionPolicyNet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("interior nul removed"));
}

fn status_of(e: &Error) -> TellStatus {
    match e {
        Error::Config { .. } => TellStatus::Config,
        Error::Usage(_) | Error::Shape { .. } => TellStatus::Usage,
        Error::Checkpoint(_) => TellStatus::Checkpoint,
        Error::Architecture { .. } => TellStatus::Architecture,
        Error::Io { .. } => TellStatus::Io,
        Error::Parse { .. } => TellStatus::InvalidArgument,
        Error::Environment(_) => TellStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (TellStatus, String)>) -> TellStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TellStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TellStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (TellStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TellStatus, String) {
    (TellStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tell_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Length of the policy input vector.
#[no_mangle]
pub extern "C" fn tell_feature_dim() -> usize {
    INPUT_DIM
}

/// Number of discrete maneuvers.
#[no_mangle]
pub extern "C" fn tell_action_count() -> usize {
    ACTIONS
}

/// Creates a simulator for a scenario preset (a `TellScenario` value)
/// and resets it with `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn tell_sim_new(scenario: u32, seed: u64, out: *mut *mut TellSim) -> TellStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = match scenario {
            x if x == TellScenario::Intersection as u32 => ScenarioKind::Intersection,
            x if x == TellScenario::Merge as u32 => ScenarioKind::Merge,
            x if x == TellScenario::Highway as u32 => ScenarioKind::Highway,
            other => return Err((TellStatus::InvalidArgument, format!("unknown scenario {other}"))),
        };
        let (state, _) = ScenarioState::reset(&ScenarioConfig::preset(kind), seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(TellSim { state }));
        Ok(())
    })
}

/// Releases a simulator. Null is ignored.
///
/// # Safety
/// `sim` must come from [`tell_sim_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tell_sim_free(sim: *mut TellSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Advances one decision period. `maneuver` is 0..5 in the order
/// slow down, cruise, speed up, turn left, turn right.
///
/// # Safety
/// `sim` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tell_sim_step(sim: *mut TellSim, maneuver: u32, out: *mut TellStepResult) -> TellStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = Maneuver::from_index(maneuver as usize).ok_or_else(|| {
            (TellStatus::InvalidArgument, format!("maneuver {maneuver} out of range 0..{ACTIONS}"))
        })?;
        let o = sim.state.step(m).map_err(lib_err)?;
        *out = TellStepResult {
            reward: o.reward,
            tau_min: o.info.tau_min,
            done: o.done,
            collision: o.has(Event::Collision),
            off_road: o.has(Event::OffRoad),
            success: o.has(Event::Success),
            timeout: o.has(Event::Timeout),
        };
        Ok(())
    })
}

/// Writes the scaled policy features of the current state into `buf`.
///
/// # Safety
/// `sim` must be a live handle and `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tell_sim_features(sim: *const TellSim, buf: *mut f64, len: usize) -> TellStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < INPUT_DIM {
            return Err((TellStatus::InvalidArgument, format!("buffer holds {len}, need {INPUT_DIM}")));
        }
        let f = features(&sim.state.observe());
        ptr::copy_nonoverlapping(f.as_ptr(), buf, INPUT_DIM);
        Ok(())
    })
}

/// Copies the ego vehicle state.
///
/// # Safety
/// `sim` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tell_sim_ego(sim: *const TellSim, out: *mut TellVehicle) -> TellStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = sim.state.ego();
        *out = TellVehicle {
            id: e.id,
            x: e.x,
            y: e.y,
            speed: e.speed,
            heading: e.heading,
            lane: e.lane,
        };
        Ok(())
    })
}

/// Conflict time of two constant-velocity points: the time of closest
/// approach within `horizon` if the gap then is at most `radius`, else
/// `INFINITY`. Positions and velocities are `[x, y]`.
///
/// # Safety
/// The four arrays must each hold two doubles and `out` one.
#[no_mangle]
pub unsafe extern "C" fn tell_ttcp(
    ego_pos: *const f64,
    ego_vel: *const f64,
    other_pos: *const f64,
    other_vel: *const f64,
    radius: f64,
    horizon: f64,
    out: *mut f64,
) -> TellStatus {
    guard(|| {
        for (p, name) in [
            (ego_pos, "ego_pos"),
            (ego_vel, "ego_vel"),
            (other_pos, "other_pos"),
            (other_vel, "other_vel"),
        ] {
            if p.is_null() {
                return Err(null(name));
            }
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let params = RiskParams {
            conflict_radius: radius,
            horizon,
            ..RiskParams::default()
        };
        params.validate().map_err(lib_err)?;
        let rd = |p: *const f64| [*p, *p.add(1)];
        let (ep, ev, op, ov) = (rd(ego_pos), rd(ego_vel), rd(other_pos), rd(other_vel));
        let (t, d) = risk::closest_approach([op[0] - ep[0], op[1] - ep[1]], [ov[0] - ev[0], ov[1] - ev[1]], horizon);
        *out = if d <= radius { t } else { f64::INFINITY };
        Ok(())
    })
}

/// Creates a freshly initialised policy; `fusion` selects the attention
/// network with the teacher path.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tell_policy_new(fusion: bool, seed: u64, out: *mut *mut TellPolicy) -> TellStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = FusionPolicyNet::new(
            NetConfig {
                fusion,
                ..NetConfig::default()
            },
            seed,
        )
        .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(TellPolicy { net }));
        Ok(())
    })
}

/// Loads parameters from a checkpoint file. Corrupt files report
/// `CHECKPOINT`, a network of a different shape `ARCHITECTURE`.
///
/// # Safety
/// `policy` must be a live handle and `path` a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn tell_policy_load(policy: *mut TellPolicy, path: *const c_char) -> TellStatus {
    guard(|| {
        let policy = policy.as_mut().ok_or_else(|| null("policy"))?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (TellStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(lib_err)?;
        policy.net.load_checkpoint(&ckpt).map_err(lib_err)
    })
}

/// Greedy action for the simulator's current state. When `probs` is not
/// null it receives the action distribution.
///
/// # Safety
/// Handles must be live, `action` valid for one write and `probs`, if not
/// null, valid for [`tell_action_count`] doubles.
#[no_mangle]
pub unsafe extern "C" fn tell_policy_act(
    policy: *const TellPolicy,
    sim: *const TellSim,
    action: *mut u32,
    probs: *mut f64,
) -> TellStatus {
    guard(|| {
        let policy = policy.as_ref().ok_or_else(|| null("policy"))?;
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if action.is_null() {
            return Err(null("action"));
        }
        let out = policy.net.forward_obs(&sim.state.observe()).map_err(lib_err)?;
        *action = out.greedy().index() as u32;
        if !probs.is_null() {
            ptr::copy_nonoverlapping(out.pi.as_ptr(), probs, ACTIONS);
        }
        Ok(())
    })
}

/// Releases a policy. Null is ignored.
///
/// # Safety
/// `policy` must come from [`tell_policy_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tell_policy_free(policy: *mut TellPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}
