use super::DriverProfile;

/// Hard braking limit applied to every vehicle (m/s²).
pub const EMERGENCY_DECEL: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmAccel {
    pub accel: f64,
    /// Set when the leader overlaps (gap ≤ 0) and the emergency clamp fired.
    pub emergency: bool,
}

/// Intelligent Driver Model acceleration.
///
/// `gap` is bumper-to-bumper distance to the leader, `f64::INFINITY` when
/// there is none. The result is clamped to `[−EMERGENCY_DECEL, max_accel]`.
pub fn idm_accel(gap: f64, v: f64, v_lead: f64, profile: &DriverProfile) -> IdmAccel {
    let a_max = profile.max_accel;
    if gap <= 0.0 {
        return IdmAccel {
            accel: -EMERGENCY_DECEL,
            emergency: true,
        };
    }
    let free = 1.0 - (v / profile.desired_speed).powi(4);
    let interaction = if gap.is_finite() {
        let dv = v - v_lead;
        let s_star = profile.min_gap
            + (v * profile.time_headway + v * dv / (2.0 * (a_max * profile.comfort_decel).sqrt()))
                .max(0.0);
        (s_star / gap).powi(2)
    } else {
        0.0
    };
    IdmAccel {
        accel: (a_max * (free - interaction)).clamp(-EMERGENCY_DECEL, a_max),
        emergency: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{DriverProfile, ScenarioKind};

    #[test]
    fn equilibrium_on_free_road() {
        let p = DriverProfile::standard(ScenarioKind::Highway);
        let a = idm_accel(f64::INFINITY, p.desired_speed, 0.0, &p);
        assert_eq!(a.accel, 0.0);
        assert!(!a.emergency);
    }

    #[test]
    fn standing_start_uses_full_acceleration() {
        let p = DriverProfile::standard(ScenarioKind::Merge);
        assert_eq!(idm_accel(f64::INFINITY, 0.0, 0.0, &p).accel, p.max_accel);
    }

    #[test]
    fn following_at_twice_desired_gap_brakes_gently() {
        // Direct evaluation: v = v_lead = 20 on a profile whose desired speed
        // is 20, gap = 2·s* with s* = s0 + v·T.
        let p = DriverProfile::conservative(ScenarioKind::Highway);
        assert_eq!(p.desired_speed, 20.0);
        let s_star = p.min_gap + 20.0 * p.time_headway;
        let expected = p.max_accel * (1.0 - 1.0 - 0.25);
        let a = idm_accel(2.0 * s_star, 20.0, 20.0, &p);
        assert!((a.accel - expected).abs() < 1e-12);
        assert!(a.accel < 0.0);
    }

    #[test]
    fn overlap_triggers_emergency_clamp() {
        let p = DriverProfile::standard(ScenarioKind::Highway);
        let a = idm_accel(-0.5, 10.0, 5.0, &p);
        assert_eq!(a.accel, -EMERGENCY_DECEL);
        assert!(a.emergency);
    }
}
