use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::{wrap_angle, VehicleState};

/// Reference path a vehicle tracks. Lane `k` runs at lateral offset
/// `−k·LANE_WIDTH` (positive offsets lie to the left of travel).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Path {
    Straight {
        origin: [f64; 2],
        heading: f64,
    },
    /// Straight approach ending at `entry`, a 90° left arc of `radius`,
    /// then a straight exit.
    LeftTurn {
        entry: [f64; 2],
        heading: f64,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length along the path.
    pub s: f64,
    /// Signed lateral offset, positive to the left.
    pub offset: f64,
    /// Path heading at `s`.
    pub heading: f64,
    /// Signed curvature at `s` (positive turning left).
    pub curvature: f64,
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

impl Path {
    pub fn project(&self, p: [f64; 2]) -> Projection {
        match *self {
            Path::Straight { origin, heading } => {
                let d = [heading.cos(), heading.sin()];
                let n = [-d[1], d[0]];
                let r = sub(p, origin);
                Projection {
                    s: dot(r, d),
                    offset: dot(r, n),
                    heading,
                    curvature: 0.0,
                }
            }
            Path::LeftTurn {
                entry,
                heading,
                radius,
            } => {
                let d = [heading.cos(), heading.sin()];
                let n = [-d[1], d[0]];
                let center = [entry[0] + radius * n[0], entry[1] + radius * n[1]];
                let exit = [center[0] + radius * d[0], center[1] + radius * d[1]];
                let arc_len = radius * FRAC_PI_2;

                // Approach segment.
                let ra = sub(p, entry);
                let sa = dot(ra, d);
                let approach = Projection {
                    s: sa.min(0.0),
                    offset: dot(ra, n),
                    heading,
                    curvature: 0.0,
                };
                let da = if sa <= 0.0 {
                    approach.offset.abs()
                } else {
                    ra[0].hypot(ra[1])
                };

                // Arc.
                let rc = sub(p, center);
                let phi = dot(rc, d).atan2(-dot(rc, n)).clamp(0.0, FRAC_PI_2);
                let dist_c = rc[0].hypot(rc[1]);
                let on_arc = [
                    center[0] + radius * (phi.sin() * d[0] - phi.cos() * n[0]),
                    center[1] + radius * (phi.sin() * d[1] - phi.cos() * n[1]),
                ];
                let arc = Projection {
                    s: radius * phi,
                    offset: radius - dist_c,
                    heading: wrap_angle(heading + phi),
                    curvature: 1.0 / radius,
                };
                let dc = sub(p, on_arc);
                let dcn = dc[0].hypot(dc[1]);

                // Exit segment, travelling along n.
                let rb = sub(p, exit);
                let sb = dot(rb, n);
                let exit_proj = Projection {
                    s: arc_len + sb.max(0.0),
                    offset: -dot(rb, d),
                    heading: wrap_angle(heading + FRAC_PI_2),
                    curvature: 0.0,
                };
                let db = if sb >= 0.0 {
                    exit_proj.offset.abs()
                } else {
                    rb[0].hypot(rb[1])
                };

                if da <= dcn && da <= db {
                    approach
                } else if dcn <= db {
                    arc
                } else {
                    exit_proj
                }
            }
        }
    }

    /// World point at arc length `s` and lateral `offset`.
    pub fn point(&self, s: f64, offset: f64) -> ([f64; 2], f64) {
        match *self {
            Path::Straight { origin, heading } => {
                let d = [heading.cos(), heading.sin()];
                let n = [-d[1], d[0]];
                (
                    [
                        origin[0] + s * d[0] + offset * n[0],
                        origin[1] + s * d[1] + offset * n[1],
                    ],
                    heading,
                )
            }
            Path::LeftTurn {
                entry,
                heading,
                radius,
            } => {
                let d = [heading.cos(), heading.sin()];
                let n = [-d[1], d[0]];
                let arc_len = radius * FRAC_PI_2;
                if s <= 0.0 {
                    (
                        [
                            entry[0] + s * d[0] + offset * n[0],
                            entry[1] + s * d[1] + offset * n[1],
                        ],
                        heading,
                    )
                } else if s <= arc_len {
                    let phi = s / radius;
                    let center = [entry[0] + radius * n[0], entry[1] + radius * n[1]];
                    let r = radius - offset;
                    (
                        [
                            center[0] + r * (phi.sin() * d[0] - phi.cos() * n[0]),
                            center[1] + r * (phi.sin() * d[1] - phi.cos() * n[1]),
                        ],
                        wrap_angle(heading + phi),
                    )
                } else {
                    let center = [entry[0] + radius * n[0], entry[1] + radius * n[1]];
                    let exit = [center[0] + radius * d[0], center[1] + radius * d[1]];
                    let t = s - arc_len;
                    (
                        [
                            exit[0] + t * n[0] - offset * d[0],
                            exit[1] + t * n[1] - offset * d[1],
                        ],
                        wrap_angle(heading + FRAC_PI_2),
                    )
                }
            }
        }
    }
}

fn corners(v: &VehicleState) -> [[f64; 2]; 4] {
    let (c, s) = (v.heading.cos(), v.heading.sin());
    let (hl, hw) = (v.length / 2.0, v.width / 2.0);
    let mut out = [[0.0; 2]; 4];
    for (k, (a, b)) in [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)].into_iter().enumerate() {
        out[k] = [v.x + a * c - b * s, v.y + a * s + b * c];
    }
    out
}

/// Oriented-rectangle overlap by the separating-axis test. Symmetric in its
/// arguments; touching edges count as overlap.
pub fn rectangles_overlap(a: &VehicleState, b: &VehicleState) -> bool {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let reach = (a.length.hypot(a.width) + b.length.hypot(b.width)) / 2.0;
    if dx * dx + dy * dy > reach * reach {
        return false;
    }
    let (ca, cb) = (corners(a), corners(b));
    let axes = [
        [a.heading.cos(), a.heading.sin()],
        [-a.heading.sin(), a.heading.cos()],
        [b.heading.cos(), b.heading.sin()],
        [-b.heading.sin(), b.heading.cos()],
    ];
    for axis in axes {
        let span = |pts: &[[f64; 2]; 4]| {
            pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let v = dot(*p, axis);
                (lo.min(v), hi.max(v))
            })
        };
        let (alo, ahi) = span(&ca);
        let (blo, bhi) = span(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{DriverProfile, ScenarioKind};
    use proptest::prelude::*;

    fn car(x: f64, y: f64, heading: f64) -> VehicleState {
        VehicleState {
            id: 0,
            x,
            y,
            speed: 0.0,
            heading,
            lane: 0,
            length: 5.0,
            width: 2.0,
            profile: DriverProfile::standard(ScenarioKind::Highway),
            is_ego: false,
            path: 0,
            target_lane: 0,
            target_speed: 0.0,
        }
    }

    #[test]
    fn straight_projection_roundtrip() {
        let p = Path::Straight {
            origin: [1.0, -2.0],
            heading: 0.3,
        };
        let (pt, h) = p.point(17.0, -4.0);
        let pr = p.project(pt);
        assert!((pr.s - 17.0).abs() < 1e-12);
        assert!((pr.offset + 4.0).abs() < 1e-12);
        assert_eq!(h, 0.3);
    }

    #[test]
    fn left_turn_projection_roundtrip() {
        let p = Path::LeftTurn {
            entry: [-4.0, -2.0],
            heading: 0.0,
            radius: 6.0,
        };
        for s in [-30.0, -1.0, 0.5, 4.0, 9.0, 12.0, 40.0] {
            for off in [-1.0, 0.0, 1.5] {
                let (pt, h) = p.point(s, off);
                let pr = p.project(pt);
                assert!((pr.s - s).abs() < 1e-9, "s={s} off={off}: {pr:?}");
                assert!((pr.offset - off).abs() < 1e-9, "s={s} off={off}: {pr:?}");
                assert!((wrap_angle(pr.heading - h)).abs() < 1e-9);
            }
        }
        // Exit lies on x = 2 heading north.
        let (pt, h) = p.point(6.0 * FRAC_PI_2 + 10.0, 0.0);
        assert!((pt[0] - 2.0).abs() < 1e-12 && (pt[1] - 14.0).abs() < 1e-12);
        assert!((h - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn overlap_cases() {
        assert!(rectangles_overlap(&car(0.0, 0.0, 0.0), &car(4.0, 0.5, 0.0)));
        assert!(!rectangles_overlap(&car(0.0, 0.0, 0.0), &car(6.0, 0.0, 0.0)));
        assert!(!rectangles_overlap(&car(0.0, 0.0, 0.0), &car(0.0, 4.0, 0.0)));
        // Crossing at right angles.
        assert!(rectangles_overlap(
            &car(0.0, 0.0, 0.0),
            &car(2.0, 2.0, std::f64::consts::FRAC_PI_2)
        ));
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric(
            ax in -10.0..10.0f64, ay in -10.0..10.0f64, ah in -3.1..3.1f64,
            bx in -10.0..10.0f64, by in -10.0..10.0f64, bh in -3.1..3.1f64,
        ) {
            let a = car(ax, ay, ah);
            let b = car(bx, by, bh);
            prop_assert_eq!(rectangles_overlap(&a, &b), rectangles_overlap(&b, &a));
        }
    }
}
