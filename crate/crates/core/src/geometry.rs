//! Poses, distance metrics and closest-point queries.
//!
//! Rigid-body types are thin aliases over `nalgebra`; the functions here add
//! the metrics used by collision checking, the terminal test and the rewards.

use nalgebra::{Isometry3, Translation3, UnitQuaternion as NaUnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type UnitQuaternion = NaUnitQuaternion<f64>;
pub type Pose3 = Isometry3<f64>;

/// Euclidean distance between two points.
pub fn d_pos(p1: &Vec3, p2: &Vec3) -> f64 {
    (p1 - p2).norm()
}

/// Angular distance `2·acos(|<q1, q2>|)` in `[0, π]`.
///
/// Insensitive to the quaternion double cover.
pub fn d_ori(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    let dot = q1.coords.dot(&q2.coords).abs().clamp(-1.0, 1.0);
    if dot < 0.9 {
        2.0 * dot.acos()
    } else {
        // acos loses half the digits near 1; same angle via the vector part
        // of the relative rotation
        let rel = q1.conjugate() * q2;
        2.0 * rel.imag().norm().min(1.0).asin()
    }
}

pub fn compose(parent: &Pose3, child: &Pose3) -> Pose3 {
    parent * child
}

pub fn invert(p: &Pose3) -> Pose3 {
    p.inverse()
}

/// Planar pose `(x, y, yaw)` lifted to 3D at height zero.
pub fn planar_pose(x: f64, y: f64, yaw: f64) -> Pose3 {
    Pose3::from_parts(
        Translation3::new(x, y, 0.0),
        UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw),
    )
}

/// Yaw of a rotation, i.e. the heading of its x axis projected on the ground plane.
pub fn yaw_of(q: &UnitQuaternion) -> f64 {
    let x = q * Vec3::x();
    x.y.atan2(x.x)
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if (-PI..PI).contains(&a) {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut r = (a + PI).rem_euclid(two_pi) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if r >= PI {
        r -= two_pi;
    }
    r
}

/// Yaw-only oriented box. `length` spans the local x axis, `width` the local
/// y axis and `height` the z axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3 {
    pub center: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Box3 {
    pub fn new(center: Vec3, yaw: f64, length: f64, width: f64, height: f64) -> Self {
        Self {
            center: [center.x, center.y, center.z],
            yaw,
            length,
            width,
            height,
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.center[0], self.center[1], self.center[2])
    }

    pub fn half_extents(&self) -> Vec3 {
        Vec3::new(self.length, self.width, self.height) * 0.5
    }

    /// Box frame in world coordinates.
    pub fn frame(&self) -> Pose3 {
        Pose3::from_parts(
            Translation3::from(self.center()),
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), self.yaw),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.length > 0.0 && self.width > 0.0 && self.height > 0.0
    }
}

/// Closest point of `b` to `p` and the distance between them (zero inside).
pub fn closest_point_box(p: &Vec3, b: &Box3) -> (Vec3, f64) {
    let frame = b.frame();
    let local = frame.inverse_transform_point(&(*p).into());
    let h = b.half_extents();
    let clamped = Vec3::new(
        local.x.clamp(-h.x, h.x),
        local.y.clamp(-h.y, h.y),
        local.z.clamp(-h.z, h.z),
    );
    let dist = (local.coords - clamped).norm();
    let world = frame.transform_point(&clamped.into()).coords;
    (world, dist)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment3 {
    pub a: Vec3,
    pub b: Vec3,
}

impl Segment3 {
    pub fn new(a: Vec3, b: Vec3) -> Self {
        Self { a, b }
    }

    pub fn point_at(&self, s: f64) -> Vec3 {
        self.a + (self.b - self.a) * s
    }
}

/// Minimum distance between two segments.
///
/// Closest-point parameters are found by minimizing over the unit square:
/// the unconstrained stationary point is clamped to one segment and the other
/// parameter is recomputed and clamped. Degenerate segments reduce to points.
pub fn segment_segment_distance(s1: &Segment3, s2: &Segment3) -> f64 {
    const EPS: f64 = 1e-12;
    let d1 = s1.b - s1.a;
    let d2 = s2.b - s2.a;
    let r = s1.a - s2.a;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);

    let (s, t) = if a <= EPS && e <= EPS {
        (0.0, 0.0)
    } else if a <= EPS {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > EPS * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    (s1.point_at(s) - s2.point_at(t)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose3 {
        let t = Vec3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        );
        let axis = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let q = UnitQuaternion::from_scaled_axis(axis * 2.0);
        Pose3::from_parts(Translation3::from(t), q)
    }

    #[test]
    fn d_pos_basic() {
        assert_eq!(d_pos(&Vec3::zeros(), &Vec3::zeros()), 0.0);
        assert_eq!(d_pos(&Vec3::zeros(), &Vec3::new(3.0, 4.0, 0.0)), 5.0);
    }

    #[test]
    fn d_pos_matches_componentwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
            let a = Vec3::new(p[0], p[1], p[2]);
            let b = Vec3::new(p[3], p[4], p[5]);
            let oracle = ((p[0] - p[3]).powi(2) + (p[1] - p[4]).powi(2) + (p[2] - p[5]).powi(2)).sqrt();
            assert!((d_pos(&a, &b) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn d_ori_cases() {
        let id = UnitQuaternion::identity();
        assert_eq!(d_ori(&id, &id), 0.0);
        let q = UnitQuaternion::from_scaled_axis(Vec3::new(0.3, -0.2, 0.9));
        let neg = UnitQuaternion::new_unchecked(-q.into_inner());
        assert!(d_ori(&q, &neg).abs() < 1e-12);
        let z90 = UnitQuaternion::new_normalize(nalgebra::Quaternion::new(FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin()));
        assert!((d_ori(&id, &z90) - FRAC_PI_2).abs() < 1e-12);
        // clamped dot keeps acos defined even with rounding above 1
        let d = d_ori(&q, &q);
        assert!(d.is_finite() && d < 1e-12);
    }

    #[test]
    fn compose_and_invert() {
        let p = planar_pose(1.0, 2.0, 0.3);
        let c = compose(&Pose3::identity(), &p);
        assert_eq!(c, p);
        let t1 = Pose3::translation(1.0, 2.0, 3.0);
        let t2 = Pose3::translation(-0.5, 0.25, 1.0);
        let sum = compose(&t1, &t2);
        assert!((sum.translation.vector - Vec3::new(0.5, 2.25, 4.0)).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let id = compose(&p, &invert(&p));
            assert!(id.translation.vector.norm() < 1e-9);
            assert!(d_ori(&id.rotation, &UnitQuaternion::identity()) < 1e-9);
            assert!((id.rotation.angle()).abs() < 1e-9);
        }
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, -PI + 1e-12, 0.0, PI, 3.0 * PI, 7.5, -1e-18] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((w - a) / (2.0 * PI)).round() * 2.0 * PI - (w - a) < 1e-9);
        }
        assert_eq!(wrap_angle(PI), -PI);
    }

    #[test]
    fn closest_point_box_cases() {
        let unit = Box3::new(Vec3::zeros(), 0.0, 1.0, 1.0, 1.0);
        let (_, d) = closest_point_box(&Vec3::zeros(), &unit);
        assert_eq!(d, 0.0);

        let (pt, d) = closest_point_box(&Vec3::new(0.0, 0.0, 1.5), &unit);
        assert!((d - 1.0).abs() < 1e-12);
        assert!((pt - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-12);

        // beyond the (0.5, 0.5, 0.5) corner
        let p = Vec3::new(1.5, 2.5, -1.0);
        let (pt, d) = closest_point_box(&p, &unit);
        let corner = Vec3::new(0.5, 0.5, -0.5);
        assert!((d - (p - corner).norm()).abs() < 1e-12);
        assert!((pt - corner).norm() < 1e-12);
    }

    #[test]
    fn closest_point_rotated_box_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let b = Box3::new(
                Vec3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.0..1.0),
                ),
                rng.gen_range(-PI..PI),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
            );
            let p = Vec3::new(
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-2.0..3.0),
            );
            // oracle: rotate into box frame by hand, clamp, measure
            let (c, s) = (b.yaw.cos(), b.yaw.sin());
            let r = p - b.center();
            let lx = c * r.x + s * r.y;
            let ly = -s * r.x + c * r.y;
            let h = b.half_extents();
            let dx = (lx.abs() - h.x).max(0.0);
            let dy = (ly.abs() - h.y).max(0.0);
            let dz = (r.z.abs() - h.z).max(0.0);
            let oracle = (dx * dx + dy * dy + dz * dz).sqrt();
            let (pt, d) = closest_point_box(&p, &b);
            assert!((d - oracle).abs() < 1e-12);
            let (_, d_pt) = closest_point_box(&pt, &b);
            assert!(d_pt < 1e-9, "returned point must lie on or in the box");
        }
    }

    #[test]
    fn segment_cases() {
        let s1 = Segment3::new(Vec3::zeros(), Vec3::x());
        let s2 = Segment3::new(Vec3::y(), Vec3::new(1.0, 1.0, 0.0));
        assert!((segment_segment_distance(&s1, &s2) - 1.0).abs() < 1e-12);

        let c1 = Segment3::new(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let c2 = Segment3::new(Vec3::new(0.0, -1.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert!(segment_segment_distance(&c1, &c2) < 1e-12);

        let pt = Segment3::new(Vec3::new(0.5, 2.0, 0.0), Vec3::new(0.5, 2.0, 0.0));
        assert!((segment_segment_distance(&s1, &pt) - 2.0).abs() < 1e-12);
    }

    fn sampled_distance(s1: &Segment3, s2: &Segment3, n: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..=n {
            let pa = s1.point_at(i as f64 / n as f64);
            for j in 0..=n {
                best = best.min((pa - s2.point_at(j as f64 / n as f64)).norm());
            }
        }
        best
    }

    #[test]
    fn segment_matches_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut v = || {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            };
            let s1 = Segment3::new(v(), v());
            let s2 = Segment3::new(v(), v());
            let exact = segment_segment_distance(&s1, &s2);
            // coarse grid then local refinement gives a tight upper bound
            let coarse = sampled_distance(&s1, &s2, 400);
            assert!(exact <= coarse + 1e-12);
            assert!(coarse - exact < 1e-2);
            let refined = refine(&s1, &s2);
            assert!((refined - exact).abs() < 1e-6, "{refined} vs {exact}");
        }
    }

    // dense two-parameter sampling around the best coarse cell, repeated
    fn refine(s1: &Segment3, s2: &Segment3) -> f64 {
        let (mut cs, mut ct, mut half) = (0.5, 0.5, 0.5);
        let mut best = f64::INFINITY;
        for _ in 0..40 {
            let n = 20;
            let (mut bs, mut bt) = (cs, ct);
            for i in 0..=n {
                let s = (cs - half + 2.0 * half * i as f64 / n as f64).clamp(0.0, 1.0);
                for j in 0..=n {
                    let t = (ct - half + 2.0 * half * j as f64 / n as f64).clamp(0.0, 1.0);
                    let d = (s1.point_at(s) - s2.point_at(t)).norm();
                    if d < best {
                        best = d;
                        bs = s;
                        bt = t;
                    }
                }
            }
            cs = bs;
            ct = bt;
            half *= 0.5;
        }
        best
    }

    proptest! {
        #[test]
        fn d_pos_triangle_inequality(a in prop::array::uniform3(-5.0f64..5.0), b in prop::array::uniform3(-5.0f64..5.0), c in prop::array::uniform3(-5.0f64..5.0)) {
            let (a, b, c) = (Vec3::from(a), Vec3::from(b), Vec3::from(c));
            prop_assert!(d_pos(&a, &c) <= d_pos(&a, &b) + d_pos(&b, &c) + 1e-12);
            prop_assert_eq!(d_pos(&a, &b), d_pos(&b, &a));
        }

        #[test]
        fn d_ori_left_invariant(r in prop::array::uniform3(-2.0f64..2.0), a in prop::array::uniform3(-2.0f64..2.0), b in prop::array::uniform3(-2.0f64..2.0)) {
            let r = UnitQuaternion::from_scaled_axis(Vec3::from(r));
            let q1 = UnitQuaternion::from_scaled_axis(Vec3::from(a));
            let q2 = UnitQuaternion::from_scaled_axis(Vec3::from(b));
            let d = d_ori(&q1, &q2);
            prop_assert!((0.0..=PI).contains(&d));
            prop_assert!((d_ori(&(r * q1), &(r * q2)) - d).abs() < 1e-9);
            prop_assert!((d_ori(&q2, &q1) - d).abs() < 1e-15);
        }

        #[test]
        fn closest_point_rigid_invariance(p in prop::array::uniform3(-3.0f64..3.0), yaw in -PI..PI, tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -1.0f64..1.0, by in -PI..PI) {
            let b = Box3::new(Vec3::new(0.2, -0.1, 0.3), by, 0.8, 0.5, 0.4);
            let p = Vec3::from(p);
            let (_, d0) = closest_point_box(&p, &b);
            let t = Pose3::from_parts(Translation3::new(tx, ty, tz), UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw));
            let moved_p = t.transform_point(&p.into()).coords;
            let moved_b = Box3::new(t.transform_point(&b.center().into()).coords, b.yaw + yaw, b.length, b.width, b.height);
            let (_, d1) = closest_point_box(&moved_p, &moved_b);
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn segment_distance_symmetric(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0), c in prop::array::uniform3(-1.0f64..1.0), d in prop::array::uniform3(-1.0f64..1.0)) {
            let s1 = Segment3::new(Vec3::from(a), Vec3::from(b));
            let s2 = Segment3::new(Vec3::from(c), Vec3::from(d));
            let d12 = segment_segment_distance(&s1, &s2);
            prop_assert!(d12 >= 0.0);
            prop_assert!((d12 - segment_segment_distance(&s2, &s1)).abs() < 1e-12);
        }
    }
}
