//! Pose-tracking costs with relaxed-barrier constraint penalties.
//!
//! Both the exact Hessian and the Gauss-Newton approximation are available.
//! The exact one needs second derivatives of the tracked pose, which for a
//! chain of prismatic/revolute coordinates have closed forms in terms of the
//! world-frame axes.

use nalgebra::{DMatrix, DVector, Quaternion};
use serde::{Deserialize, Serialize};

use super::barrier::{rbf_derivatives, RbfParams};
use crate::geometry::{d_ori, d_pos, Pose3, Vec3};
use crate::robot::{KinematicChain, ModelIndex, Motion, TrackedFrame, WholeBodyState};

/// Weights of the intermediate and terminal pose-tracking cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    /// Diagonal of the control weight matrix, one entry per control input.
    pub control_weights: Vec<f64>,
    /// Position error weight (1/m²).
    pub position_weight: f64,
    /// Orientation error weight (1/rad²).
    pub orientation_weight: f64,
    /// Terminal multipliers applied to the two pose weights.
    pub terminal_position_scale: f64,
    pub terminal_orientation_scale: f64,
}

impl CostSpec {
    /// Placeholder weights: `R_u = 0.1·I`, `w_p = 10`, `w_q = 2`, terminal ×5.
    pub fn default_for(m: ModelIndex, n_arm: usize) -> Self {
        Self {
            control_weights: vec![0.1; m.control_dim(n_arm)],
            position_weight: 10.0,
            orientation_weight: 2.0,
            terminal_position_scale: 5.0,
            terminal_orientation_scale: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    BaseVelocityLimits,
    ArmPositionLimits,
    ArmVelocityLimits,
}

impl ConstraintKind {
    /// Fixed order of the constraint toggles in the action vector.
    pub const ALL: [ConstraintKind; 3] = [
        ConstraintKind::BaseVelocityLimits,
        ConstraintKind::ArmPositionLimits,
        ConstraintKind::ArmVelocityLimits,
    ];

    pub fn applies_to(self, m: ModelIndex) -> bool {
        match self {
            ConstraintKind::BaseVelocityLimits => m.moves_base(),
            ConstraintKind::ArmPositionLimits | ConstraintKind::ArmVelocityLimits => m.moves_arm(),
        }
    }
}

/// Box bounds on a block of state or control coordinates.
///
/// Each bound contributes two margins `upper - z ≥ 0` and `z - lower ≥ 0`;
/// an equality is expressed with `lower == upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintGroup {
    pub kind: ConstraintKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub active: bool,
}

impl ConstraintGroup {
    pub fn from_chain(kind: ConstraintKind, chain: &KinematicChain) -> Self {
        let (lower, upper) = match kind {
            ConstraintKind::BaseVelocityLimits => {
                let b = &chain.base;
                (
                    vec![-b.max_linear_velocity, -b.max_angular_velocity],
                    vec![b.max_linear_velocity, b.max_angular_velocity],
                )
            }
            ConstraintKind::ArmPositionLimits => chain
                .joints
                .iter()
                .map(|j| (j.position_limits[0], j.position_limits[1]))
                .unzip(),
            ConstraintKind::ArmVelocityLimits => chain
                .joints
                .iter()
                .map(|j| (-j.velocity_limit, j.velocity_limit))
                .unzip(),
        };
        Self {
            kind,
            lower,
            upper,
            active: true,
        }
    }

    /// Whether the bounds act on the state (otherwise on the control), and
    /// the index of the first bounded coordinate for model `m`.
    pub fn placement(&self, m: ModelIndex) -> (bool, usize) {
        let (arm_x, arm_u) = m.arm_offset();
        match self.kind {
            ConstraintKind::BaseVelocityLimits => (false, 0),
            ConstraintKind::ArmPositionLimits => (true, arm_x),
            ConstraintKind::ArmVelocityLimits => (false, arm_u),
        }
    }

    pub fn margin_count(&self) -> usize {
        2 * self.lower.len()
    }
}

/// Everything except `(x, u)` that the cost of one optimization instance depends on.
#[derive(Debug, Clone)]
pub struct CostContext<'a> {
    pub model: ModelIndex,
    pub chain: &'a KinematicChain,
    /// Whole-body state providing the coordinates the model does not move.
    pub frozen: &'a WholeBodyState,
    pub target: &'a Pose3,
    pub costs: &'a CostSpec,
    pub constraints: &'a [ConstraintGroup],
    pub rbf: &'a RbfParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Includes the second-order curvature of the tracked pose.
    Exact,
    #[default]
    GaussNewton,
}

/// Second-order expansion of a stage cost around `(x, u)`.
#[derive(Debug, Clone)]
pub struct StageQuadratic {
    pub l: f64,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

fn tracked(ctx: &CostContext, x: &DVector<f64>) -> TrackedFrame {
    let mut s = ctx.frozen.clone();
    ctx.model.write_state(x, &mut s);
    ctx.chain.tracked_frame(ctx.model, &s)
}

fn pose_error_value(pose: &Pose3, target: &Pose3, wp: f64, wq: f64) -> f64 {
    let dp = d_pos(&pose.translation.vector, &target.translation.vector);
    let dq = d_ori(&pose.rotation, &target.rotation);
    wp * dp * dp + wq * dq * dq
}

fn barrier_value(ctx: &CostContext, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for g in ctx
        .constraints
        .iter()
        .filter(|g| g.active && g.kind.applies_to(ctx.model))
    {
        let (on_state, start) = g.placement(ctx.model);
        let z = if on_state { x } else { u };
        for (i, (lo, hi)) in g.lower.iter().zip(&g.upper).enumerate() {
            let v = z[start + i];
            total += rbf_derivatives(hi - v, ctx.rbf).0 + rbf_derivatives(v - lo, ctx.rbf).0;
        }
    }
    total
}

fn control_value(costs: &CostSpec, u: &DVector<f64>) -> f64 {
    u.iter().zip(&costs.control_weights).map(|(ui, r)| r * ui * ui).sum()
}

/// `uᵀRu + w_p·d_pos² + w_q·d_ori² + Σ rbf(h_j)` over active constraint groups.
pub fn intermediate_cost(ctx: &CostContext, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let frame = tracked(ctx, x);
    control_value(ctx.costs, u)
        + pose_error_value(
            &frame.pose,
            ctx.target,
            ctx.costs.position_weight,
            ctx.costs.orientation_weight,
        )
        + barrier_value(ctx, x, u)
}

/// Scaled pose error at the end of the horizon (no control or barrier terms).
pub fn terminal_cost(ctx: &CostContext, x: &DVector<f64>) -> f64 {
    let frame = tracked(ctx, x);
    let c = ctx.costs;
    pose_error_value(
        &frame.pose,
        ctx.target,
        c.terminal_position_scale * c.position_weight,
        c.terminal_orientation_scale * c.orientation_weight,
    )
}

fn quat_vec(q: &Quaternion<f64>) -> nalgebra::Vector4<f64> {
    nalgebra::Vector4::new(q.w, q.i, q.j, q.k)
}

fn pure(v: &Vec3) -> Quaternion<f64> {
    Quaternion::new(0.0, v.x, v.y, v.z)
}

/// `4·acos²(c)` as a function of `c = cos t`, given `t` directly:
/// returns (value, d/dc, d²/dc²).
fn angle_sq_derivatives(t: f64) -> (f64, f64, f64) {
    let value = 4.0 * t * t;
    if t < 1e-4 {
        let t2 = t * t;
        let d1 = -2.0 * (1.0 + t2 / 6.0);
        let d2 = 2.0 / 3.0 + 4.0 * t2 / 15.0;
        (value, 4.0 * d1, 4.0 * d2)
    } else {
        let s = t.sin();
        let d1 = -2.0 * t / s;
        let d2 = 2.0 * (1.0 - t * t.cos() / s) / (s * s);
        (value, 4.0 * d1, 4.0 * d2)
    }
}

/// Value, gradient and Hessian of `wp·|p - p*|² + wq·d_ori(q, q*)²` over the
/// tracked frame's coordinates.
fn pose_error_quadratic(
    frame: &TrackedFrame,
    target: &Pose3,
    wp: f64,
    wq: f64,
    mode: HessianMode,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = frame.motions.len();
    let p = frame.pose.translation.vector;
    let e = p - target.translation.vector;

    // first derivatives of position and orientation per coordinate
    let mut jp = Vec::with_capacity(n);
    let mut jw = Vec::with_capacity(n);
    for m in &frame.motions {
        match m {
            Motion::Prismatic(d) => {
                jp.push(*d);
                jw.push(Vec3::zeros());
            }
            Motion::Revolute { axis, origin } => {
                jp.push(axis.cross(&(p - origin)));
                jw.push(*axis);
            }
        }
    }

    let q = frame.pose.rotation.into_inner();
    let qt = target.rotation.into_inner();
    let dot = quat_vec(&qt).dot(&quat_vec(&q));
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    let half_angle = 0.5 * d_ori(&frame.pose.rotation, &target.rotation);
    let (ang_val, ang_d1, ang_d2) = angle_sq_derivatives(half_angle);
    let qt_s = quat_vec(&qt) * sign;

    let dq: Vec<Quaternion<f64>> = jw.iter().map(|w| pure(w) * q * 0.5).collect();
    let grad_c: Vec<f64> = dq.iter().map(|d| qt_s.dot(&quat_vec(d))).collect();

    let value = wp * e.norm_squared() + wq * ang_val;
    let mut grad = DVector::zeros(n);
    for j in 0..n {
        grad[j] = 2.0 * wp * jp[j].dot(&e) + wq * ang_d1 * grad_c[j];
    }

    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut h = match mode {
                HessianMode::GaussNewton => 2.0 * wp * jp[i].dot(&jp[j]) + 2.0 * wq * jw[i].dot(&jw[j]),
                HessianMode::Exact => 2.0 * wp * jp[i].dot(&jp[j]) + wq * ang_d2 * grad_c[i] * grad_c[j],
            };
            if mode == HessianMode::Exact {
                // i is upstream of (or equal to) j
                let (d2p, d2q) = match (&frame.motions[i], &frame.motions[j]) {
                    (Motion::Prismatic(_), _) => (Vec3::zeros(), Quaternion::new(0.0, 0.0, 0.0, 0.0)),
                    (Motion::Revolute { axis: ai, .. }, Motion::Prismatic(dj)) => {
                        (ai.cross(dj), Quaternion::new(0.0, 0.0, 0.0, 0.0))
                    }
                    (Motion::Revolute { axis: ai, .. }, Motion::Revolute { axis: aj, origin: oj }) => {
                        let r = p - oj;
                        let d2p = ai.cross(aj).cross(&r) + aj.cross(&ai.cross(&r));
                        let d2q = pure(&ai.cross(aj)) * q * 0.5 + pure(aj) * pure(ai) * q * 0.25;
                        (d2p, d2q)
                    }
                };
                h += 2.0 * wp * d2p.dot(&e) + wq * ang_d1 * qt_s.dot(&quat_vec(&d2q));
            }
            hess[(i, j)] = h;
            hess[(j, i)] = h;
        }
    }
    (value, grad, hess)
}

fn add_barrier_quadratic(ctx: &CostContext, x: &DVector<f64>, u: &DVector<f64>, q: &mut StageQuadratic) {
    for g in ctx
        .constraints
        .iter()
        .filter(|g| g.active && g.kind.applies_to(ctx.model))
    {
        let (on_state, start) = g.placement(ctx.model);
        for (i, (lo, hi)) in g.lower.iter().zip(&g.upper).enumerate() {
            let k = start + i;
            let v = if on_state { x[k] } else { u[k] };
            let (vu, gu, hu) = rbf_derivatives(hi - v, ctx.rbf);
            let (vl, gl, hl) = rbf_derivatives(v - lo, ctx.rbf);
            q.l += vu + vl;
            let g = gl - gu;
            let h = hu + hl;
            if on_state {
                q.lx[k] += g;
                q.lxx[(k, k)] += h;
            } else {
                q.lu[k] += g;
                q.luu[(k, k)] += h;
            }
        }
    }
}

/// Second-order expansion of [`intermediate_cost`].
pub fn intermediate_quadratic(
    ctx: &CostContext,
    x: &DVector<f64>,
    u: &DVector<f64>,
    mode: HessianMode,
) -> StageQuadratic {
    let frame = tracked(ctx, x);
    let c = ctx.costs;
    let (l, lx, lxx) = pose_error_quadratic(&frame, ctx.target, c.position_weight, c.orientation_weight, mode);
    let nu = u.len();
    let mut lu = DVector::zeros(nu);
    let mut luu = DMatrix::zeros(nu, nu);
    let mut control = 0.0;
    for i in 0..nu {
        let r = c.control_weights[i];
        control += r * u[i] * u[i];
        lu[i] = 2.0 * r * u[i];
        luu[(i, i)] = 2.0 * r;
    }
    let mut q = StageQuadratic {
        l: l + control,
        lx,
        lu,
        lxx,
        luu,
        lux: DMatrix::zeros(nu, x.len()),
    };
    add_barrier_quadratic(ctx, x, u, &mut q);
    q
}

/// Second-order expansion of [`terminal_cost`].
pub fn terminal_quadratic(ctx: &CostContext, x: &DVector<f64>, mode: HessianMode) -> (f64, DVector<f64>, DMatrix<f64>) {
    let frame = tracked(ctx, x);
    let c = ctx.costs;
    pose_error_quadratic(
        &frame,
        ctx.target,
        c.terminal_position_scale * c.position_weight,
        c.terminal_orientation_scale * c.orientation_weight,
        mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;
    use crate::robot::BaseState;
    use nalgebra::Translation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    struct Fixture {
        chain: KinematicChain,
        frozen: WholeBodyState,
        target: Pose3,
        costs: CostSpec,
        constraints: Vec<ConstraintGroup>,
        rbf: RbfParams,
    }

    impl Fixture {
        fn new(m: ModelIndex) -> Self {
            let chain = KinematicChain::default();
            let frozen = chain.home_state(BaseState::new(0.3, -0.2, 0.4));
            let target = Pose3::from_parts(
                Translation3::new(1.0, 0.5, 0.7),
                UnitQuaternion::from_euler_angles(0.2, -0.3, 0.5),
            );
            let constraints = ConstraintKind::ALL
                .iter()
                .map(|k| ConstraintGroup::from_chain(*k, &chain))
                .collect();
            Self {
                costs: CostSpec::default_for(m, 6),
                chain,
                frozen,
                target,
                constraints,
                rbf: RbfParams::default(),
            }
        }

        fn ctx(&self, m: ModelIndex) -> CostContext<'_> {
            CostContext {
                model: m,
                chain: &self.chain,
                frozen: &self.frozen,
                target: &self.target,
                costs: &self.costs,
                constraints: &self.constraints,
                rbf: &self.rbf,
            }
        }
    }

    #[test]
    fn zero_at_target_without_constraints() {
        let mut f = Fixture::new(ModelIndex::WholeBody);
        f.constraints.clear();
        f.target = f.chain.forward_kinematics(&f.frozen);
        let ctx = f.ctx(ModelIndex::WholeBody);
        let x = ModelIndex::WholeBody.state_vector(&f.frozen);
        let u = DVector::zeros(8);
        assert!(intermediate_cost(&ctx, &x, &u).abs() < 1e-20);
        assert!(terminal_cost(&ctx, &x).abs() < 1e-20);
    }

    #[test]
    fn position_only_error() {
        let mut f = Fixture::new(ModelIndex::WholeBody);
        f.constraints.clear();
        let ee = f.chain.forward_kinematics(&f.frozen);
        f.target = Pose3::from_parts(
            Translation3::from(ee.translation.vector + Vec3::new(0.0, 1.0, 0.0)),
            ee.rotation,
        );
        let x = ModelIndex::WholeBody.state_vector(&f.frozen);
        let u = DVector::zeros(8);
        let c = intermediate_cost(&f.ctx(ModelIndex::WholeBody), &x, &u);
        assert!((c - 10.0).abs() < 1e-12);

        f.target = Pose3::from_parts(
            Translation3::from(ee.translation.vector + Vec3::new(0.3, 0.4, 0.0)),
            ee.rotation,
        );
        // 0.5 m error with κ_p = 5, w_p = 10
        let t = terminal_cost(&f.ctx(ModelIndex::WholeBody), &x);
        assert!((t - 12.5).abs() < 1e-12);
        f.costs.terminal_position_scale = 10.0;
        let t2 = terminal_cost(&f.ctx(ModelIndex::WholeBody), &x);
        assert!((t2 - 25.0).abs() < 1e-12);
    }

    #[test]
    fn barrier_zero_at_unit_margins() {
        let mut f = Fixture::new(ModelIndex::Arm);
        f.rbf = RbfParams { mu: 1.0, delta: 0.1 };
        let x = ModelIndex::Arm.state_vector(&f.frozen);
        let u = DVector::zeros(6);
        f.constraints = vec![ConstraintGroup {
            kind: ConstraintKind::ArmVelocityLimits,
            lower: vec![-1.0; 6],
            upper: vec![1.0; 6],
            active: true,
        }];
        let with = intermediate_cost(&f.ctx(ModelIndex::Arm), &x, &u);
        f.constraints.clear();
        let without = intermediate_cost(&f.ctx(ModelIndex::Arm), &x, &u);
        assert_eq!(with, without);
    }

    fn random_point(rng: &mut ChaCha8Rng, m: ModelIndex, relaxed: bool) -> (DVector<f64>, DVector<f64>) {
        let nx = m.state_dim(6);
        let nu = m.control_dim(6);
        let mut x = DVector::from_fn(nx, |_, _| rng.gen_range(-1.5..1.5));
        if m.moves_base() {
            x[2] = rng.gen_range(-PI..PI);
        }
        let mut u = DVector::from_fn(nu, |_, _| rng.gen_range(-0.9..0.9));
        if relaxed {
            // push one coordinate inside the quadratic branch of the barrier
            if m.moves_arm() {
                let (ax, _) = m.arm_offset();
                x[ax + 1] = 2.4 - rng.gen_range(-0.02..0.009);
            }
            u[0] = 1.0 - rng.gen_range(-0.02..0.009);
        }
        (x, u)
    }

    fn check_quadratization(m: ModelIndex, seed: u64) {
        let f = Fixture::new(m);
        let ctx = f.ctx(m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for trial in 0..100 {
            let (x, u) = random_point(&mut rng, m, trial % 2 == 0);
            let q = intermediate_quadratic(&ctx, &x, &u, HessianMode::Exact);
            let nx = x.len();
            let nu = u.len();
            let z = DVector::from_iterator(nx + nu, x.iter().chain(u.iter()).copied());
            let cost = |z: &DVector<f64>| {
                let xs = z.rows(0, nx).into_owned();
                let us = z.rows(nx, nu).into_owned();
                intermediate_cost(&ctx, &xs, &us)
            };
            assert!((q.l - cost(&z)).abs() < 1e-12 * (1.0 + q.l.abs()));
            let eps = 1e-6;
            let mut grad = DVector::zeros(nx + nu);
            grad.rows_mut(0, nx).copy_from(&q.lx);
            grad.rows_mut(nx, nu).copy_from(&q.lu);
            for i in 0..nx + nu {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += eps;
                zm[i] -= eps;
                let fd = (cost(&zp) - cost(&zm)) / (2.0 * eps);
                let scale = grad.amax().max(1.0);
                assert!(
                    (grad[i] - fd).abs() / scale < 1e-5,
                    "m={m:?} trial={trial} i={i}: {} vs {}",
                    grad[i],
                    fd
                );
            }

            let mut hess = DMatrix::zeros(nx + nu, nx + nu);
            hess.view_mut((0, 0), (nx, nx)).copy_from(&q.lxx);
            hess.view_mut((nx, nx), (nu, nu)).copy_from(&q.luu);
            hess.view_mut((nx, 0), (nu, nx)).copy_from(&q.lux);
            hess.view_mut((0, nx), (nx, nu)).copy_from(&q.lux.transpose());
            let v = DVector::from_fn(nx + nu, |_, _| rng.gen_range(-1.0..1.0));
            let hv = &hess * &v;
            let grad_at = |z: &DVector<f64>| {
                let xs = z.rows(0, nx).into_owned();
                let us = z.rows(nx, nu).into_owned();
                let q = intermediate_quadratic(&ctx, &xs, &us, HessianMode::Exact);
                DVector::from_iterator(nx + nu, q.lx.iter().chain(q.lu.iter()).copied())
            };
            let h = 1e-5;
            let fd_hv = (grad_at(&(&z + &v * h)) - grad_at(&(&z - &v * h))) / (2.0 * h);
            let rel = (&hv - &fd_hv).amax() / hv.amax().max(1.0);
            assert!(rel < 1e-5, "m={m:?} trial={trial}: rel {rel}");
        }
    }

    #[test]
    fn quadratization_matches_finite_differences() {
        check_quadratization(ModelIndex::Base, 11);
        check_quadratization(ModelIndex::Arm, 12);
        check_quadratization(ModelIndex::WholeBody, 13);
    }

    #[test]
    fn gauss_newton_is_psd() {
        let f = Fixture::new(ModelIndex::WholeBody);
        let ctx = f.ctx(ModelIndex::WholeBody);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let (x, u) = random_point(&mut rng, ModelIndex::WholeBody, false);
            let q = intermediate_quadratic(&ctx, &x, &u, HessianMode::GaussNewton);
            let eig = q.lxx.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() > -1e-9);
            // gradient is exact regardless of mode
            let qe = intermediate_quadratic(&ctx, &x, &u, HessianMode::Exact);
            assert!((q.lx - qe.lx).amax() < 1e-12);
        }
    }

    #[test]
    fn terminal_quadratic_gradient() {
        let f = Fixture::new(ModelIndex::WholeBody);
        let ctx = f.ctx(ModelIndex::WholeBody);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (x, _) = random_point(&mut rng, ModelIndex::WholeBody, false);
        let (l, g, _) = terminal_quadratic(&ctx, &x, HessianMode::Exact);
        assert!((l - terminal_cost(&ctx, &x)).abs() < 1e-12);
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (terminal_cost(&ctx, &xp) - terminal_cost(&ctx, &xm)) / 2e-6;
            assert!((g[i] - fd).abs() < 1e-5 * g.amax().max(1.0));
        }
    }
}
