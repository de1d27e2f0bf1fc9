//! Constrained pose-tracking NMPC solved with SLQ.

pub mod barrier;
pub mod cost;
pub mod dynamics;
pub mod solver;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use barrier::{rbf, rbf_derivatives, RbfParams};
pub use cost::{
    intermediate_cost, intermediate_quadratic, terminal_cost, terminal_quadratic, ConstraintGroup, ConstraintKind,
    CostContext, CostSpec, HessianMode, StageQuadratic,
};
pub use dynamics::{linearize, rk4_step_jacobians};
pub use solver::{solve, LinearQuadratic, OptimalControlProblem, SlqOptions, SlqSolution};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose3};
use crate::robot::{integrate, KinematicChain, ModelIndex, WholeBodyState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlqSettings {
    /// Prediction horizon `T_h` (s).
    pub horizon: f64,
    /// Rollout step (s); `horizon / dt` must be an integer.
    pub dt: f64,
    /// Maximum SLQ iterations per solve (`N_mpc`).
    pub max_iterations: usize,
    /// Relative cost decrease below which iterations stop.
    pub tolerance: f64,
    /// Number of line-search step lengths `1, 1/2, …, 2^-(n-1)`.
    pub line_search_levels: usize,
    pub hessian: HessianMode,
}

impl Default for SlqSettings {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            dt: 0.01,
            max_iterations: 10,
            tolerance: 1e-4,
            line_search_levels: 11,
            hessian: HessianMode::GaussNewton,
        }
    }
}

impl SlqSettings {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("solver.horizon", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("solver.dt", "must be positive"));
        }
        let ratio = self.horizon / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
            return Err(Error::config("solver.dt", "horizon must be an integer multiple of dt"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("solver.max_iterations", "must be at least 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::config("solver.tolerance", "must be non-negative"));
        }
        if self.line_search_levels == 0 {
            return Err(Error::config("solver.line_search_levels", "must be at least 1"));
        }
        Ok(())
    }

    pub fn options(&self) -> SlqOptions {
        SlqOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            line_search: (0..self.line_search_levels as i32).map(|i| 0.5f64.powi(i)).collect(),
            ..SlqOptions::default()
        }
    }
}

/// One decoded optimization instance.
#[derive(Debug, Clone)]
pub struct NmpcProblem {
    pub model: ModelIndex,
    pub costs: CostSpec,
    pub constraints: Vec<ConstraintGroup>,
    /// Current whole-body state; the model's coordinates are the initial
    /// state and the remaining ones stay frozen over the horizon.
    pub state: WholeBodyState,
    /// Tracked-frame target: the end effector for arm and whole-body models,
    /// the planar base pose for the base model.
    pub target: Pose3,
    pub settings: SlqSettings,
    pub rbf: RbfParams,
}

impl NmpcProblem {
    fn check(&self, chain: &KinematicChain) -> Result<()> {
        let n_arm = chain.n_joints();
        if self.state.n_arm() != n_arm {
            return Err(Error::dim("problem state", n_arm, self.state.n_arm()));
        }
        let nu = self.model.control_dim(n_arm);
        if self.costs.control_weights.len() != nu {
            return Err(Error::dim("control weights", nu, self.costs.control_weights.len()));
        }
        for g in &self.constraints {
            let (on_state, start) = g.placement(self.model);
            let limit = if on_state { self.model.state_dim(n_arm) } else { nu };
            if g.lower.len() != g.upper.len() {
                return Err(Error::dim("constraint bounds", g.lower.len(), g.upper.len()));
            }
            if g.kind.applies_to(self.model) && start + g.lower.len() > limit {
                return Err(Error::dim("constraint group", limit - start, g.lower.len()));
            }
        }
        self.settings.validate()
    }
}

/// The NMPC instance seen as a discrete-time problem: RK4 steps of `dt`,
/// stage costs integrated with the rectangle rule.
struct Discretized<'a> {
    ctx: CostContext<'a>,
    x0: DVector<f64>,
    dt: f64,
    steps: usize,
    mode: HessianMode,
    n_arm: usize,
}

impl OptimalControlProblem for Discretized<'_> {
    fn state_dim(&self) -> usize {
        self.ctx.model.state_dim(self.n_arm)
    }
    fn control_dim(&self) -> usize {
        self.ctx.model.control_dim(self.n_arm)
    }
    fn steps(&self) -> usize {
        self.steps
    }
    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        integrate(self.ctx.model, x, u, self.dt)
    }
    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        rk4_step_jacobians(self.ctx.model, x, u, self.dt)
    }
    fn stage_cost(&self, _: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.dt * intermediate_cost(&self.ctx, x, u)
    }
    fn stage_quadratic(&self, _: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageQuadratic {
        let q = intermediate_quadratic(&self.ctx, x, u, self.mode);
        let dt = self.dt;
        StageQuadratic {
            l: q.l * dt,
            lx: q.lx * dt,
            lu: q.lu * dt,
            lxx: q.lxx * dt,
            luu: q.luu * dt,
            lux: q.lux * dt,
        }
    }
    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        terminal_cost(&self.ctx, x)
    }
    fn terminal_quadratic(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        terminal_quadratic(&self.ctx, x, self.mode)
    }
    fn state_difference(&self, x: &DVector<f64>, reference: &DVector<f64>) -> DVector<f64> {
        let mut d = x - reference;
        if self.ctx.model.moves_base() {
            d[2] = wrap_angle(d[2]);
        }
        d
    }
}

#[derive(Debug, Clone)]
pub struct SlqResult {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    /// Wall-clock solve time `Δt_p` (s), always positive.
    pub solve_time: f64,
}

fn elapsed_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64().max(1e-9)
}

/// Solve `p` from zero controls, or from `warm` when its shape matches.
pub fn slq_solve(p: &NmpcProblem, chain: &KinematicChain, warm: Option<&[DVector<f64>]>) -> Result<SlqResult> {
    let start = Instant::now();
    p.check(chain)?;
    let inst = Discretized {
        ctx: CostContext {
            model: p.model,
            chain,
            frozen: &p.state,
            target: &p.target,
            costs: &p.costs,
            constraints: &p.constraints,
            rbf: &p.rbf,
        },
        x0: p.model.state_vector(&p.state),
        dt: p.settings.dt,
        steps: p.settings.steps(),
        mode: p.settings.hessian,
        n_arm: chain.n_joints(),
    };
    let sol = solve(&inst, &p.settings.options(), warm)?;
    Ok(SlqResult {
        controls: sol.controls,
        states: sol.states,
        cost: sol.cost,
        iterations: sol.iterations,
        cost_history: sol.cost_history,
        solve_time: elapsed_since(start),
    })
}

#[derive(Debug, Clone)]
pub struct MpcStep {
    /// Control applied over the first control interval.
    pub control: DVector<f64>,
    /// Wall-clock solve time `Δt_p` (s).
    pub solve_time: f64,
    pub result: SlqResult,
}

/// Receding-horizon wrapper that keeps the shifted previous solution as the
/// next warm start.
#[derive(Debug, Clone)]
pub struct MpcSolver {
    control_interval: f64,
    warm: Option<(ModelIndex, Vec<DVector<f64>>)>,
}

fn shifted(controls: &[DVector<f64>], by: usize) -> Vec<DVector<f64>> {
    let n = controls.len();
    let by = by.min(n);
    let mut out: Vec<_> = controls[by..].to_vec();
    if let Some(last) = controls.last() {
        out.resize(n, last.clone());
    }
    out
}

impl MpcSolver {
    /// `control_interval` is the time between consecutive calls (s).
    pub fn new(control_interval: f64) -> Self {
        Self {
            control_interval,
            warm: None,
        }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn has_warm_start(&self) -> bool {
        self.warm.is_some()
    }

    /// Solve and return the first control. A warm start is reused only while
    /// the model stays the same; errors discard it.
    pub fn mpc_step(&mut self, p: &NmpcProblem, chain: &KinematicChain) -> Result<MpcStep> {
        let warm = match &self.warm {
            Some((m, c)) if *m == p.model => Some(c.as_slice()),
            _ => None,
        };
        match slq_solve(p, chain, warm) {
            Ok(result) => {
                let shift = (self.control_interval / p.settings.dt).round() as usize;
                self.warm = Some((p.model, shifted(&result.controls, shift)));
                Ok(MpcStep {
                    control: result.controls[0].clone(),
                    solve_time: result.solve_time,
                    result,
                })
            }
            Err(e) => {
                self.warm = None;
                Err(e)
            }
        }
    }

    /// Receding-horizon step for an arbitrary discrete-time problem whose
    /// steps are `shift` times shorter than the call interval.
    pub fn step_problem<P: OptimalControlProblem>(
        &mut self,
        p: &P,
        opts: &SlqOptions,
        shift: usize,
    ) -> Result<(DVector<f64>, SlqSolution)> {
        let warm = self.warm.as_ref().map(|(_, c)| c.as_slice());
        match solve(p, opts, warm) {
            Ok(sol) => {
                self.warm = Some((ModelIndex::WholeBody, shifted(&sol.controls, shift)));
                Ok((sol.controls[0].clone(), sol))
            }
            Err(e) => {
                self.warm = None;
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::planar_pose;
    use crate::robot::BaseState;
    use nalgebra::{Translation3, UnitQuaternion};

    fn problem(m: ModelIndex, chain: &KinematicChain, target: Pose3) -> NmpcProblem {
        NmpcProblem {
            model: m,
            costs: CostSpec::default_for(m, chain.n_joints()),
            constraints: ConstraintKind::ALL
                .iter()
                .filter(|k| k.applies_to(m))
                .map(|k| ConstraintGroup::from_chain(*k, chain))
                .collect(),
            state: chain.home_state(BaseState::new(0.2, -0.1, 0.3)),
            target,
            settings: SlqSettings {
                dt: 0.05,
                ..SlqSettings::default()
            },
            rbf: RbfParams::default(),
        }
    }

    fn assert_monotone(r: &SlqResult) {
        for w in r.cost_history.windows(2) {
            assert!(w[1] <= w[0], "{:?}", r.cost_history);
        }
    }

    #[test]
    fn settings_validation() {
        assert!(SlqSettings::default().validate().is_ok());
        assert_eq!(SlqSettings::default().steps(), 100);
        let bad = SlqSettings {
            dt: 0.03,
            ..SlqSettings::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        let opts = SlqSettings::default().options();
        assert_eq!(opts.line_search.len(), 11);
        assert_eq!(*opts.line_search.last().unwrap(), 1.0 / 1024.0);
    }

    #[test]
    fn stationary_problem_returns_zero_controls() {
        let chain = KinematicChain::default();
        for m in ModelIndex::ALL {
            let mut p = problem(m, &chain, Pose3::identity());
            // centred joints put the log barriers at their minimum
            p.state.arm.theta.iter_mut().for_each(|q| *q = 0.0);
            p.target = chain.tracked_frame(m, &p.state).pose;
            let r = slq_solve(&p, &chain, None).unwrap();
            let norm = r.controls.iter().map(|u| u.norm()).fold(0.0, f64::max);
            assert!(norm < 1e-6, "{m:?}: {norm}");
            assert!((r.cost - r.cost_history[0]).abs() < 1e-9);
            assert!(r.solve_time > 0.0);
        }
    }

    #[test]
    fn solves_decrease_cost_and_warm_start_helps() {
        let chain = KinematicChain::default();
        let targets = [
            (ModelIndex::Base, planar_pose(1.0, 0.5, 0.8)),
            (
                ModelIndex::Arm,
                Pose3::from_parts(Translation3::new(0.7, 0.1, 0.9), UnitQuaternion::identity()),
            ),
            (
                ModelIndex::WholeBody,
                Pose3::from_parts(
                    Translation3::new(1.2, 0.4, 0.7),
                    UnitQuaternion::from_euler_angles(0.0, 0.5, 0.2),
                ),
            ),
        ];
        for (m, target) in targets {
            let p = problem(m, &chain, target);
            let first = slq_solve(&p, &chain, None).unwrap();
            assert_monotone(&first);
            assert!(first.cost < first.cost_history[0]);
            assert_eq!(first.states.len(), p.settings.steps() + 1);
            let second = slq_solve(&p, &chain, Some(&first.controls)).unwrap();
            assert_monotone(&second);
            assert!(second.iterations <= first.iterations, "{m:?}");
            assert!(second.cost <= first.cost);
        }
    }

    #[test]
    fn mpc_step_moves_toward_target() {
        let chain = KinematicChain::default();
        let mut p = problem(ModelIndex::Base, &chain, planar_pose(1.0, 0.0, 0.0));
        p.state = chain.home_state(BaseState::new(0.0, 0.0, 0.0));
        let mut mpc = MpcSolver::new(0.05);
        let out = mpc.mpc_step(&p, &chain).unwrap();
        assert!(out.control[0] > 0.0);
        assert!(mpc.has_warm_start());
        assert!(out.solve_time > 0.0);
    }

    #[test]
    fn shift_pads_with_last_control() {
        let c: Vec<_> = (0..4).map(|i| DVector::from_element(1, i as f64)).collect();
        let s = shifted(&c, 2);
        let v: Vec<f64> = s.iter().map(|u| u[0]).collect();
        assert_eq!(v, vec![2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let chain = KinematicChain::default();
        let mut p = problem(ModelIndex::Arm, &chain, Pose3::identity());
        p.costs.control_weights.pop();
        assert!(matches!(slq_solve(&p, &chain, None), Err(Error::Dimension { .. })));
    }
}
