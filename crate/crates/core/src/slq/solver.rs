//! Sequential linear-quadratic iterations: nonlinear rollout, local LQ
//! approximation, Riccati backward pass, backtracking forward pass.

use nalgebra::{DMatrix, DVector};

use super::cost::StageQuadratic;
use crate::error::{Error, Result};

/// Discrete-time optimal control problem over a fixed number of steps.
pub trait OptimalControlProblem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn steps(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn dynamics_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);

    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn stage_quadratic(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageQuadratic;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn terminal_quadratic(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);

    /// Deviation `x - reference`, overridden for angular coordinates.
    fn state_difference(&self, x: &DVector<f64>, reference: &DVector<f64>) -> DVector<f64> {
        x - reference
    }
}

#[derive(Debug, Clone)]
pub struct SlqOptions {
    pub max_iterations: usize,
    /// Stop once the relative cost decrease of an accepted step falls below this.
    pub tolerance: f64,
    /// Step lengths tried in order by the forward pass.
    pub line_search: Vec<f64>,
    /// Lower bound on the eigenvalues of the control Hessian.
    pub min_control_curvature: f64,
}

impl Default for SlqOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            tolerance: 1e-4,
            line_search: (0..=10).map(|i| 0.5f64.powi(i)).collect(),
            min_control_curvature: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlqSolution {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    /// Backward passes performed.
    pub iterations: usize,
    /// Cost of the initial rollout followed by every accepted iterate.
    pub cost_history: Vec<f64>,
}

struct Rollout {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    cost: f64,
}

fn rollout_open_loop<P: OptimalControlProblem>(p: &P, controls: Vec<DVector<f64>>) -> Rollout {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut x = p.initial_state();
    let mut cost = 0.0;
    for (k, u) in controls.iter().enumerate() {
        cost += p.stage_cost(k, &x, u);
        let next = p.dynamics(&x, u);
        states.push(x);
        x = next;
    }
    cost += p.terminal_cost(&x);
    states.push(x);
    Rollout { states, controls, cost }
}

struct Gains {
    feedforward: Vec<DVector<f64>>,
    feedback: Vec<DMatrix<f64>>,
}

/// Clamp the spectrum of a symmetric matrix from below.
fn regularize(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let shifted = m - DMatrix::identity(n, n) * floor;
    if shifted.cholesky().is_some() {
        return m.clone();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clamped = eig
        .eigenvalues
        .map(|v| if v.is_finite() { v.max(floor) } else { floor });
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

fn backward_pass<P: OptimalControlProblem>(p: &P, nominal: &Rollout, floor: f64) -> Option<Gains> {
    let n = p.steps();
    let (_, mut vx, mut vxx) = p.terminal_quadratic(&nominal.states[n]);
    let mut feedforward = vec![DVector::zeros(0); n];
    let mut feedback = vec![DMatrix::zeros(0, 0); n];
    for k in (0..n).rev() {
        let x = &nominal.states[k];
        let u = &nominal.controls[k];
        let (a, b) = p.dynamics_jacobians(x, u);
        let q = p.stage_quadratic(k, x, u);
        let qx = &q.lx + a.tr_mul(&vx);
        let qu = &q.lu + b.tr_mul(&vx);
        let va = &vxx * &a;
        let vb = &vxx * &b;
        let qxx = &q.lxx + a.tr_mul(&va);
        let quu = regularize(&(&q.luu + b.tr_mul(&vb)), floor);
        let qux = &q.lux + b.tr_mul(&va);
        let chol = quu.clone().cholesky()?;
        let kff = -chol.solve(&qu);
        let kfb = -chol.solve(&qux);
        let kt_quu = kfb.tr_mul(&quu);
        vx = qx + &kt_quu * &kff + kfb.tr_mul(&qu) + qux.tr_mul(&kff);
        let new_vxx = qxx + &kt_quu * &kfb + kfb.tr_mul(&qux) + qux.tr_mul(&kfb);
        vxx = (&new_vxx + new_vxx.transpose()) * 0.5;
        feedforward[k] = kff;
        feedback[k] = kfb;
    }
    Some(Gains { feedforward, feedback })
}

fn forward_pass<P: OptimalControlProblem>(p: &P, nominal: &Rollout, gains: &Gains, alpha: f64) -> Rollout {
    let n = p.steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut x = p.initial_state();
    let mut cost = 0.0;
    for k in 0..n {
        let dx = p.state_difference(&x, &nominal.states[k]);
        let u = &nominal.controls[k] + &gains.feedforward[k] * alpha + &gains.feedback[k] * dx;
        cost += p.stage_cost(k, &x, &u);
        let next = p.dynamics(&x, &u);
        states.push(x);
        controls.push(u);
        x = next;
        if !cost.is_finite() {
            break;
        }
    }
    if states.len() == n {
        cost += p.terminal_cost(&x);
        states.push(x);
    } else {
        cost = f64::NAN;
    }
    Rollout { states, controls, cost }
}

/// Run SLQ iterations from `initial` (zeros when absent or mismatched).
///
/// Accepted iterates strictly decrease the total cost. Returns
/// [`Error::SolverDiverged`] if the initial rollout is not finite or a whole
/// line search produced only non-finite rollouts.
pub fn solve<P: OptimalControlProblem>(
    p: &P,
    opts: &SlqOptions,
    initial: Option<&[DVector<f64>]>,
) -> Result<SlqSolution> {
    let n = p.steps();
    let nu = p.control_dim();
    let controls = match initial {
        Some(c) if c.len() == n && c.iter().all(|u| u.len() == nu) => c.to_vec(),
        _ => vec![DVector::zeros(nu); n],
    };
    let mut nominal = rollout_open_loop(p, controls);
    if !nominal.cost.is_finite() {
        return Err(Error::SolverDiverged {
            iterations: 0,
            last_cost: nominal.cost,
            last_controls: None,
        });
    }
    let mut history = vec![nominal.cost];
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let Some(gains) = backward_pass(p, &nominal, opts.min_control_curvature) else {
            break;
        };
        let mut accepted = None;
        let mut any_finite = false;
        for &alpha in &opts.line_search {
            let candidate = forward_pass(p, &nominal, &gains, alpha);
            if candidate.cost.is_finite() {
                any_finite = true;
                if candidate.cost < nominal.cost {
                    accepted = Some((alpha, candidate));
                    break;
                }
            }
        }
        if !any_finite {
            return Err(Error::SolverDiverged {
                iterations,
                last_cost: nominal.cost,
                last_controls: Some(nominal.controls.iter().map(|u| u.as_slice().to_vec()).collect()),
            });
        }
        let Some((alpha, candidate)) = accepted else {
            break;
        };
        let previous = nominal.cost;
        nominal = candidate;
        history.push(nominal.cost);
        log::debug!(target: "slq", "iteration={iterations} cost={:.9e} step={alpha}", nominal.cost);
        if (previous - nominal.cost) / previous.abs().max(1e-12) < opts.tolerance {
            break;
        }
    }
    Ok(SlqSolution {
        controls: nominal.controls,
        states: nominal.states,
        cost: nominal.cost,
        iterations,
        cost_history: history,
    })
}

/// Time-invariant linear dynamics with quadratic cost
/// `Σ xᵀQx + uᵀRu + x_Nᵀ Q_f x_N`.
#[derive(Debug, Clone)]
pub struct LinearQuadratic {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub steps: usize,
}

impl OptimalControlProblem for LinearQuadratic {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn steps(&self) -> usize {
        self.steps
    }
    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn dynamics_jacobians(&self, _: &DVector<f64>, _: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
    fn stage_cost(&self, _: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }
    fn stage_quadratic(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageQuadratic {
        StageQuadratic {
            l: self.stage_cost(k, x, u),
            lx: &self.q * x * 2.0,
            lu: &self.r * u * 2.0,
            lxx: &self.q * 2.0,
            luu: &self.r * 2.0,
            lux: DMatrix::zeros(u.len(), x.len()),
        }
    }
    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.qf * x))
    }
    fn terminal_quadratic(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        (self.terminal_cost(x), &self.qf * x * 2.0, &self.qf * 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar integrator with quadratic cost, small enough to check by hand.
    struct Scalar;

    impl OptimalControlProblem for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn steps(&self) -> usize {
            1
        }
        fn initial_state(&self) -> DVector<f64> {
            DVector::from_element(1, 1.0)
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            x + u
        }
        fn dynamics_jacobians(&self, _: &DVector<f64>, _: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            (DMatrix::identity(1, 1), DMatrix::identity(1, 1))
        }
        fn stage_cost(&self, _: usize, _: &DVector<f64>, u: &DVector<f64>) -> f64 {
            u[0] * u[0]
        }
        fn stage_quadratic(&self, _: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageQuadratic {
            StageQuadratic {
                l: u[0] * u[0],
                lx: DVector::zeros(x.len()),
                lu: u * 2.0,
                lxx: DMatrix::zeros(1, 1),
                luu: DMatrix::identity(1, 1) * 2.0,
                lux: DMatrix::zeros(1, 1),
            }
        }
        fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
            x[0] * x[0]
        }
        fn terminal_quadratic(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
            (x[0] * x[0], x * 2.0, DMatrix::identity(1, 1) * 2.0)
        }
    }

    #[test]
    fn one_step_scalar_optimum() {
        // min u² + (1 + u)² → u = -1/2, cost 1/2
        let sol = solve(&Scalar, &SlqOptions::default(), None).unwrap();
        assert!((sol.controls[0][0] + 0.5).abs() < 1e-12);
        assert!((sol.cost - 0.5).abs() < 1e-12);
        assert_eq!(sol.cost_history, vec![1.0, 0.5]);
    }

    #[test]
    fn regularize_clamps_negative_curvature() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -3.0]);
        let r = regularize(&m, 1e-6);
        let eig = r.symmetric_eigen();
        assert!(eig.eigenvalues.min() >= 1e-6 - 1e-15);
        let pd = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(regularize(&pd, 1e-6), pd);
    }

    struct Exploding;

    impl OptimalControlProblem for Exploding {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn steps(&self) -> usize {
            3
        }
        fn initial_state(&self) -> DVector<f64> {
            DVector::from_element(1, f64::NAN)
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            x + u
        }
        fn dynamics_jacobians(&self, _: &DVector<f64>, _: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
            (DMatrix::identity(1, 1), DMatrix::identity(1, 1))
        }
        fn stage_cost(&self, _: usize, x: &DVector<f64>, _: &DVector<f64>) -> f64 {
            x[0]
        }
        fn stage_quadratic(&self, _: usize, _: &DVector<f64>, _: &DVector<f64>) -> StageQuadratic {
            unreachable!()
        }
        fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
            x[0]
        }
        fn terminal_quadratic(&self, _: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
            unreachable!()
        }
    }

    #[test]
    fn non_finite_rollout_is_divergence() {
        let err = solve(&Exploding, &SlqOptions::default(), None).unwrap_err();
        assert!(matches!(err, Error::SolverDiverged { iterations: 0, .. }));
    }
}
