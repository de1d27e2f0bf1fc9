use nalgebra::{DMatrix, DVector};

use crate::robot::{model_derivative, ModelIndex};

/// Analytic Jacobians `(∂f/∂s, ∂f/∂u)` of the continuous-time model `f_m`.
pub fn linearize(m: ModelIndex, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = x.len();
    let nu = u.len();
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    match m {
        ModelIndex::Arm => b.fill_with_identity(),
        ModelIndex::Base | ModelIndex::WholeBody => {
            let (s, c) = x[2].sin_cos();
            a[(0, 2)] = -u[0] * s;
            a[(1, 2)] = u[0] * c;
            b[(0, 0)] = c;
            b[(1, 0)] = s;
            b[(2, 1)] = 1.0;
            for i in 3..nx {
                b[(i, i - 1)] = 1.0;
            }
        }
    }
    (a, b)
}

/// Jacobians of one RK4 step of length `dt`, differentiated through every stage.
pub fn rk4_step_jacobians(m: ModelIndex, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = x.len();
    let nu = u.len();
    let eye = DMatrix::<f64>::identity(nx, nx);

    let k1 = model_derivative(m, x, u);
    let (a1, b1) = linearize(m, x, u);

    let x2 = x + &k1 * (0.5 * dt);
    let k2 = model_derivative(m, &x2, u);
    let (a2, b2) = linearize(m, &x2, u);
    let k2x = &a2 * (&eye + &a1 * (0.5 * dt));
    let k2u = &a2 * (&b1 * (0.5 * dt)) + &b2;

    let x3 = x + &k2 * (0.5 * dt);
    let k3 = model_derivative(m, &x3, u);
    let (a3, b3) = linearize(m, &x3, u);
    let k3x = &a3 * (&eye + &k2x * (0.5 * dt));
    let k3u = &a3 * (&k2u * (0.5 * dt)) + &b3;

    let x4 = x + &k3 * dt;
    let (a4, b4) = linearize(m, &x4, u);
    let k4x = &a4 * (&eye + &k3x * dt);
    let k4u = &a4 * (&k3u * dt) + &b4;

    let fx = &eye + (a1 + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
    let fu = (b1 + k2u * 2.0 + k3u * 2.0 + k4u) * (dt / 6.0);
    debug_assert_eq!(fu.shape(), (nx, nu));
    (fx, fu)
}
