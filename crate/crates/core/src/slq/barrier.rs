use serde::{Deserialize, Serialize};

/// Relaxed log-barrier parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbfParams {
    /// Barrier weight.
    pub mu: f64,
    /// Margin below which the log is replaced by a quadratic.
    pub delta: f64,
}

impl Default for RbfParams {
    fn default() -> Self {
        Self { mu: 1e-2, delta: 1e-2 }
    }
}

/// Relaxed barrier penalty for a constraint margin `h` (feasible when `h ≥ 0`).
///
/// `-μ ln h` above `δ`, and below it the quadratic that matches value, slope
/// and curvature at `h = δ`, so the penalty is defined for every `h`.
pub fn rbf(h: f64, p: &RbfParams) -> f64 {
    rbf_derivatives(h, p).0
}

/// Value, first and second derivative of [`rbf`] with respect to `h`.
pub fn rbf_derivatives(h: f64, p: &RbfParams) -> (f64, f64, f64) {
    let RbfParams { mu, delta } = *p;
    if h >= delta {
        (-mu * h.ln(), -mu / h, mu / (h * h))
    } else {
        let z = (h - 2.0 * delta) / delta;
        let value = mu * (0.5 * (z * z - 1.0) - delta.ln());
        (value, mu * z / delta, mu / (delta * delta))
    }
}
