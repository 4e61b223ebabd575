//! Damped Newton iteration shared by the ε-problem and homogenized solvers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("Newton failed to converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("time step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<SolverError>,
    },
}

impl From<crate::linalg::LinalgError> for SolverError {
    fn from(e: crate::linalg::LinalgError) -> Self {
        SolverError::LinearSolveFailure(e.to_string())
    }
}

/// When the Jacobian is refactored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JacobianPolicy {
    /// Refactor at every iterate (quadratic convergence).
    Full,
    /// Keep the last factorization, also across time steps, and refactor
    /// only when one iteration reduces the residual by less than the
    /// factor `max_ratio`.
    Lagged { max_ratio: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonSettings {
    /// Absolute tolerance on the lumped-mass weighted residual norm.
    pub tol: f64,
    pub max_iter: usize,
    pub jacobian: JacobianPolicy,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 25,
            jacobian: JacobianPolicy::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    pub iterations: usize,
    pub factorizations: usize,
    pub residual: f64,
}

/// Jacobian factorization owned by a solver.
pub trait Linearization {
    /// Factor the Jacobian at `u`.
    fn refactor(&mut self, u: &[f64]) -> Result<(), SolverError>;
    /// Whether a usable factorization exists.
    fn ready(&self) -> bool;
    fn solve(&self, r: &[f64]) -> Result<Vec<f64>, SolverError>;
}

/// sqrt(Σ rᵢ²/wᵢ).
pub fn weighted_norm(r: &[f64], w: &[f64]) -> f64 {
    r.iter().zip(w).map(|(a, b)| a * a / b).sum::<f64>().sqrt()
}

/// Solves residual(u) = 0 starting from `u`. At least one update is always
/// taken; step halving is used only when a full step increases the
/// residual.
pub fn newton<F>(
    mut u: Vec<f64>,
    residual: F,
    weights: &[f64],
    lin: &mut dyn Linearization,
    settings: &NewtonSettings,
) -> Result<(Vec<f64>, StepDiagnostics), SolverError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut diag = StepDiagnostics::default();
    let mut r = residual(&u);
    let mut rn = weighted_norm(&r, weights);
    let full = matches!(settings.jacobian, JacobianPolicy::Full);
    let mut fresh = false;
    if full || !lin.ready() {
        lin.refactor(&u)?;
        diag.factorizations += 1;
        fresh = true;
    }
    loop {
        if diag.iterations >= settings.max_iter {
            return Err(SolverError::NewtonDiverged {
                iterations: diag.iterations,
                residual: rn,
            });
        }
        let d = lin.solve(&r)?;
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let trial: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a - lambda * b).collect();
            let rt = residual(&trial);
            let rtn = weighted_norm(&rt, weights);
            if rtn <= rn || rtn <= settings.tol {
                accepted = Some((trial, rt, rtn));
                break;
            }
            lambda *= 0.5;
        }
        let Some((trial, rt, rtn)) = accepted else {
            if !fresh {
                lin.refactor(&u)?;
                diag.factorizations += 1;
                fresh = true;
                continue;
            }
            return Err(SolverError::NewtonDiverged {
                iterations: diag.iterations,
                residual: rn,
            });
        };
        diag.iterations += 1;
        let ratio = if rn > 0.0 { rtn / rn } else { 0.0 };
        u = trial;
        r = rt;
        rn = rtn;
        if rn <= settings.tol {
            break;
        }
        fresh = false;
        let refresh = match settings.jacobian {
            JacobianPolicy::Full => true,
            JacobianPolicy::Lagged { max_ratio } => ratio > max_ratio,
        };
        if refresh {
            lin.refactor(&u)?;
            diag.factorizations += 1;
            fresh = true;
        }
    }
    diag.residual = rn;
    Ok((u, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        deriv: fn(f64) -> f64,
        slope: Option<f64>,
    }

    impl Linearization for Scalar {
        fn refactor(&mut self, u: &[f64]) -> Result<(), SolverError> {
            self.slope = Some((self.deriv)(u[0]));
            Ok(())
        }
        fn ready(&self) -> bool {
            self.slope.is_some()
        }
        fn solve(&self, r: &[f64]) -> Result<Vec<f64>, SolverError> {
            Ok(vec![r[0] / self.slope.unwrap()])
        }
    }

    #[test]
    fn quadratic_convergence_on_scalar_equation() {
        // u + tanh(u) = 1
        let mut lin = Scalar {
            deriv: |u| 1.0 + 1.0 - u.tanh().powi(2),
            slope: None,
        };
        let (u, d) = newton(
            vec![0.0],
            |u| vec![u[0] + u[0].tanh() - 1.0],
            &[1.0],
            &mut lin,
            &NewtonSettings::default(),
        )
        .unwrap();
        assert!((u[0] + u[0].tanh() - 1.0).abs() < 1e-10);
        assert!(d.iterations <= 6);
    }

    #[test]
    fn lagged_jacobian_converges() {
        let mut lin = Scalar {
            deriv: |u| 1.0 + 1.0 - u.tanh().powi(2),
            slope: None,
        };
        let s = NewtonSettings {
            jacobian: JacobianPolicy::Lagged { max_ratio: 0.5 },
            ..Default::default()
        };
        let (u, d) = newton(vec![0.0], |u| vec![u[0] + u[0].tanh() - 1.0], &[1.0], &mut lin, &s).unwrap();
        assert!((u[0] + u[0].tanh() - 1.0).abs() < 1e-10);
        assert!(d.factorizations <= d.iterations);
    }

    #[test]
    fn linear_problem_takes_one_iteration() {
        let mut lin = Scalar {
            deriv: |_| 3.0,
            slope: None,
        };
        let (_, d) = newton(vec![0.0], |u| vec![3.0 * u[0] - 1.0], &[1.0], &mut lin, &NewtonSettings::default()).unwrap();
        assert_eq!(d.iterations, 1);
    }
}
