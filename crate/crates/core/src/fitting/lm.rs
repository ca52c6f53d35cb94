//! Levenberg-Marquardt on a stacked residual vector.
//!
//! Minimizes `||r(x)||^2` with Marquardt-scaled damping. A step is accepted
//! only when it strictly lowers the cost, so the recorded trace is strictly
//! decreasing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Failure while evaluating a residual or Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// The point is outside the feasible region (e.g. a keypoint behind the
    /// camera); the trial step is rejected and damping increased.
    Infeasible(String),
    /// Unrecoverable failure.
    Fatal(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolverError {
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite {
        what: &'static str,
        iteration: usize,
    },
    #[error("initial point is infeasible: {0}")]
    InfeasibleStart(String),
    #[error("evaluation failed at iteration {iteration}: {message}")]
    Evaluation { iteration: usize, message: String },
}

pub trait LeastSquaresProblem<T: Real> {
    fn residuals(&self, x: &DVector<T>) -> Result<DVector<T>, EvalError>;
    fn jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>, EvalError>;
    /// Maps a parameter vector to an equivalent representative (same
    /// residuals). Called on every trial point.
    fn normalize(&self, _x: &mut DVector<T>) {}
}

/// Adapter for closures, used for small test problems.
pub struct FnProblem<R, J> {
    pub residuals: R,
    pub jacobian: J,
}

impl<T, R, J> LeastSquaresProblem<T> for FnProblem<R, J>
where
    T: Real,
    R: Fn(&DVector<T>) -> DVector<T>,
    J: Fn(&DVector<T>) -> DMatrix<T>,
{
    fn residuals(&self, x: &DVector<T>) -> Result<DVector<T>, EvalError> {
        Ok((self.residuals)(x))
    }
    fn jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>, EvalError> {
        Ok((self.jacobian)(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when `||dx|| < step_tolerance * (||x|| + step_tolerance)`.
    pub step_tolerance: f64,
    /// Stop when the largest gradient component falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step lowers the cost by less than this
    /// fraction.
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            relative_tolerance: 1e-10,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 0.3,
            max_damping: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    RelativeDecrease,
    MaxIterations,
    /// Damping grew past its bound without finding a descent step.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Infinity norm of the gradient `J^T r` at the last Jacobian.
    pub gradient_norm: f64,
    pub termination: Termination,
    /// Cost at the start and after every accepted step.
    pub trace: Vec<f64>,
}

impl Diagnostics {
    pub fn is_strictly_decreasing(&self) -> bool {
        self.trace.windows(2).all(|w| w[1] < w[0])
    }
}

fn finite<T: Real>(v: impl IntoIterator<Item = T>) -> bool {
    v.into_iter().all(|x| x.is_finite())
}

pub fn solve_least_squares<T: Real, P: LeastSquaresProblem<T>>(
    problem: &P,
    init: DVector<T>,
    cfg: &SolverConfig,
) -> Result<(DVector<T>, Diagnostics), SolverError> {
    let mut x = init;
    problem.normalize(&mut x);
    let mut r = match problem.residuals(&x) {
        Ok(r) => r,
        Err(EvalError::Infeasible(m)) => return Err(SolverError::InfeasibleStart(m)),
        Err(EvalError::Fatal(message)) => {
            return Err(SolverError::Evaluation {
                iteration: 0,
                message,
            })
        }
    };
    if !finite(r.iter().copied()) {
        return Err(SolverError::NonFinite {
            what: "residual",
            iteration: 0,
        });
    }
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(SolverError::NonFinite {
            what: "cost",
            iteration: 0,
        });
    }
    let mut diag = Diagnostics {
        iterations: 0,
        accepted_steps: 0,
        initial_cost: cost.as_f64(),
        final_cost: cost.as_f64(),
        gradient_norm: 0.0,
        termination: Termination::MaxIterations,
        trace: vec![cost.as_f64()],
    };
    let mut mu = T::lit(cfg.initial_damping);
    let step_tol = T::lit(cfg.step_tolerance);

    'outer: loop {
        let jac = problem.jacobian(&x).map_err(|e| SolverError::Evaluation {
            iteration: diag.iterations,
            message: match e {
                EvalError::Infeasible(m) | EvalError::Fatal(m) => m,
            },
        })?;
        if !finite(jac.iter().copied()) {
            return Err(SolverError::NonFinite {
                what: "jacobian",
                iteration: diag.iterations,
            });
        }
        let g = jac.tr_mul(&r);
        diag.gradient_norm = g.amax().as_f64();
        if diag.gradient_norm <= cfg.gradient_tolerance {
            diag.termination = Termination::Gradient;
            break;
        }
        if diag.iterations >= cfg.max_iterations {
            diag.termination = Termination::MaxIterations;
            break;
        }
        diag.iterations += 1;

        let jtj = jac.tr_mul(&jac);
        let max_diag = jtj.diagonal().max();
        let floor = max_diag * T::lit(1e-12) + T::lit(1e-30);
        let scale = jtj.diagonal().map(|d| d.max(floor));

        loop {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu * scale[i];
            }
            let Some(chol) = a.cholesky() else {
                mu *= T::lit(cfg.damping_increase);
                if mu.as_f64() > cfg.max_damping {
                    diag.termination = Termination::Stalled;
                    break 'outer;
                }
                continue;
            };
            let step = -chol.solve(&g);
            if step.norm() <= step_tol * (x.norm() + step_tol) {
                diag.termination = Termination::Step;
                break 'outer;
            }
            let mut trial = &x + &step;
            problem.normalize(&mut trial);
            let evaluated = match problem.residuals(&trial) {
                Ok(rt) => {
                    if !finite(rt.iter().copied()) {
                        return Err(SolverError::NonFinite {
                            what: "residual",
                            iteration: diag.iterations,
                        });
                    }
                    Some(rt)
                }
                Err(EvalError::Infeasible(_)) => None,
                Err(EvalError::Fatal(message)) => {
                    return Err(SolverError::Evaluation {
                        iteration: diag.iterations,
                        message,
                    })
                }
            };
            if let Some(rt) = evaluated {
                let trial_cost = rt.norm_squared();
                if trial_cost < cost {
                    let decrease = cost - trial_cost;
                    let relative_small = decrease <= T::lit(cfg.relative_tolerance) * cost;
                    x = trial;
                    r = rt;
                    cost = trial_cost;
                    diag.accepted_steps += 1;
                    diag.trace.push(cost.as_f64());
                    mu = (mu * T::lit(cfg.damping_decrease)).max(T::lit(1e-15));
                    if relative_small {
                        diag.termination = Termination::RelativeDecrease;
                        break 'outer;
                    }
                    continue 'outer;
                }
            }
            mu *= T::lit(cfg.damping_increase);
            if mu.as_f64() > cfg.max_damping {
                diag.termination = Termination::Stalled;
                break 'outer;
            }
        }
    }
    diag.final_cost = cost.as_f64();
    Ok((x, diag))
}
