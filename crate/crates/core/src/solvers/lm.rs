//! Damped Gauss-Newton (Levenberg-Marquardt) for small dense problems.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Solver hyperparameters. All values must be positive.
#[derive(Debug, Clone, Serialize)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Factor applied to the damping when a step is rejected.
    pub damping_up: f64,
    /// Factor the damping is divided by when a step is accepted.
    pub damping_down: f64,
    /// Terminate when the max-norm of the gradient J^T r falls below this.
    pub gradient_tol: f64,
    /// Terminate when the step norm falls below `step_tol * (|x| + step_tol)`.
    pub step_tol: f64,
    /// Terminate when an accepted step reduces the cost by less than
    /// `cost_tol` relative to the previous cost.
    pub cost_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            cost_tol: 1e-16,
        }
    }
}

impl LmOptions {
    fn validate(&self) -> Result<()> {
        let positive = self.initial_damping > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 1.0
            && self.gradient_tol > 0.0
            && self.step_tol > 0.0
            && self.cost_tol > 0.0;
        if self.max_iterations == 0 || !positive {
            return Err(Error::numerical("invalid solver options"));
        }
        Ok(())
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    Gradient,
    Step,
    Cost,
    MaxIterations,
}

/// Outcome of a solve. The cost is the plain sum of squared residuals, and
/// `cost_trace` holds the initial cost followed by the cost after every
/// accepted step, so the trace is non-increasing by construction.
#[derive(Debug, Clone, Serialize)]
pub struct LmReport {
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub cost_trace: Vec<f64>,
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Minimize `|r(x)|^2` with analytic Jacobians. Damping scales the diagonal
/// of the normal matrix (Marquardt form), which keeps mixed-unit parameter
/// vectors well conditioned.
pub fn lm_solve<R, J>(
    residual: R,
    jacobian: J,
    x0: DVector<f64>,
    opts: &LmOptions,
) -> Result<(DVector<f64>, LmReport)>
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    opts.validate()?;
    let n = x0.len();
    let mut x = x0;
    let mut r = residual(&x);
    if !all_finite(&r) {
        return Err(Error::numerical("non-finite residual at the initial point"));
    }
    let mut cost = r.norm_squared();
    let mut lambda = opts.initial_damping;
    let mut trace = vec![cost];
    let mut termination = Termination::MaxIterations;

    'outer: for _ in 0..opts.max_iterations {
        let jac = jacobian(&x);
        if jac.nrows() != r.len() || jac.ncols() != n {
            return Err(Error::numerical(format!(
                "jacobian shape {}x{} does not match {} residuals and {} parameters",
                jac.nrows(),
                jac.ncols(),
                r.len(),
                n
            )));
        }
        if !jac.iter().all(|x| x.is_finite()) {
            return Err(Error::numerical("non-finite Jacobian"));
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() < opts.gradient_tol {
            termination = Termination::Gradient;
            break;
        }
        // Diagonal scaling with a floor so unidentifiable directions still
        // get damped.
        let mut dscale = jtj.diagonal();
        let dmax = dscale.amax();
        let floor = if dmax > 0.0 { dmax * 1e-12 } else { 1.0 };
        for d in dscale.iter_mut() {
            *d = d.max(floor);
        }

        loop {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * dscale[i];
            }
            let delta = match a.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= opts.damping_up;
                    if lambda > 1e32 {
                        termination = Termination::Step;
                        break 'outer;
                    }
                    continue;
                }
            };
            if !all_finite(&delta) || delta.norm() < opts.step_tol * (x.norm() + opts.step_tol) {
                termination = Termination::Step;
                break 'outer;
            }
            let x_new = &x + &delta;
            let r_new = residual(&x_new);
            let cost_new = if all_finite(&r_new) {
                r_new.norm_squared()
            } else {
                f64::INFINITY
            };
            if cost_new <= cost {
                let decrease = cost - cost_new;
                x = x_new;
                r = r_new;
                cost = cost_new;
                trace.push(cost);
                lambda = (lambda / opts.damping_down).max(1e-15);
                if decrease < opts.cost_tol * trace[trace.len() - 2] {
                    termination = Termination::Cost;
                    break 'outer;
                }
                break;
            }
            lambda *= opts.damping_up;
            if lambda > 1e32 {
                termination = Termination::Step;
                break 'outer;
            }
        }
    }

    let iterations = trace.len() - 1;
    Ok((
        x,
        LmReport {
            final_cost: cost,
            iterations,
            termination,
            cost_trace: trace,
        },
    ))
}

/// Compare an analytic Jacobian against central finite differences and
/// return the worst per-entry relative discrepancy. The per-column step is
/// `step * max(1, |x_i|)`.
pub fn check_jacobian<R, J>(residual: &R, jacobian: &J, x: &DVector<f64>, step: f64) -> f64
where
    R: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = jacobian(x);
    let mut worst: f64 = 0.0;
    for col in 0..x.len() {
        let h = step * x[col].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[col] += h;
        xm[col] -= h;
        let rp = residual(&xp);
        let rm = residual(&xm);
        for row in 0..analytic.nrows() {
            let fd = (rp[row] - rm[row]) / (2.0 * h);
            let a = analytic[(row, col)];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_consistent_system_solved_in_two_iterations() {
        // r(x) = A x - b with b in the range of A.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.5, -2.0, 1.0]);
        let x_true = DVector::from_vec(vec![1.5, -2.0]);
        let b = &a * &x_true;
        let res = {
            let a = a.clone();
            let b = b.clone();
            move |x: &DVector<f64>| &a * x - &b
        };
        let jac = {
            let a = a.clone();
            move |_: &DVector<f64>| a.clone()
        };
        let (x, report) = lm_solve(res, jac, DVector::zeros(2), &LmOptions::default()).unwrap();
        // The second accepted step already lands on the exact solution (the
        // solver may keep polishing below machine noise afterwards).
        assert!(report.cost_trace.len() >= 3);
        assert!(report.cost_trace[2] <= 1e-10 * report.cost_trace[0]);
        assert!((x - x_true).norm() < 1e-6);
        assert!(report.final_cost < 1e-10);
    }

    #[test]
    fn rosenbrock_reaches_global_minimum() {
        let res = |x: &DVector<f64>| {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        };
        let jac = |x: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
        };
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let (x, report) = lm_solve(res, jac, x0, &LmOptions::default()).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "x = {x:?}");
        assert!(report.final_cost < 1e-12);
    }

    #[test]
    fn nan_residual_at_start_is_an_error() {
        let res = |_: &DVector<f64>| DVector::from_vec(vec![f64::NAN]);
        let jac = |_: &DVector<f64>| DMatrix::zeros(1, 1);
        assert!(matches!(
            lm_solve(res, jac, DVector::zeros(1), &LmOptions::default()),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn cost_trace_is_monotone_non_increasing() {
        let res = |x: &DVector<f64>| {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        };
        let jac = |x: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
        };
        let (_, report) = lm_solve(res, jac, DVector::from_vec(vec![2.0, -3.0]), &LmOptions::default())
            .unwrap();
        for w in report.cost_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn check_jacobian_flags_wrong_entry() {
        let res = |x: &DVector<f64>| {
            DVector::from_vec(vec![x[0] * x[0] + x[1], x[0] * x[1]])
        };
        let good = |x: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[2.0 * x[0], 1.0, x[1], x[0]])
        };
        let bad = |x: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[4.0 * x[0], 1.0, x[1], x[0]])
        };
        let x = DVector::from_vec(vec![1.3, -0.7]);
        assert!(check_jacobian(&res, &good, &x, 1e-6) < 1e-8);
        assert!(check_jacobian(&res, &bad, &x, 1e-6) > 1e-2);
    }

    #[test]
    fn check_jacobian_exact_for_linear_residual() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 4.0, 3.0, 0.0]);
        let res = {
            let a = a.clone();
            move |x: &DVector<f64>| &a * x
        };
        let jac = move |_: &DVector<f64>| a.clone();
        let x = DVector::from_vec(vec![0.3, -0.9]);
        assert!(check_jacobian(&res, &jac, &x, 1e-6) < 1e-10);
    }
}
