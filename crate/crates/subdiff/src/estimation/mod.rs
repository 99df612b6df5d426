//! Two-step estimation: moment conditions for the diffusion parameters, then
//! an eigenfunction martingale estimating function for the clock parameters.

mod covariance;
mod ef;
pub(crate) mod mle;
mod pipeline;
mod step1;
mod step2;

pub use covariance::{outer_sample, plugin_covariance, CovarianceBlock, OuterMode, OuterSample, PluginCovariance, Theta1Sensitivity};
pub use ef::{eigen_ef, standardized_ef, EfSetup, PhiTable, ProductMode, WeightMatrix};
pub use mle::{mle_fit, mle_information, mle_information_quadrature, MleFit, MleInformation, MLE_PARAMS};
pub use pipeline::{
    build_eigensystem, build_setup, covariance_at, replication_se, sensitivity, two_step_estimate, EigenMode, EigenSummary,
    EstimationConfig, EstimationReport, ReplicationSe,
};
pub use step1::{a11_matrix, step1_estimate, step1_moments, theta1_indices, Step1Result};
pub use step2::{initial_guess, step2_estimate, Step2Result};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::solve_with_ridge;

/// Weighting scheme for the eigenfunction estimating function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Ks,
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence when the self-normalized estimating function is below
    /// `tol` in every coordinate (units of its standard deviation).
    pub tol: f64,
    /// Accepted, flagged as best effort, when the line search stalls below this.
    pub loose_tol: f64,
    /// Relative step of the central-difference Jacobian.
    pub rel_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 200,
            tol: 1e-8,
            loose_tol: 1e-4,
            rel_step: 1e-6,
        }
    }
}

/// Iteration history of a root solve.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SolverTrace {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Converged only to a looser tolerance after the line search stalled.
    pub best_effort: bool,
}

/// Damped Newton iteration with a central-difference Jacobian. `feasible`
/// rejects trial points; the step is halved until the residual decreases.
pub(crate) fn damped_newton<F, P>(mut f: F, feasible: P, x0: &[f64], tol: f64, loose_tol: f64, opts: &NewtonOptions) -> Result<(Vec<f64>, SolverTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    P: Fn(&[f64]) -> bool,
{
    let p = x0.len();
    let mut x = x0.to_vec();
    if !feasible(&x) {
        return Err(Error::Domain("initial point violates parameter constraints".into()));
    }
    let mut r = f(&x)?;
    let norm_inf = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let norm2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut trace = SolverTrace::default();
    trace.residuals.push(norm_inf(&r));
    for it in 0..opts.max_iter {
        trace.iterations = it;
        if norm_inf(&r) <= tol {
            trace.converged = true;
            return Ok((x, trace));
        }
        let mut jac = DMatrix::zeros(r.len(), p);
        for j in 0..p {
            let h = opts.rel_step * x[j].abs().max(1e-8);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm, width) = match (feasible(&xp), feasible(&xm)) {
                (true, true) => (f(&xp)?, f(&xm)?, 2.0 * h),
                (true, false) => (f(&xp)?, r.clone(), h),
                (false, true) => (r.clone(), f(&xm)?, h),
                (false, false) => return Err(Error::solver("no feasible difference step", it, norm_inf(&r))),
            };
            for i in 0..r.len() {
                jac[(i, j)] = (fp[i] - fm[i]) / width;
            }
        }
        let rhs = DMatrix::from_column_slice(r.len(), 1, &r) * -1.0;
        let (step, _) = solve_with_ridge(&jac, &rhs, 1e-15)?;
        let mut t = 1.0;
        let base = norm2(&r);
        let mut accepted = false;
        while t > 1e-12 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if feasible(&trial) {
                if let Ok(rt) = f(&trial) {
                    if norm2(&rt) < base * (1.0 - 1e-4 * t) || norm_inf(&rt) <= tol {
                        x = trial;
                        r = rt;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        trace.residuals.push(norm_inf(&r));
        if !accepted {
            trace.iterations = it + 1;
            if norm_inf(&r) <= loose_tol {
                trace.best_effort = true;
                return Ok((x, trace));
            }
            return Err(Error::solver("line search stalled", it + 1, norm_inf(&r)));
        }
    }
    trace.iterations = opts.max_iter;
    if norm_inf(&r) <= tol {
        trace.converged = true;
        return Ok((x, trace));
    }
    if norm_inf(&r) <= loose_tol {
        trace.best_effort = true;
        return Ok((x, trace));
    }
    Err(Error::solver("iteration limit reached", opts.max_iter, norm_inf(&r)))
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}
