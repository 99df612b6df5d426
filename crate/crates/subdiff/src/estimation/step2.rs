use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;

use super::ef::{eigen_ef, standardized_ef, EfSetup, PhiTable, WeightMatrix};
use super::{damped_newton, NewtonOptions, SolverTrace};

#[derive(Clone, Debug, Serialize)]
pub struct Step2Result {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub initial: Vec<f64>,
    pub trace: SolverTrace,
    /// Multi-start points tried after the first solve failed.
    pub restarts: usize,
    /// Weight solves that needed the ridge fallback at the estimate.
    pub ridge_solves: usize,
}

/// Starting point from the lag-one autoregression of each eigenfunction,
/// whose slope estimates `exp(-phi(-lambda_m) delta)`; the clock parameters
/// are fitted to the implied exponents on a progressively refined log grid.
pub fn initial_guess(setup: &EfSetup, table: &PhiTable) -> Result<Vec<f64>> {
    let n = table.len().saturating_sub(1);
    if n == 0 {
        return Err(Error::DegenerateData("need at least one transition".into()));
    }
    let mut rates = Vec::new();
    for m in 1..=setup.m {
        let cross: f64 = (0..n).map(|i| table.row(i)[m] * table.row(i + 1)[m]).sum();
        let own: f64 = (0..n).map(|i| table.row(i)[m] * table.row(i)[m]).sum();
        let rho = cross / own;
        if rho > 1e-6 && rho < 1.0 {
            rates.push((m, -rho.ln() / setup.delta));
        }
    }
    if rates.len() < setup.p2() {
        rates = (1..=setup.m).map(|m| (m, -setup.eig.eigenvalue(m))).collect();
    }
    let base = setup.theta2(&setup.template);
    let loss = |theta: &[f64]| -> f64 {
        let Ok(sub) = setup.subordinator(theta) else { return f64::INFINITY };
        if !sub.violations().is_empty() {
            return f64::INFINITY;
        }
        rates
            .iter()
            .map(|&(m, r)| {
                let model = sub.laplace_exponent(-setup.eig.eigenvalue(m));
                (model.ln() - r.ln()).powi(2)
            })
            .sum()
    };
    let p = setup.p2();
    // log-grid over four decades around the configured values, then zoom
    let mut centre: Vec<f64> = base.iter().map(|v| if v.is_finite() && *v > 0.0 { v.ln() } else { 0.0 }).collect();
    let mut half_width = 4.0 * std::f64::consts::LN_10;
    let points = 21usize;
    let mut best = (f64::INFINITY, centre.clone());
    for _ in 0..8 {
        let total = points.pow(p as u32);
        for idx in 0..total {
            let mut rem = idx;
            let theta: Vec<f64> = (0..p)
                .map(|j| {
                    let k = rem % points;
                    rem /= points;
                    (centre[j] - half_width + 2.0 * half_width * k as f64 / (points - 1) as f64).exp()
                })
                .collect();
            let l = loss(&theta);
            if l < best.0 {
                best = (l, theta.iter().map(|v| v.ln()).collect());
            }
        }
        centre = best.1.clone();
        half_width *= 0.25;
    }
    if !best.0.is_finite() {
        return Err(Error::solver("no admissible starting point for the clock parameters", 0, f64::NAN));
    }
    Ok(best.1.iter().map(|v| v.exp()).collect())
}

/// Solves `F_n(theta2) = 0` by damped Newton on the self-normalized
/// estimating function from `init` (or the autocorrelation start), falling
/// back to a 5 x 5 log-grid multi-start.
pub fn step2_estimate(
    setup: &EfSetup,
    table: &PhiTable,
    weight: &WeightMatrix,
    right: Option<&DMatrix<f64>>,
    init: Option<&[f64]>,
    opts: &NewtonOptions,
    exec: Execution,
) -> Result<Step2Result> {
    let residual = |theta: &[f64]| -> f64 {
        standardized_ef(setup, table, theta, weight, right, exec)
            .map(|(v, _)| v.amax())
            .unwrap_or(f64::INFINITY)
    };
    let start = match init {
        Some(v) => v.to_vec(),
        None => {
            // the autoregression start or the configured values, whichever fits better
            let guess = initial_guess(setup, table)?;
            let configured = setup.theta2(&setup.template);
            if residual(&configured) < residual(&guess) {
                configured
            } else {
                guess
            }
        }
    };
    let (tol, loose) = (opts.tol, opts.loose_tol);
    let f = |theta: &[f64]| -> Result<Vec<f64>> {
        Ok(standardized_ef(setup, table, theta, weight, right, exec)?.0.iter().cloned().collect())
    };
    let feasible = |theta: &[f64]| -> bool {
        theta.iter().all(|v| v.is_finite() && *v > 0.0)
            && setup.subordinator(theta).map(|s| s.violations().is_empty()).unwrap_or(false)
    };
    let mut restarts = 0;
    let mut result = damped_newton(f, feasible, &start, tol, loose, opts);
    if result.is_err() {
        let factors = [0.1, 0.3, 1.0, 3.0, 10.0];
        let p = setup.p2();
        let total = factors.len().pow(p as u32);
        let mut best: Option<(Vec<f64>, SolverTrace)> = None;
        for idx in 0..total {
            let mut rem = idx;
            let trial: Vec<f64> = start
                .iter()
                .map(|v| {
                    let k = rem % factors.len();
                    rem /= factors.len();
                    v * factors[k]
                })
                .collect();
            if trial == start || !feasible(&trial) {
                continue;
            }
            restarts += 1;
            if let Ok((x, tr)) = damped_newton(f, feasible, &trial, tol, loose, opts) {
                let better = best
                    .as_ref()
                    .map(|b| tr.residuals.last() < b.1.residuals.last())
                    .unwrap_or(true);
                if better {
                    let done = tr.converged;
                    best = Some((x, tr));
                    if done {
                        break;
                    }
                }
            }
        }
        result = best.ok_or_else(|| match result {
            Err(e) => e,
            Ok(_) => unreachable!(),
        });
    }
    let (values, trace) = result?;
    let ridge_solves = eigen_ef(setup, table, &values, weight, right, exec)?.1;
    Ok(Step2Result {
        names: setup.free.iter().map(|p| p.name().to_string()).collect(),
        values,
        initial: start,
        trace,
        restarts,
        ridge_solves,
    })
}
