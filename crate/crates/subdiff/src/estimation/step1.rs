use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{Diffusion, ScalePin};
use crate::numerics::brent;
use crate::simulate::ObservedSeries;

/// First-step estimate of the diffusion parameters.
#[derive(Clone, Debug, Serialize)]
pub struct Step1Result {
    pub diffusion: Diffusion,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub method: &'static str,
    /// Kernel bandwidth of the exponent condition (polynomial-drift models).
    pub bandwidth: Option<f64>,
    /// Sup-norm of the sample moment conditions at the estimate.
    pub residual: f64,
}

/// Positions in `Diffusion::params` estimated in the first step.
pub fn theta1_indices(diff: &Diffusion, pin: ScalePin) -> Result<Vec<usize>> {
    match (diff, pin) {
        (Diffusion::Ou { .. }, ScalePin::Sigma) => Ok(vec![0, 1]),
        (Diffusion::Ou { .. }, ScalePin::Kappa) => Ok(vec![1, 2]),
        (Diffusion::PolyDriftCev { coeffs, .. }, ScalePin::Sigma) => Ok((0..=coeffs.len()).collect()),
        (Diffusion::PolyDriftCev { .. }, ScalePin::Kappa) => {
            Err(Error::Capability("kappa pin applies only to OU".into()))
        }
    }
}

/// Single-observation moment functions, zero in mean under the stationary law.
/// Conditions that involve consecutive observations are not representable.
pub fn step1_moments(diff: &Diffusion, y: f64) -> Result<Vec<f64>> {
    match *diff {
        Diffusion::Ou { kappa, theta, sigma } => {
            let e = y - theta;
            Ok(vec![e * e - sigma * sigma / (2.0 * kappa), e])
        }
        Diffusion::PolyDriftCev { .. } => Err(Error::Capability(
            "the exponent condition uses consecutive observations; use replication standard errors".into(),
        )),
    }
}

/// `E[d f1 / d theta1]` over `sample` (equally weighted unless `weights`
/// is given) by central differences.
pub fn a11_matrix(diff: &Diffusion, pin: ScalePin, sample: &[f64], weights: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let idx = theta1_indices(diff, pin)?;
    let base = diff.params();
    let p1 = idx.len();
    let mean_f = |d: &Diffusion| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; p1];
        let equal = 1.0 / sample.len() as f64;
        for (i, &y) in sample.iter().enumerate() {
            let w = weights.map_or(equal, |w| w[i]);
            for (a, v) in acc.iter_mut().zip(step1_moments(d, y)?) {
                *a += w * v;
            }
        }
        Ok(acc)
    };
    let mut a = DMatrix::zeros(p1, p1);
    for (col, &k) in idx.iter().enumerate() {
        let h = 1e-5 * base[k].abs().max(1e-3);
        let mut up = base.clone();
        let mut dn = base.clone();
        up[k] += h;
        dn[k] -= h;
        let fu = mean_f(&diff.with_params(&up)?)?;
        let fd = mean_f(&diff.with_params(&dn)?)?;
        for row in 0..p1 {
            a[(row, col)] = (fu[row] - fd[row]) / (2.0 * h);
        }
    }
    Ok(a)
}

/// First-step estimator for the diffusion parameters with the scale pinned
/// at the value in `template`.
pub fn step1_estimate(data: &ObservedSeries, template: &Diffusion, pin: ScalePin) -> Result<Step1Result> {
    let y = &data.values;
    let n = y.len() as f64;
    match *template {
        Diffusion::Ou { kappa, sigma, .. } => {
            let theta = y.iter().sum::<f64>() / n;
            let ss: f64 = y.iter().map(|v| (v - theta) * (v - theta)).sum();
            if !(ss > 0.0) {
                return Err(Error::DegenerateData("sample variance is zero".into()));
            }
            let diffusion = match pin {
                ScalePin::Sigma => Diffusion::Ou {
                    kappa: sigma * sigma * n / (2.0 * ss),
                    theta,
                    sigma,
                },
                ScalePin::Kappa => Diffusion::Ou {
                    kappa,
                    theta,
                    sigma: (2.0 * kappa * ss / n).sqrt(),
                },
            };
            let idx = theta1_indices(&diffusion, pin)?;
            let p = diffusion.params();
            let names = diffusion.param_names();
            Ok(Step1Result {
                names: idx.iter().map(|&i| names[i].clone()).collect(),
                values: idx.iter().map(|&i| p[i]).collect(),
                diffusion,
                method: "closed_form",
                bandwidth: None,
                residual: 0.0,
            })
        }
        Diffusion::PolyDriftCev { ref coeffs, sigma, .. } => {
            if pin != ScalePin::Sigma {
                return Err(Error::Capability("polynomial-drift models pin sigma".into()));
            }
            cev_step1(data, coeffs.len() - 1, sigma)
        }
    }
}

struct CevData {
    logs: Vec<f64>,
    next_logs: Vec<f64>,
    next: Vec<f64>,
    kernel: Vec<f64>,
    dkernel: Vec<f64>,
}

fn cev_coeffs(d: &CevData, k: usize, beta: f64, sigma: f64) -> Option<Vec<f64>> {
    let moment = |p: f64| d.logs.iter().map(|l| (p * l).exp()).sum::<f64>() / d.logs.len() as f64;
    let mut a = DMatrix::zeros(k + 1, k + 1);
    let mut b = DVector::zeros(k + 1);
    for i in 0..=k {
        for j in 0..=k {
            a[(i, j)] = moment((i + j) as f64 - 2.0 * beta);
        }
        b[i] = -0.5 * sigma * sigma * (i as f64 - 2.0 * beta) * moment(i as f64 - 1.0);
    }
    a.lu().solve(&b).map(|c| c.iter().cloned().collect())
}

fn cev_exponent_condition(d: &CevData, coeffs: &[f64], beta: f64, sigma: f64) -> f64 {
    let mut acc = 0.0;
    for t in 0..d.next.len() {
        let y = d.next[t];
        acc += 2.0 * poly_drift(coeffs, y) * d.kernel[t] + sigma * sigma * (2.0 * beta * d.next_logs[t]).exp() * d.dkernel[t];
    }
    acc / d.next.len() as f64
}

/// `mu(y) = sum_j c_j y^j`.
fn poly_drift(coeffs: &[f64], y: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |a, c| a * y + c)
}

fn cev_step1(data: &ObservedSeries, k: usize, sigma: f64) -> Result<Step1Result> {
    let y = &data.values;
    if y.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("polynomial-drift models need positive observations".into()));
    }
    let mut jumps: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    jumps.sort_by(|a, b| a.total_cmp(b));
    let m = jumps.len();
    let delta = if m % 2 == 1 { jumps[m / 2] } else { 0.5 * (jumps[m / 2 - 1] + jumps[m / 2]) };
    if !(delta > 0.0) {
        return Err(Error::DegenerateData("median absolute increment is zero".into()));
    }
    let norm = 1.0 / (delta * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = y.windows(2).map(|w| norm * (-(w[1] - w[0]).powi(2) / (2.0 * delta * delta)).exp()).collect();
    let dkernel: Vec<f64> = y
        .windows(2)
        .zip(&kernel)
        .map(|(w, g)| -(w[1] - w[0]) / (delta * delta) * g)
        .collect();
    let d = CevData {
        logs: y.iter().map(|v| v.ln()).collect(),
        next_logs: y[1..].iter().map(|v| v.ln()).collect(),
        next: y[1..].to_vec(),
        kernel,
        dkernel,
    };
    let profile = |beta: f64| -> f64 {
        match cev_coeffs(&d, k, beta, sigma) {
            Some(c) => cev_exponent_condition(&d, &c, beta, sigma),
            None => f64::NAN,
        }
    };
    let grid: Vec<f64> = (0..=350).map(|i| 0.5 + 0.01 * i as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&b| profile(b)).collect();
    let mut candidates = Vec::new();
    for i in 0..grid.len() - 1 {
        let (a, b) = (vals[i], vals[i + 1]);
        if a.is_finite() && b.is_finite() && a.signum() != b.signum() {
            if let Ok(root) = brent(profile, grid[i], grid[i + 1], 1e-12, 200) {
                candidates.push(root);
            }
        }
    }
    let mut rejected = Vec::new();
    for beta in candidates {
        let Some(coeffs) = cev_coeffs(&d, k, beta, sigma) else { continue };
        let diffusion = Diffusion::PolyDriftCev { coeffs: coeffs.clone(), beta, sigma };
        let v = diffusion.violations();
        if !v.is_empty() {
            rejected.push(format!("beta {beta:.4}: {}", v.join(", ")));
            continue;
        }
        let mut names: Vec<String> = (0..=k).map(|i| format!("c{i}")).collect();
        names.push("beta".into());
        let mut values = coeffs;
        values.push(beta);
        let residual = profile(beta).abs();
        return Ok(Step1Result {
            diffusion,
            names,
            values,
            method: "moment_conditions",
            bandwidth: Some(delta),
            residual,
        });
    }
    let detail = if rejected.is_empty() {
        "no sign change".to_string()
    } else {
        format!("roots violate the model restrictions ({})", rejected.join("; "))
    };
    Err(Error::solver(
        format!("no admissible root of the exponent condition on [0.5, 4]: {detail}"),
        grid.len(),
        f64::NAN,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::Origin;

    fn series(v: Vec<f64>) -> ObservedSeries {
        ObservedSeries::new(1.0, v, Origin::Ingested { source: "test".into() }).unwrap()
    }

    #[test]
    fn ou_two_points() {
        let r = step1_estimate(&series(vec![-1.0, 1.0]), &Diffusion::ou(1.0, 0.0, 0.06), ScalePin::Sigma).unwrap();
        assert!(r.values[1].abs() < 1e-15);
        assert!((r.values[0] - 0.0018).abs() < 1e-15);
    }

    #[test]
    fn ou_translation_equivariance() {
        let v = vec![0.3, -0.1, 0.25, 0.05, -0.4];
        let a = step1_estimate(&series(v.clone()), &Diffusion::ou(1.0, 0.0, 0.06), ScalePin::Sigma).unwrap();
        let b = step1_estimate(&series(v.iter().map(|x| x + 2.5).collect()), &Diffusion::ou(1.0, 0.0, 0.06), ScalePin::Sigma).unwrap();
        assert!((b.values[1] - a.values[1] - 2.5).abs() < 1e-12);
        assert!((b.values[0] - a.values[0]).abs() < 1e-12 * a.values[0]);
    }

    #[test]
    fn ou_constant_data_is_degenerate() {
        let e = step1_estimate(&series(vec![0.2; 5]), &Diffusion::ou(1.0, 0.0, 0.06), ScalePin::Sigma).unwrap_err();
        assert_eq!(e.kind(), "degenerate_data");
    }

    #[test]
    fn kappa_pin_recovers_sigma() {
        let v = vec![0.3, -0.1, 0.25, 0.05, -0.4];
        let a = step1_estimate(&series(v.clone()), &Diffusion::ou(1.0, 0.0, 0.06), ScalePin::Sigma).unwrap();
        let b = step1_estimate(&series(v), &Diffusion::ou(a.values[0], 0.0, 1.0), ScalePin::Kappa).unwrap();
        assert!((b.values[1] - 0.06).abs() < 1e-12);
    }

    #[test]
    fn ou_moments_have_expected_jacobian() {
        let d = Diffusion::ou(0.04, 0.0, 0.06);
        let a = a11_matrix(&d, ScalePin::Sigma, &[-0.2, 0.0, 0.2], None).unwrap();
        assert!((a[(0, 0)] - 0.0036 / (2.0 * 0.0016)).abs() < 1e-6);
        assert!((a[(1, 1)] + 1.0).abs() < 1e-9);
        assert!(a[(1, 0)].abs() < 1e-9 && a[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn cev_sample_conditions_hold_at_estimate() {
        // deterministic pseudo-data with the right support
        let mut y = Vec::new();
        let mut x: f64 = 0.2;
        let mut s: u64 = 7;
        for _ in 0..3000 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            x = (x + 0.3 * (0.2 - x) + 0.15 * x * u).max(0.01);
            y.push(x);
        }
        let r = step1_estimate(&series(y.clone()), &Diffusion::PolyDriftCev { coeffs: vec![0.1, 0.1, -1.0], beta: 1.5, sigma: 1.0 }, ScalePin::Sigma);
        if let Ok(r) = r {
            let Diffusion::PolyDriftCev { coeffs, beta, sigma } = r.diffusion else { unreachable!() };
            let n = y.len() as f64;
            for i in 0..coeffs.len() {
                let lhs: f64 = y
                    .iter()
                    .map(|v| poly_drift(&coeffs, *v) * v.powf(i as f64 - 2.0 * beta) + 0.5 * sigma * sigma * (i as f64 - 2.0 * beta) * v.powi(i as i32 - 1))
                    .sum::<f64>()
                    / n;
                assert!(lhs.abs() < 1e-8, "{i} {lhs}");
            }
            assert!(r.residual < 1e-8);
        }
    }
}
