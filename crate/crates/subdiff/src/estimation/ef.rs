use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::models::{SubParam, Subordinator};
use crate::numerics::solve_with_ridge;
use crate::simulate::ObservedSeries;
use crate::spectral::{EigenSystem, ProductTensor};

use super::covariance::Theta1Sensitivity;

/// How the product coefficients `<phi_i phi_j, phi_n>_q` are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProductMode {
    /// Hermite linearization (closed-form OU systems only).
    Exact,
    /// Interpolant quadrature on every `stride`-th eigen-grid node.
    Quadrature { stride: usize, extrapolate: bool },
}

const RCOND_MIN: f64 = 1e-13;
const CHUNK: usize = 512;

/// Everything the second step needs once the diffusion parameters are fixed.
#[derive(Clone, Debug)]
pub struct EfSetup {
    pub eig: EigenSystem,
    pub tensor: ProductTensor,
    /// Number of eigenfunctions `M` in the estimating function.
    pub m: usize,
    /// Number of expansion terms used in conditional moments.
    pub terms: usize,
    pub delta: f64,
    /// Subordinator holding the values of parameters that are not estimated.
    pub template: Subordinator,
    pub free: Vec<SubParam>,
    pub product: ProductMode,
}

impl EfSetup {
    pub fn new(
        eig: EigenSystem,
        m: usize,
        template: Subordinator,
        free: Vec<SubParam>,
        delta: f64,
        product: ProductMode,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Domain(format!("sampling interval must be positive, got {delta}")));
        }
        if free.is_empty() || m < free.len() {
            return Err(Error::Precondition(format!(
                "need M >= number of clock parameters ({} < {})",
                m,
                free.len()
            )));
        }
        for p in &free {
            template.get(*p)?;
        }
        let (tensor, terms) = match product {
            ProductMode::Exact => {
                if !eig.is_analytic() {
                    return Err(Error::Capability("exact product coefficients need a closed-form OU system".into()));
                }
                (ProductTensor::hermite(m), 2 * m + 1)
            }
            ProductMode::Quadrature { stride, extrapolate } => {
                let terms = if eig.is_analytic() { 2 * m + 1 } else { eig.len() };
                if terms < m + 1 {
                    return Err(Error::Precondition("eigen system too small for M".into()));
                }
                (ProductTensor::quadrature(&eig, m, terms, stride, extrapolate)?, terms)
            }
        };
        Ok(EfSetup {
            eig,
            tensor,
            m,
            terms,
            delta,
            template,
            free,
            product,
        })
    }

    pub fn p2(&self) -> usize {
        self.free.len()
    }

    pub fn subordinator(&self, theta2: &[f64]) -> Result<Subordinator> {
        self.template.with_values(&self.free, theta2)
    }

    pub fn theta2(&self, sub: &Subordinator) -> Vec<f64> {
        self.free.iter().map(|p| sub.get(*p).unwrap_or(f64::NAN)).collect()
    }

    /// `d_n = exp(-phi(-lambda_n) delta)` for `n < terms`.
    pub fn decays(&self, sub: &Subordinator) -> Vec<f64> {
        (0..self.terms)
            .map(|n| (-sub.laplace_exponent(-self.eig.eigenvalue(n)) * self.delta).exp())
            .collect()
    }

    /// `[k][n] = d d_n / d theta2_k` for `n <= M`.
    pub fn decay_gradient(&self, sub: &Subordinator, d: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.free
            .iter()
            .map(|&p| {
                (0..=self.m)
                    .map(|n| Ok(-self.delta * sub.laplace_exponent_partial(-self.eig.eigenvalue(n), p)? * d[n]))
                    .collect()
            })
            .collect()
    }

    /// `E[phi_i phi_j (Y_delta) | Y_0 = y]` for `i, j <= M`.
    pub fn pi_matrix(&self, phi: &[f64], d: &[f64]) -> DMatrix<f64> {
        let k = self.m + 1;
        let dphi: Vec<f64> = (0..self.terms).map(|n| d[n] * phi[n]).collect();
        let mut pi = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let v: f64 = self.tensor.row(i, j).iter().zip(&dphi).map(|(c, x)| c * x).sum();
                pi[(i, j)] = v;
                pi[(j, i)] = v;
            }
        }
        pi
    }

    /// Conditional covariance of `phi_1..phi_M` at lag `delta`.
    pub fn p_matrix(&self, phi: &[f64], d: &[f64]) -> DMatrix<f64> {
        let pi = self.pi_matrix(phi, d);
        let m = self.m;
        DMatrix::from_fn(m, m, |i, j| pi[(i + 1, j + 1)] - d[i + 1] * phi[i + 1] * d[j + 1] * phi[j + 1])
    }

    /// `d/d theta2 E[phi_i(Y_delta) | Y_0 = y]`.
    pub fn q_matrix(&self, phi: &[f64], grad: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.p2(), |i, k| grad[k][i + 1] * phi[i + 1])
    }

    /// KS weight at a state.
    pub fn ks_weight(&self, sub: &Subordinator, y: f64) -> Result<DMatrix<f64>> {
        let phi = self.eig.eval_vec(y, self.terms);
        let d = self.decays(sub);
        let grad = self.decay_gradient(sub, &d)?;
        Ok(solve_with_ridge(&self.p_matrix(&phi, &d), &self.q_matrix(&phi, &grad), RCOND_MIN)?.0)
    }

    /// Eigenfunction values at every observation.
    pub fn phi_table(&self, data: &ObservedSeries) -> PhiTable {
        let t = self.terms;
        let mut values = vec![0.0; data.values.len() * t];
        for (i, &y) in data.values.iter().enumerate() {
            self.eig.eval_into(y, &mut values[i * t..(i + 1) * t]);
        }
        PhiTable { terms: t, values }
    }
}

/// `phi_n(y_i)` for all observations, row-major.
#[derive(Clone, Debug)]
pub struct PhiTable {
    terms: usize,
    values: Vec<f64>,
}

impl PhiTable {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.terms..(i + 1) * self.terms]
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.terms.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weight used in the estimating function. `Optimal` stores the constants
/// of `W* = P^-1 (H1 + G C2 + k c3)` with `H1 = -Q`.
#[derive(Clone, Debug)]
pub enum WeightMatrix {
    Ks,
    Optimal {
        c2: DMatrix<f64>,
        c3: DMatrix<f64>,
        sens: Box<Theta1Sensitivity>,
    },
}

impl WeightMatrix {
    pub fn name(&self) -> &'static str {
        match self {
            WeightMatrix::Ks => "ks",
            WeightMatrix::Optimal { .. } => "optimal",
        }
    }
}

/// Per-state pieces shared by the estimating function and its covariance.
pub(crate) struct StatePieces {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub pi: DMatrix<f64>,
}

impl EfSetup {
    pub(crate) fn state_pieces(&self, phi: &[f64], d: &[f64], grad: &[Vec<f64>]) -> StatePieces {
        let pi = self.pi_matrix(phi, d);
        let m = self.m;
        let p = DMatrix::from_fn(m, m, |i, j| pi[(i + 1, j + 1)] - d[i + 1] * phi[i + 1] * d[j + 1] * phi[j + 1]);
        StatePieces {
            p,
            q: self.q_matrix(phi, grad),
            pi,
        }
    }

    /// Weight matrix (`M x p2`) at a state, right-multiplied by `k` if given.
    pub(crate) fn weight_at(
        &self,
        weight: &WeightMatrix,
        phi: &[f64],
        d: &[f64],
        grad: &[Vec<f64>],
        grad1: Option<&[Vec<f64>]>,
        right: Option<&DMatrix<f64>>,
    ) -> Result<(DMatrix<f64>, bool)> {
        let pieces = self.state_pieces(phi, d, grad);
        let rhs = match weight {
            WeightMatrix::Ks => pieces.q.clone(),
            WeightMatrix::Optimal { c2, c3, sens } => {
                let g = sens.g_matrix(self, phi, d, grad1.unwrap_or(&[]));
                let k = sens.k_matrix(self, &pieces.pi, phi, d);
                -&pieces.q + g * c2 + k * c3
            }
        };
        let (w, ridge) = solve_with_ridge(&pieces.p, &rhs, RCOND_MIN)?;
        Ok(match right {
            Some(k) => (w * k, ridge),
            None => (w, ridge),
        })
    }
}

/// Eigenfunction estimating function `sum_i W(y_{i-1})' V_i` at `theta2`,
/// with the number of ridge-rescued weight solves.
pub fn eigen_ef(
    setup: &EfSetup,
    table: &PhiTable,
    theta2: &[f64],
    weight: &WeightMatrix,
    right: Option<&DMatrix<f64>>,
    exec: Execution,
) -> Result<(DVector<f64>, usize)> {
    let (f, _, ridges) = ef_sums(setup, table, theta2, weight, right, exec)?;
    Ok((f, ridges))
}

/// Self-normalized estimating function `L^-1 F`, where `L L'` is the sum of
/// outer products of the per-transition terms. It has the roots of `F`, is
/// unchanged when the weight is right-multiplied by any invertible matrix,
/// and does not shrink to zero where the weight itself degenerates (for
/// instance as the clock speeds up without bound).
pub fn standardized_ef(
    setup: &EfSetup,
    table: &PhiTable,
    theta2: &[f64],
    weight: &WeightMatrix,
    right: Option<&DMatrix<f64>>,
    exec: Execution,
) -> Result<(DVector<f64>, usize)> {
    let (f, outer, ridges) = ef_sums(setup, table, theta2, weight, right, exec)?;
    let chol = outer
        .cholesky()
        .ok_or_else(|| Error::Conditioning("outer product of estimating-function terms is singular".into()))?;
    let z = chol
        .l()
        .solve_lower_triangular(&f)
        .ok_or_else(|| Error::Conditioning("outer product of estimating-function terms is singular".into()))?;
    Ok((z, ridges))
}

fn ef_sums(
    setup: &EfSetup,
    table: &PhiTable,
    theta2: &[f64],
    weight: &WeightMatrix,
    right: Option<&DMatrix<f64>>,
    exec: Execution,
) -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
    let sub = setup.subordinator(theta2)?;
    let d = setup.decays(&sub);
    let grad = setup.decay_gradient(&sub, &d)?;
    let grad1 = match weight {
        WeightMatrix::Optimal { sens, .. } => Some(sens.decay_gradient(setup, &sub, &d)),
        WeightMatrix::Ks => None,
    };
    let n = table.len().saturating_sub(1);
    let (m, p2) = (setup.m, setup.p2());
    let parts = exec::map_chunks(exec, n, CHUNK, |range| -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
        let mut acc = DVector::zeros(p2);
        let mut outer = DMatrix::zeros(p2, p2);
        let mut ridges = 0;
        let mut v = DVector::zeros(m);
        for i in range {
            let prev = table.row(i);
            let cur = table.row(i + 1);
            let (w, ridge) = setup.weight_at(weight, prev, &d, &grad, grad1.as_deref(), right)?;
            ridges += ridge as usize;
            for k in 0..m {
                v[k] = cur[k + 1] - d[k + 1] * prev[k + 1];
            }
            let g = w.transpose() * &v;
            outer += &g * g.transpose();
            acc += g;
        }
        Ok((acc, outer, ridges))
    });
    let mut total = DVector::zeros(p2);
    let mut outer = DMatrix::zeros(p2, p2);
    let mut ridges = 0;
    for part in parts {
        let (a, o, r) = part?;
        total += a;
        outer += o;
        ridges += r;
    }
    Ok((total, outer, ridges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Diffusion;
    use crate::spectral::ou_eigensystem;

    fn setup(delta: f64) -> EfSetup {
        let eig = ou_eigensystem(0.04, 0.0, 0.06, 4).unwrap();
        EfSetup::new(
            eig,
            4,
            Subordinator::inverse_gaussian(1.0, 0.5),
            vec![SubParam::Mu, SubParam::V],
            delta,
            ProductMode::Exact,
        )
        .unwrap()
    }

    #[test]
    fn zero_lag_limit_vanishes() {
        let s = setup(1e-10);
        let sub = s.template;
        let d = s.decays(&sub);
        let grad = s.decay_gradient(&sub, &d).unwrap();
        for y in [-0.3, 0.0, 0.2] {
            let phi = s.eig.eval_vec(y, s.terms);
            let p = s.p_matrix(&phi, &d);
            let q = s.q_matrix(&phi, &grad);
            assert!(p.iter().all(|v| v.abs() <= 1e-8), "{p}");
            assert!(q.iter().all(|v| v.abs() <= 1e-8));
        }
    }

    #[test]
    fn q_matches_finite_differences() {
        let s = setup(1.0);
        let sub = s.template;
        let d = s.decays(&sub);
        let grad = s.decay_gradient(&sub, &d).unwrap();
        let y = 0.17;
        let phi = s.eig.eval_vec(y, s.terms);
        let q = s.q_matrix(&phi, &grad);
        for (k, &p) in s.free.iter().enumerate() {
            let h = 1e-6;
            let base = sub.get(p).unwrap();
            let up = s.decays(&sub.with(p, base + h).unwrap());
            let dn = s.decays(&sub.with(p, base - h).unwrap());
            for i in 1..=4 {
                let fd = (up[i] - dn[i]) / (2.0 * h) * phi[i];
                assert!((fd - q[(i - 1, k)]).abs() < 1e-6, "{i} {k} {fd} {}", q[(i - 1, k)]);
            }
        }
    }

    #[test]
    fn p_is_conditional_covariance() {
        // compare with direct quadrature of the transition density
        let s = setup(1.0);
        let sub = s.template;
        let d = s.decays(&sub);
        let y0 = 0.1;
        let phi = s.eig.eval_vec(y0, s.terms);
        let p = s.p_matrix(&phi, &d);
        let seig = crate::spectral::SubordinateEigenSystem::new(&s.eig, sub, 1.0).unwrap();
        let f = |y: f64| seig.transition_density(1.0, y0, y, 1e-12).unwrap().value;
        let (lo, hi) = (-1.5, 1.5);
        let mean = |i: usize| crate::numerics::integrate(|y| f(y) * s.eig.eval(i, y), lo, hi, 1e-12, 1e-10).0;
        let (m1, m2) = (mean(1), mean(2));
        let (e12, _) = crate::numerics::integrate(|y| f(y) * s.eig.eval(1, y) * s.eig.eval(2, y), lo, hi, 1e-12, 1e-10);
        assert!((p[(0, 1)] - (e12 - m1 * m2)).abs() < 1e-6, "{} {}", p[(0, 1)], e12 - m1 * m2);
        let _ = Diffusion::ou(0.04, 0.0, 0.06);
    }

    #[test]
    fn exact_product_needs_analytic_system() {
        let d = Diffusion::ou(1.0, 0.0, 1.0);
        let opts = crate::spectral::SlOptions { cells: 200, ..Default::default() };
        let num = crate::spectral::solve_sl_eigensystem(&d, 12, &opts).unwrap();
        let e = EfSetup::new(num, 4, Subordinator::inverse_gaussian(1.0, 0.5), vec![SubParam::Mu], 1.0, ProductMode::Exact);
        assert_eq!(e.unwrap_err().kind(), "capability");
    }
}
