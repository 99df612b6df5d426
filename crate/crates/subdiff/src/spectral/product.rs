use crate::error::{Error, Result};
use crate::numerics::gauss_legendre;

use super::EigenSystem;

/// Expansion coefficients `c[i][j][n] = <phi_i phi_j, phi_n>_q`, so that
/// `E[phi_i(Y_t) phi_j(Y_t) | Y_0 = y] = sum_n c[i][j][n] exp(-phi(-lambda_n) t) phi_n(y)`.
#[derive(Clone, Debug)]
pub struct ProductTensor {
    pairs: usize,
    terms: usize,
    data: Vec<f64>,
    /// Sub-grid step used by the quadrature, if any.
    pub step: Option<f64>,
    pub extrapolated: bool,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl ProductTensor {
    /// Exact linearization of normalized Hermite products:
    /// `phi_i phi_j = sum_r sqrt(C(i+j-2r, i-r) C(i, r) C(j, r)) phi_{i+j-2r}`.
    pub fn hermite(max_index: usize) -> Self {
        let pairs = max_index + 1;
        let terms = 2 * max_index + 1;
        let mut t = ProductTensor {
            pairs,
            terms,
            data: vec![0.0; pairs * pairs * terms],
            step: None,
            extrapolated: false,
        };
        for i in 0..pairs {
            for j in 0..pairs {
                for r in 0..=i.min(j) {
                    let n = i + j - 2 * r;
                    let c = (binomial(n, i - r) * binomial(i, r) * binomial(j, r)).sqrt();
                    let k = t.index(i, j, n);
                    t.data[k] = c;
                }
            }
        }
        t
    }

    /// Coefficients by quadrature of piecewise-linear interpolants through the
    /// sub-grid that takes every `stride`-th node of the eigen grid. With
    /// `extrapolate` the result is combined with the half-step sub-grid to
    /// cancel the leading `h^2` error.
    pub fn quadrature(eig: &EigenSystem, max_index: usize, terms: usize, stride: usize, extrapolate: bool) -> Result<Self> {
        let cells = eig.grid().cells;
        if stride == 0 || cells % stride != 0 {
            return Err(Error::Precondition(format!("stride {stride} must divide {cells} grid cells")));
        }
        if extrapolate && stride % 2 != 0 {
            return Err(Error::Precondition("extrapolation needs an even stride".into()));
        }
        let need = (max_index + 1).max(terms);
        if need > eig.series_capacity() {
            return Err(Error::Precondition(format!(
                "product expansion needs {need} eigenfunctions, only {} available",
                eig.series_capacity()
            )));
        }
        let table = eig.node_table(need);
        let coarse = Self::interpolant_quadrature(eig, &table, max_index + 1, terms, stride);
        let step = eig.grid().step() * stride as f64;
        if !extrapolate {
            return Ok(ProductTensor {
                pairs: max_index + 1,
                terms,
                data: coarse,
                step: Some(step),
                extrapolated: false,
            });
        }
        let fine = Self::interpolant_quadrature(eig, &table, max_index + 1, terms, stride / 2);
        let data = coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect();
        Ok(ProductTensor {
            pairs: max_index + 1,
            terms,
            data,
            step: Some(step),
            extrapolated: true,
        })
    }

    fn interpolant_quadrature(eig: &EigenSystem, table: &[Vec<f64>], pairs: usize, terms: usize, stride: usize) -> Vec<f64> {
        let grid = eig.grid();
        let q = eig.density();
        let (gx, gw) = gauss_legendre(6);
        let mut data = vec![0.0; pairs * pairs * terms];
        let need = table.len();
        let mut left = vec![0.0; need];
        let mut right = vec![0.0; need];
        let mut val = vec![0.0; need];
        let mut k = 0;
        while k < grid.cells {
            let (a, b) = (grid.node(k), grid.node(k + stride));
            for n in 0..need {
                left[n] = table[n][k];
                right[n] = table[n][k + stride];
            }
            for (x, w) in gx.iter().zip(&gw) {
                let t = 0.5 * (x + 1.0);
                let pt = a + t * (b - a);
                let weight = 0.5 * (b - a) * w * q.pdf(pt);
                for n in 0..need {
                    val[n] = left[n] + t * (right[n] - left[n]);
                }
                for i in 0..pairs {
                    for j in i..pairs {
                        let wij = weight * val[i] * val[j];
                        let base = (i * pairs + j) * terms;
                        for n in 0..terms {
                            data[base + n] += wij * val[n];
                        }
                    }
                }
            }
            k += stride;
        }
        for i in 0..pairs {
            for j in 0..i {
                for n in 0..terms {
                    data[(i * pairs + j) * terms + n] = data[(j * pairs + i) * terms + n];
                }
            }
        }
        data
    }

    #[inline]
    fn index(&self, i: usize, j: usize, n: usize) -> usize {
        (i * self.pairs + j) * self.terms + n
    }

    /// Largest pair index covered.
    pub fn max_index(&self) -> usize {
        self.pairs - 1
    }

    /// Number of expansion terms per product.
    pub fn terms(&self) -> usize {
        self.terms
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, n: usize) -> f64 {
        self.data[self.index(i, j, n)]
    }

    /// Coefficients of `phi_i phi_j` as a slice over `n`.
    #[inline]
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let k = self.index(i, j, 0);
        &self.data[k..k + self.terms]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::ou_eigensystem;

    #[test]
    fn hermite_linearization_pointwise() {
        let e = ou_eigensystem(0.04, 0.0, 0.06, 6).unwrap();
        let t = ProductTensor::hermite(6);
        for x in [-0.31, -0.02, 0.15, 0.44] {
            let phi = e.eval_vec(x, 13);
            for i in 0..=6 {
                for j in 0..=6 {
                    let rhs: f64 = (0..13).map(|n| t.get(i, j, n) * phi[n]).sum();
                    assert!((phi[i] * phi[j] - rhs).abs() < 1e-9 * (1.0 + rhs.abs()), "{i} {j}");
                }
            }
        }
    }

    #[test]
    fn quadrature_converges_to_linearization() {
        let e = ou_eigensystem(0.04, 0.0, 0.06, 4).unwrap();
        let exact = ProductTensor::hermite(4);
        let err = |t: &ProductTensor| {
            let mut worst = 0.0f64;
            for i in 0..=4 {
                for j in 0..=4 {
                    for n in 0..=8 {
                        worst = worst.max((t.get(i, j, n) - exact.get(i, j, n)).abs());
                    }
                }
            }
            worst
        };
        let e4 = err(&ProductTensor::quadrature(&e, 4, 9, 8, false).unwrap());
        let e2 = err(&ProductTensor::quadrature(&e, 4, 9, 4, false).unwrap());
        let x4 = err(&ProductTensor::quadrature(&e, 4, 9, 8, true).unwrap());
        let x2 = err(&ProductTensor::quadrature(&e, 4, 9, 4, true).unwrap());
        assert!(e4 / e2 > 3.5 && e4 / e2 < 4.5, "{e4} {e2}");
        assert!(x4 / x2 > 12.0, "{x4} {x2}");
        assert!(x2 < 2e-4, "{e4} {e2} {x4} {x2}");
    }
}
