//! Plug-in sandwich covariance of the two-step estimator.
//!
//! Every weight considered here has the form `W = P^-1 X T` with the state
//! matrix `X = [H1 | G | k]` (`H1 = E[dV/d theta2 | y]`, `G = E[dV/d theta1 | y]`,
//! `k = Cov(V, u | y)`, `u = (I - P_delta)^-1 f1`) and a constant matrix `T`.
//! All sandwich blocks then follow from `E[X' P^-1 X]`, the long-run variance
//! `Sigma1` of the first-step moments and `A11 = E[d f1 / d theta1]`, so KS
//! (`T = [-I; 0; 0]`) and optimal (`T = [I; C2; c3]`) covariances come out of
//! one pass over the outer sample.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::models::{Diffusion, ScalePin, Subordinator};
use crate::numerics::{solve_with_ridge, symmetrize_psd};
use crate::simulate::{stream_rng, ObservedSeries, StationarySampler};
use crate::spectral::EigenSystem;

use super::ef::EfSetup;
use super::step1::{a11_matrix, step1_moments, theta1_indices};
use super::to_rows;

const CHUNK: usize = 2048;

/// Sensitivity of the eigen system to the first-step parameters and the
/// expansion of the first-step moments.
#[derive(Clone, Debug)]
pub struct Theta1Sensitivity {
    pub names: Vec<String>,
    /// `d phi_m / d theta1_a = sum_j b[a][(m, j)] phi_j`, `m <= M`, `j < terms`.
    pub b: Vec<DMatrix<f64>>,
    /// `d(-lambda_m) / d theta1_a`, `m <= M`.
    pub dneglam: Vec<Vec<f64>>,
    /// `<f1_a, phi_n>_q` for `n <= M` (the `n = 0` entry is dropped).
    pub h: Vec<Vec<f64>>,
    /// Relative Parseval residual of each first-step moment expansion.
    pub expansion_residual: Vec<f64>,
}

impl Theta1Sensitivity {
    /// Closed-form sensitivities of the Hermite system.
    pub fn hermite(setup: &EfSetup, pin: ScalePin) -> Result<Self> {
        let (kappa, theta, sigma) = setup
            .eig
            .hermite_params()
            .ok_or_else(|| Error::Precondition("closed-form sensitivities need a Hermite system".into()))?;
        let diff = Diffusion::ou(kappa, theta, sigma);
        let m = setup.m;
        let t = setup.terms;
        let mut bk = DMatrix::zeros(m + 1, t);
        let mut bt = DMatrix::zeros(m + 1, t);
        let mut bs = DMatrix::zeros(m + 1, t);
        for n in 0..=m {
            let nf = n as f64;
            bk[(n, n)] = nf / (2.0 * kappa);
            bs[(n, n)] = -nf / sigma;
            if n >= 2 {
                let c = (nf * (nf - 1.0)).sqrt();
                bk[(n, n - 2)] = c / (2.0 * kappa);
                bs[(n, n - 2)] = -c / sigma;
            }
            if n >= 1 {
                bt[(n, n - 1)] = -(2.0 * nf * kappa).sqrt() / sigma;
            }
        }
        let idx = theta1_indices(&diff, pin)?;
        let all_b = [bk, bt, bs];
        let all_l: [Vec<f64>; 3] = [(0..=m).map(|n| n as f64).collect(), vec![0.0; m + 1], vec![0.0; m + 1]];
        let names = diff.param_names();
        let (h, resid) = moment_expansion(&setup.eig, &diff, m)?;
        Ok(Theta1Sensitivity {
            names: idx.iter().map(|&i| names[i].clone()).collect(),
            b: idx.iter().map(|&i| all_b[i].clone()).collect(),
            dneglam: idx.iter().map(|&i| all_l[i].clone()).collect(),
            h,
            expansion_residual: resid,
        })
    }

    /// Sensitivities by central differences of eigen systems rebuilt with
    /// `build` at perturbed first-step parameters on the same grid.
    pub fn numeric<B>(setup: &EfSetup, pin: ScalePin, rel_step: f64, build: B) -> Result<Self>
    where
        B: Fn(&Diffusion) -> Result<EigenSystem>,
    {
        let diff = setup.eig.diffusion().clone();
        let idx = theta1_indices(&diff, pin)?;
        let base = diff.params();
        let names = diff.param_names();
        let m = setup.m;
        let t = setup.terms;
        let w = setup.eig.quad_weights();
        let table = setup.eig.node_table(t);
        let mut b = Vec::new();
        let mut dneglam = Vec::new();
        for &k in &idx {
            let h = rel_step * base[k].abs().max(1e-3);
            let mut up = base.clone();
            let mut dn = base.clone();
            up[k] += h;
            dn[k] -= h;
            let eu = build(&diff.with_params(&up)?)?;
            let ed = build(&diff.with_params(&dn)?)?;
            if eu.grid() != setup.eig.grid() || ed.grid() != setup.eig.grid() {
                return Err(Error::Precondition("perturbed eigen systems must share the grid".into()));
            }
            let mut bm = DMatrix::zeros(m + 1, t);
            let mut dl = vec![0.0; m + 1];
            for n in 1..=m {
                let fu = eu.node_values(n);
                let fd = ed.node_values(n);
                let align = |f: &[f64]| -> f64 {
                    let s: f64 = f.iter().zip(&table[n]).zip(w).map(|((a, b), w)| a * b * w).sum();
                    if s < 0.0 {
                        -1.0
                    } else {
                        1.0
                    }
                };
                let (su, sd) = (align(&fu), align(&fd));
                let deriv: Vec<f64> = fu.iter().zip(&fd).map(|(a, b)| (su * a - sd * b) / (2.0 * h)).collect();
                for j in 0..t {
                    bm[(n, j)] = deriv.iter().zip(&table[j]).zip(w).map(|((a, b), w)| a * b * w).sum();
                }
                dl[n] = -(eu.eigenvalue(n) - ed.eigenvalue(n)) / (2.0 * h);
            }
            b.push(bm);
            dneglam.push(dl);
        }
        let (hc, resid) = match moment_expansion(&setup.eig, &diff, m) {
            Ok(v) => v,
            Err(e) if e.kind() == "capability" => (Vec::new(), Vec::new()),
            Err(e) => return Err(e),
        };
        Ok(Theta1Sensitivity {
            names: idx.iter().map(|&i| names[i].clone()).collect(),
            b,
            dneglam,
            h: hc,
            expansion_residual: resid,
        })
    }

    pub fn p1(&self) -> usize {
        self.b.len()
    }

    /// `[a][m] = d d_m / d theta1_a`.
    pub fn decay_gradient(&self, setup: &EfSetup, sub: &Subordinator, d: &[f64]) -> Vec<Vec<f64>> {
        self.dneglam
            .iter()
            .map(|dl| {
                (0..=setup.m)
                    .map(|n| -setup.delta * sub.laplace_exponent_derivative(-setup.eig.eigenvalue(n)) * dl[n] * d[n])
                    .collect()
            })
            .collect()
    }

    /// `G[(m, a)] = E[d V_m / d theta1_a | y]`.
    pub fn g_matrix(&self, setup: &EfSetup, phi: &[f64], d: &[f64], grad1: &[Vec<f64>]) -> DMatrix<f64> {
        let m = setup.m;
        DMatrix::from_fn(m, self.p1(), |r, a| {
            let mm = r + 1;
            let b = &self.b[a];
            let mut s = 0.0;
            for j in 0..setup.terms {
                s += b[(mm, j)] * (d[j] - d[mm]) * phi[j];
            }
            s - grad1[a][mm] * phi[mm]
        })
    }

    /// Coefficients of `u = (I - P_delta)^-1 f1`.
    fn u_coeffs(&self, d: &[f64]) -> Vec<Vec<f64>> {
        self.h
            .iter()
            .map(|h| {
                h.iter()
                    .enumerate()
                    .map(|(n, &c)| if n == 0 { 0.0 } else { c / (1.0 - d[n]) })
                    .collect()
            })
            .collect()
    }

    /// `k[(m, a)] = Cov(phi_m(Y_delta), u_a(Y_delta) | y)`.
    pub fn k_matrix(&self, setup: &EfSetup, pi: &DMatrix<f64>, phi: &[f64], d: &[f64]) -> DMatrix<f64> {
        let u = self.u_coeffs(d);
        let m = setup.m;
        DMatrix::from_fn(m, self.p1(), |r, a| {
            let mm = r + 1;
            let ua = &u[a];
            let cond: f64 = (1..=m).map(|i| ua[i] * d[i] * phi[i]).sum();
            let second: f64 = (1..=m).map(|i| ua[i] * pi[(mm, i)]).sum();
            second - d[mm] * phi[mm] * cond
        })
    }

    /// Contribution of one state to the long-run variance of the first-step moments.
    fn sigma1_at(&self, setup: &EfSetup, pi: &DMatrix<f64>, phi: &[f64], d: &[f64]) -> DMatrix<f64> {
        let u = self.u_coeffs(d);
        let m = setup.m;
        let p1 = self.p1();
        let cond: Vec<f64> = u.iter().map(|ua| (1..=m).map(|i| ua[i] * d[i] * phi[i]).sum()).collect();
        DMatrix::from_fn(p1, p1, |a, b| {
            let mut s = 0.0;
            for i in 1..=m {
                for j in 1..=m {
                    s += u[a][i] * pi[(i, j)] * u[b][j];
                }
            }
            s - cond[a] * cond[b]
        })
    }
}

fn moment_expansion(eig: &EigenSystem, diff: &Diffusion, m: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let p1 = step1_moments(diff, eig.density().mean())?.len();
    let mut hs = Vec::new();
    let mut resid = Vec::new();
    for a in 0..p1 {
        let (mut c, r) = eig.coefficients(|y| step1_moments(diff, y).map(|v| v[a]).unwrap_or(0.0), m + 1);
        c[0] = 0.0;
        hs.push(c);
        resid.push(r);
    }
    Ok((hs, resid))
}

/// Where the outer expectations over the stationary law are taken.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuterMode {
    /// Trapezoid rule on the eigen-system grid.
    #[default]
    Quadrature,
    /// Draws from the fitted stationary density.
    MonteCarlo { draws: usize, seed: u64 },
    /// The observed states `y_0..y_{n-1}`.
    Data,
}

/// Points and weights approximating expectations under the stationary law.
#[derive(Clone, Debug)]
pub struct OuterSample {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl OuterSample {
    fn equal(points: Vec<f64>) -> Self {
        let w = 1.0 / points.len().max(1) as f64;
        OuterSample { weights: vec![w; points.len()], points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn outer_sample(mode: &OuterMode, eig: &EigenSystem, data: Option<&ObservedSeries>) -> Result<OuterSample> {
    match mode {
        OuterMode::Quadrature => {
            let raw = eig.quad_weights();
            let total: f64 = raw.iter().sum();
            let keep: Vec<usize> = (0..raw.len()).filter(|&i| raw[i] > 1e-300).collect();
            let nodes = eig.grid().nodes();
            Ok(OuterSample {
                points: keep.iter().map(|&i| nodes[i]).collect(),
                weights: keep.iter().map(|&i| raw[i] / total).collect(),
            })
        }
        OuterMode::MonteCarlo { draws, seed } => {
            let sampler = StationarySampler::new(eig.diffusion())?;
            let mut rng = stream_rng(*seed, u64::MAX);
            Ok(OuterSample::equal((0..*draws).map(|_| sampler.sample(&mut rng)).collect()))
        }
        OuterMode::Data => {
            let d = data.ok_or_else(|| Error::Precondition("data outer sample needs a series".into()))?;
            Ok(OuterSample::equal(d.values[..d.values.len() - 1].to_vec()))
        }
    }
}

/// Covariance of the stacked parameter vector `(theta1, theta2)`.
#[derive(Clone, Debug, Serialize)]
pub struct CovarianceBlock {
    pub covariance: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PluginCovariance {
    pub names: Vec<String>,
    pub n_obs: usize,
    pub outer_points: usize,
    pub ks: CovarianceBlock,
    pub optimal: CovarianceBlock,
    /// Optimal-weight constants `C2` (`p1 x p2`) and `c3` (`p1 x p2`).
    pub c2: Vec<Vec<f64>>,
    pub c3: Vec<Vec<f64>>,
    /// Optimal covariance of `theta2` from `(E[W*' H1])^-1 / n`.
    pub optimal_theta2_closed_form: Vec<Vec<f64>>,
    pub ridge_solves: usize,
    #[serde(skip)]
    pub c2_matrix: DMatrix<f64>,
    #[serde(skip)]
    pub c3_matrix: DMatrix<f64>,
}

struct Moments {
    xpx: DMatrix<f64>,
    sigma1: DMatrix<f64>,
    ridges: usize,
}

/// Plug-in sandwich covariance at `theta2` with outer expectations over `outer`.
pub fn plugin_covariance(
    setup: &EfSetup,
    pin: ScalePin,
    sens: &Theta1Sensitivity,
    theta2: &[f64],
    outer: &OuterSample,
    n_obs: usize,
    exec: Execution,
) -> Result<PluginCovariance> {
    let diff = setup.eig.diffusion().clone();
    if sens.h.len() != sens.p1() {
        return Err(Error::Capability(
            "plug-in covariance needs single-observation first-step moments".into(),
        ));
    }
    if outer.is_empty() || n_obs == 0 {
        return Err(Error::Precondition("empty outer sample or zero observations".into()));
    }
    let sub = setup.subordinator(theta2)?;
    let d = setup.decays(&sub);
    let grad = setup.decay_gradient(&sub, &d)?;
    let grad1 = sens.decay_gradient(setup, &sub, &d);
    let (p1, p2) = (sens.p1(), setup.p2());
    let width = p2 + 2 * p1;
    let parts = exec::map_chunks(exec, outer.len(), CHUNK, |range| -> Result<Moments> {
        let mut acc = Moments {
            xpx: DMatrix::zeros(width, width),
            sigma1: DMatrix::zeros(p1, p1),
            ridges: 0,
        };
        let mut phi = vec![0.0; setup.terms];
        for i in range {
            let wt = outer.weights[i];
            setup.eig.eval_into(outer.points[i], &mut phi);
            let pieces = setup.state_pieces(&phi, &d, &grad);
            let g = sens.g_matrix(setup, &phi, &d, &grad1);
            let k = sens.k_matrix(setup, &pieces.pi, &phi, &d);
            let mut x = DMatrix::zeros(setup.m, width);
            x.columns_mut(0, p2).copy_from(&(-&pieces.q));
            x.columns_mut(p2, p1).copy_from(&g);
            x.columns_mut(p2 + p1, p1).copy_from(&k);
            let (px, ridge) = solve_with_ridge(&pieces.p, &x, 1e-13)?;
            acc.ridges += ridge as usize;
            acc.xpx += (x.transpose() * px) * wt;
            acc.sigma1 += sens.sigma1_at(setup, &pieces.pi, &phi, &d) * wt;
        }
        Ok(acc)
    });
    let mut xpx = DMatrix::zeros(width, width);
    let mut sigma1 = DMatrix::zeros(p1, p1);
    let mut ridges = 0;
    for part in parts {
        let p = part?;
        xpx += p.xpx;
        sigma1 += p.sigma1;
        ridges += p.ridges;
    }
    xpx = (&xpx + xpx.transpose()) * 0.5;
    let a11 = a11_matrix(&diff, pin, &outer.points, Some(&outer.weights))?;

    let (h, g, k) = (0..p2, p2..p2 + p1, p2 + p1..width);
    let blk = |r: std::ops::Range<usize>, c: std::ops::Range<usize>| -> DMatrix<f64> {
        xpx.view((r.start, c.start), (r.len(), c.len())).into_owned()
    };
    // optimal constants
    let q1 = blk(g.clone(), h.clone());
    let q2 = blk(g.clone(), g.clone());
    let q3 = blk(g.clone(), k.clone());
    let q4 = blk(k.clone(), h.clone());
    let q5 = blk(k.clone(), k.clone());
    let mut lhs = DMatrix::zeros(2 * p1, 2 * p1);
    lhs.view_mut((0, 0), (p1, p1)).copy_from(&(-&q2));
    lhs.view_mut((0, p1), (p1, p1)).copy_from(&(a11.transpose() - &q3));
    lhs.view_mut((p1, 0), (p1, p1)).copy_from(&(&a11 - q3.transpose()));
    lhs.view_mut((p1, p1), (p1, p1)).copy_from(&(&sigma1 - &q5));
    let mut rhs = DMatrix::zeros(2 * p1, p2);
    rhs.view_mut((0, 0), (p1, p2)).copy_from(&q1);
    rhs.view_mut((p1, 0), (p1, p2)).copy_from(&q4);
    // singular when the first-step moments lie in the span of the
    // eigenfunctions; the sandwich is then flat along the null directions
    let (sol, _) = solve_with_ridge(&lhs, &rhs, 1e-10)?;
    let c2 = sol.rows(0, p1).into_owned();
    let c3 = sol.rows(p1, p1).into_owned();

    let mut t_ks = DMatrix::zeros(width, p2);
    t_ks.view_mut((0, 0), (p2, p2)).copy_from(&(-DMatrix::identity(p2, p2)));
    let mut t_opt = DMatrix::zeros(width, p2);
    t_opt.view_mut((0, 0), (p2, p2)).copy_from(&DMatrix::identity(p2, p2));
    t_opt.view_mut((p2, 0), (p1, p2)).copy_from(&c2);
    t_opt.view_mut((p2 + p1, 0), (p1, p2)).copy_from(&c3);

    let sandwich = |t: &DMatrix<f64>| -> Result<CovarianceBlock> {
        let a21 = t.transpose() * xpx.columns(g.start, p1);
        let a22 = t.transpose() * xpx.columns(h.start, p2);
        let s12 = xpx.rows(k.start, p1) * t;
        let s22 = t.transpose() * &xpx * t;
        let dim = p1 + p2;
        let mut dm = DMatrix::zeros(dim, dim);
        dm.view_mut((0, 0), (p1, p1)).copy_from(&a11);
        dm.view_mut((p1, 0), (p2, p1)).copy_from(&a21);
        dm.view_mut((p1, p1), (p2, p2)).copy_from(&a22);
        let mut sm = DMatrix::zeros(dim, dim);
        sm.view_mut((0, 0), (p1, p1)).copy_from(&sigma1);
        sm.view_mut((0, p1), (p1, p2)).copy_from(&s12);
        sm.view_mut((p1, 0), (p2, p1)).copy_from(&s12.transpose());
        sm.view_mut((p1, p1), (p2, p2)).copy_from(&s22);
        let dinv = dm
            .try_inverse()
            .ok_or_else(|| Error::Conditioning("sandwich derivative matrix is singular".into()))?;
        let cov = symmetrize_psd(&(&dinv * sm * dinv.transpose() / n_obs as f64), 1e-8)?;
        Ok(CovarianceBlock {
            standard_errors: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
            covariance: to_rows(&cov),
        })
    };
    let ks = sandwich(&t_ks)?;
    let optimal = sandwich(&t_opt)?;
    let a22_opt = t_opt.transpose() * xpx.columns(0, p2);
    let closed = (a22_opt.clone() + a22_opt.transpose())
        .scale(0.5)
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("optimal information matrix is singular".into()))?
        / n_obs as f64;
    let mut names = sens.names.clone();
    names.extend(setup.free.iter().map(|p| p.name().to_string()));
    Ok(PluginCovariance {
        names,
        n_obs,
        outer_points: outer.len(),
        ks,
        optimal,
        c2: to_rows(&c2),
        c3: to_rows(&c3),
        optimal_theta2_closed_form: to_rows(&closed),
        ridge_solves: ridges,
        c2_matrix: c2,
        c3_matrix: c3,
    })
}
