//! Numerical Sturm-Liouville eigenpairs of a scalar diffusion generator.
//!
//! The generator `mu f' + sigma^2 f'' / 2 = lambda f` is mapped to the
//! Schrodinger form `-u'' + V(s) u = eps u` with `s = int dx / sigma`,
//! `b = mu / sigma - sigma' / 2`, `V = b^2 + sigma b'`, `eps = -2 lambda` and
//! `f = u / sqrt(sigma q)`. On each mesh cell the potential is frozen at the
//! midpoint and the solution is propagated exactly (second-order constant
//! perturbation scheme). Eigenvalues are located by bisection on the zero
//! count of the left shot, eigenfunctions by matching left and right shots,
//! and both are Richardson-extrapolated over three nested meshes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Diffusion, StationaryDensity};

use super::{EigenSystem, Grid, MeshReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlOptions {
    /// Cells of the eigenfunction grid.
    pub cells: usize,
    /// Explicit grid bounds; default is mean +- `sd_multiple` sd.
    pub bounds: Option<(f64, f64)>,
    /// Log-spaced grid; default is log spacing on `(0, inf)`.
    pub log_spacing: Option<bool>,
    pub sd_multiple: f64,
    /// Subdivisions of each grid cell on the coarsest mesh.
    pub base_refinement: usize,
    /// Number of nested meshes (1 disables extrapolation).
    pub levels: usize,
    /// Decay exponent `int sqrt(V - eps) ds` required in each mesh extension.
    pub decay_length: f64,
}

impl Default for SlOptions {
    fn default() -> Self {
        SlOptions {
            cells: 3200,
            bounds: None,
            log_spacing: None,
            sd_multiple: 10.0,
            base_refinement: 2,
            levels: 3,
            decay_length: 20.0,
        }
    }
}

struct Mesh {
    s: Vec<f64>,
    vmid: Vec<f64>,
    /// Mesh index of every grid node.
    grid_index: Vec<usize>,
    /// Robin data `u'/u = b` at the two mesh ends (zero flux of `f`).
    b_left: f64,
    b_right: f64,
}

/// Drift `b` of the Liouville form; the ground state is `u_0 = exp(int b ds)`.
fn drift_b(diff: &Diffusion, s: f64) -> f64 {
    let x = diff.liouville_inverse(s);
    let (sig, dsig, _) = diff.vol(x);
    diff.drift(x) / sig - 0.5 * dsig
}

fn potential(diff: &Diffusion, s: f64) -> f64 {
    let x = diff.liouville_inverse(s);
    let (sig, dsig, ddsig) = diff.vol(x);
    let mu = diff.drift(x);
    let dmu = diff.drift_dx(x);
    let b = mu / sig - 0.5 * dsig;
    let db = (dmu * sig - mu * dsig) / (sig * sig) - 0.5 * ddsig;
    b * b + sig * db
}

/// Exact propagation across one cell of constant `z = V - eps`.
/// Returns the new `(u, u')` and the log of a positive factor pulled out.
#[inline]
fn propagate(z: f64, h: f64, u: f64, du: f64) -> (f64, f64, f64) {
    let a = z * h * h;
    if a.abs() < 1e-4 {
        let c = 1.0 + a / 2.0 + a * a / 24.0;
        let s = h * (1.0 + a / 6.0 + a * a / 120.0);
        let ks = z * s;
        return (c * u + s * du, ks * u + c * du, 0.0);
    }
    if z > 0.0 {
        let k = z.sqrt();
        let kh = k * h;
        if kh.abs() < 20.0 {
            let (sh, ch) = (kh.sinh(), kh.cosh());
            (ch * u + sh / k * du, k * sh * u + ch * du, 0.0)
        } else {
            let e = (-2.0 * kh.abs()).exp();
            let sgn = kh.signum();
            let (ch, sh) = (1.0 + e, sgn * (1.0 - e));
            (ch * u + sh / k * du, k * sh * u + ch * du, kh.abs() - std::f64::consts::LN_2)
        }
    } else {
        let k = (-z).sqrt();
        let (sn, cs) = (k * h).sin_cos();
        (cs * u + sn / k * du, -k * sn * u + cs * du, 0.0)
    }
}

impl Mesh {
    fn cells(&self) -> usize {
        self.vmid.len()
    }

    /// Number of eigenvalues below `eps`: zeros of the left shot plus one
    /// if its final Prufer angle has passed the right boundary angle.
    fn count(&self, eps: f64) -> usize {
        let (mut u, mut du) = (1.0f64, self.b_left);
        let mut zeros = 0usize;
        for k in 0..self.cells() {
            let h = self.s[k + 1] - self.s[k];
            let z = self.vmid[k] - eps;
            if z < 0.0 && -z * h * h >= 1e-4 {
                let kk = (-z).sqrt();
                let th0 = u.atan2(du / kk);
                let th1 = th0 + kk * h;
                let pi = std::f64::consts::PI;
                zeros += ((th1 / pi).floor() - (th0 / pi).floor()) as usize;
                let (nu, ndu, _) = propagate(z, h, u, du);
                u = nu;
                du = ndu;
            } else {
                let (nu, ndu, _) = propagate(z, h, u, du);
                if u != 0.0 && nu != 0.0 && (nu > 0.0) != (u > 0.0) {
                    zeros += 1;
                }
                u = nu;
                du = ndu;
            }
            let m = u.abs().max(du.abs());
            if m > 1e100 || (m < 1e-100 && m > 0.0) {
                u /= m;
                du /= m;
            }
        }
        let mut theta = u.atan2(du);
        if theta <= 0.0 {
            theta += std::f64::consts::PI;
        }
        zeros + (theta > 1f64.atan2(self.b_right)) as usize
    }

    /// Shot from one end; returns `(u, u', log scale)` at every node.
    fn shoot(&self, eps: f64, from_left: bool) -> Vec<(f64, f64, f64)> {
        let n = self.s.len();
        let mut out = vec![(0.0, 0.0, 0.0); n];
        let (mut u, mut du, mut ls) = (1.0f64, if from_left { self.b_left } else { self.b_right }, 0.0f64);
        let idx: Box<dyn Iterator<Item = usize>> = if from_left {
            Box::new(0..n)
        } else {
            Box::new((0..n).rev())
        };
        let mut prev: Option<usize> = None;
        for k in idx {
            if let Some(p) = prev {
                let (cell, h) = if from_left { (p, self.s[k] - self.s[p]) } else { (k, self.s[k] - self.s[p]) };
                let (nu, ndu, lg) = propagate(self.vmid[cell] - eps, h, u, du);
                u = nu;
                du = ndu;
                ls += lg;
                let m = u.abs().max(du.abs());
                if m > 1e100 || (m < 1e-100 && m > 0.0) {
                    u /= m;
                    du /= m;
                    ls += m.ln();
                }
            }
            out[k] = (u, du, ls);
            prev = Some(k);
        }
        out
    }
}

struct Level {
    eps: Vec<f64>,
    funcs: Vec<Vec<f64>>,
}

fn solve_level(mesh: &Mesh, count: usize, vmin: f64, sig_q: &[f64], w: &[f64]) -> Result<Level> {
    let mut evals: Vec<(f64, usize)> = Vec::new();
    let mut eps = Vec::with_capacity(count);
    let mut funcs = Vec::with_capacity(count);
    for n in 0..count {
        let mut lo = evals
            .iter()
            .filter(|e| e.1 <= n)
            .map(|e| e.0)
            .fold(vmin - 1e-12 * vmin.abs().max(1.0), f64::max);
        let mut hi = evals.iter().filter(|e| e.1 > n).map(|e| e.0).fold(f64::INFINITY, f64::min);
        if !hi.is_finite() {
            let mut step = (lo.abs()).max(1e-3);
            loop {
                let cand = lo + step;
                let c = mesh.count(cand);
                evals.push((cand, c));
                if c > n {
                    hi = cand;
                    break;
                }
                lo = cand;
                step *= 2.0;
                if step > 1e12 {
                    return Err(Error::solver(format!("cannot bracket eigenvalue {n}"), evals.len(), step));
                }
            }
        }
        let mut iters = 0;
        while hi - lo > 4.0 * f64::EPSILON * hi.abs().max(lo.abs()) && iters < 200 {
            let mid = 0.5 * (lo + hi);
            let c = mesh.count(mid);
            evals.push((mid, c));
            if c > n {
                hi = mid;
            } else {
                lo = mid;
            }
            iters += 1;
        }
        let e = 0.5 * (lo + hi);
        eps.push(e);
        funcs.push(eigenfunction(mesh, e, sig_q, w)?);
    }
    Ok(Level { eps, funcs })
}

fn eigenfunction(mesh: &Mesh, eps: f64, sig_q: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let left = mesh.shoot(eps, true);
    let right = mesh.shoot(eps, false);
    let last_allowed = (0..mesh.cells()).rev().find(|&k| mesh.vmid[k] < eps).unwrap_or(0);
    let km = (last_allowed + 1).clamp(1, mesh.s.len() - 2);
    let (ul, dul, ll) = left[km];
    let (ur, dur, lr) = right[km];
    let alpha = (ul * ur + dul * dur) / (ur * ur + dur * dur);
    if !alpha.is_finite() || alpha == 0.0 {
        return Err(Error::solver("eigenfunction matching failed", 0, alpha));
    }
    let ln_alpha = alpha.abs().ln() + lr - ll;
    let sgn = alpha.signum();
    let mut f: Vec<f64> = mesh
        .grid_index
        .iter()
        .zip(sig_q)
        .map(|(&k, sq)| {
            let u = if k <= km {
                left[k].0 * (left[k].2 - ll).exp()
            } else {
                sgn * right[k].0 * (right[k].2 - lr + ln_alpha).exp()
            };
            u / sq
        })
        .collect();
    let norm2: f64 = f.iter().zip(w).map(|(f, w)| w * f * f).sum();
    let norm = norm2.sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::solver("eigenfunction normalization failed", 0, norm));
    }
    let sign = f.iter().find(|v| (*v / norm).abs() > 1e-6).map(|v| v.signum()).unwrap_or(1.0);
    for v in f.iter_mut() {
        *v *= sign / norm;
    }
    Ok(f)
}

/// First `m + 1` eigenpairs of the generator of `diff` on a grid covering the
/// effective support of its stationary density.
pub fn solve_sl_eigensystem(diff: &Diffusion, m: usize, opts: &SlOptions) -> Result<EigenSystem> {
    let q = StationaryDensity::new(diff)?;
    let log = opts.log_spacing.unwrap_or(diff.interval().0 == 0.0);
    let grid = match opts.bounds {
        Some((lo, hi)) if log => Grid::logarithmic(lo, hi, opts.cells)?,
        Some((lo, hi)) => Grid::new(lo, hi, opts.cells)?,
        None => {
            let g = Grid::default_for(&q, opts.cells, opts.sd_multiple)?;
            match (log, g.log) {
                (true, false) => Grid::logarithmic(g.lo, g.hi, opts.cells)?,
                (false, true) => Grid::new(g.lo, g.hi, opts.cells)?,
                _ => g,
            }
        }
    };
    if opts.cells < 16 || opts.levels == 0 || opts.base_refinement == 0 {
        return Err(Error::Precondition("grid needs at least 16 cells and one mesh level".into()));
    }
    let xs = grid.nodes();
    let s_nodes: Vec<f64> = xs.iter().map(|&x| diff.liouville(x)).collect();
    if s_nodes.windows(2).any(|w| !(w[1] > w[0])) || s_nodes.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("grid does not map to an increasing Liouville coordinate".into()));
    }
    // sqrt(sigma q) at the grid nodes, and q-weighted trapezoid weights
    let sig_q: Vec<f64> = xs.iter().map(|&x| (diff.vol(x).0 * q.pdf(x)).sqrt()).collect();
    let mut w: Vec<f64> = crate::numerics::trapezoid_weights(&xs)
        .iter()
        .zip(&xs)
        .map(|(w, &x)| w * q.pdf(x))
        .collect();
    let (s_lo_bound, s_hi_bound) = {
        let (l, r) = diff.interval();
        let sl = if l.is_finite() { diff.liouville(l) } else { f64::NEG_INFINITY };
        let sr = if r.is_finite() { diff.liouville(r) } else { f64::INFINITY };
        (
            if sl.is_finite() { sl } else { f64::NEG_INFINITY },
            if sr.is_finite() { sr } else { f64::INFINITY },
        )
    };
    let mass: f64 = w.iter().sum();
    if (1.0 - mass).abs() > 1e-4 {
        return Err(Error::Precondition(format!(
            "grid [{}, {}] integrates the stationary density to {mass:.6}; widen the bounds or add cells",
            grid.lo, grid.hi
        )));
    }
    w.iter_mut().for_each(|v| *v /= mass);
    let count = m + 1;

    // extensions beyond the grid, sized for the largest wanted eigenvalue
    let extend = |target: f64, dir: f64| -> Result<usize> {
        let (edge, h) = if dir < 0.0 {
            (s_nodes[0], (s_nodes[1] - s_nodes[0]) / opts.base_refinement as f64)
        } else {
            let n = s_nodes.len();
            (s_nodes[n - 1], (s_nodes[n - 1] - s_nodes[n - 2]) / opts.base_refinement as f64)
        };
        let mut acc = 0.0;
        let mut k = 0usize;
        while acc < opts.decay_length {
            let mid = edge + dir * (k as f64 + 0.5) * h;
            let next = edge + dir * (k as f64 + 1.0) * h;
            if next <= s_lo_bound || next >= s_hi_bound {
                break;
            }
            let v = potential(diff, mid);
            // no decay to gain where the potential sits below the target,
            // e.g. an inverse-square well at a finite Liouville endpoint
            if !v.is_finite() || v <= target {
                break;
            }
            acc += h * (v - target).max(0.0).sqrt();
            k += 1;
            if k > 200_000 {
                return Err(Error::solver("mesh extension did not reach the decay length", k, acc));
            }
        }
        Ok(k)
    };
    let build = |r: usize, ext: (usize, usize)| -> Mesh {
        let ratio = r / opts.base_refinement;
        let mut s = Vec::new();
        let hl = (s_nodes[1] - s_nodes[0]) / r as f64;
        let nl = ext.0 * ratio;
        for k in (1..=nl).rev() {
            s.push(s_nodes[0] - k as f64 * hl);
        }
        let mut grid_index = Vec::with_capacity(s_nodes.len());
        for i in 0..s_nodes.len() - 1 {
            grid_index.push(s.len());
            let h = (s_nodes[i + 1] - s_nodes[i]) / r as f64;
            for j in 0..r {
                s.push(s_nodes[i] + j as f64 * h);
            }
        }
        grid_index.push(s.len());
        let last = *s_nodes.last().unwrap();
        s.push(last);
        let n = s_nodes.len();
        let hr = (s_nodes[n - 1] - s_nodes[n - 2]) / r as f64;
        for k in 1..=ext.1 * ratio {
            s.push(last + k as f64 * hr);
        }
        let vmid = s.windows(2).map(|p| potential(diff, 0.5 * (p[0] + p[1]))).collect();
        let (b_left, b_right) = (drift_b(diff, s[0]), drift_b(diff, *s.last().unwrap()));
        Mesh { s, vmid, grid_index, b_left, b_right }
    };

    let edge_v = potential(diff, s_nodes[0]).min(potential(diff, *s_nodes.last().unwrap()));
    let mut target = edge_v;
    let mut ext = (extend(target, -1.0)?, extend(target, 1.0)?);
    let mut first = None;
    for _ in 0..4 {
        let mesh = build(opts.base_refinement, ext);
        let vmin = mesh.vmid.iter().cloned().fold(f64::INFINITY, f64::min);
        let level = solve_level(&mesh, count, vmin, &sig_q, &w)?;
        let top = *level.eps.last().unwrap();
        let wanted = top + 0.25 * (top - level.eps[0]).abs().max(1e-12);
        if wanted <= target {
            first = Some((level, vmin));
            break;
        }
        target = wanted;
        ext = (extend(target, -1.0)?, extend(target, 1.0)?);
    }
    let (first, _) = first.ok_or_else(|| Error::solver("could not size the mesh extension", 4, target))?;

    let mut levels = vec![first];
    let mut refinements = vec![opts.base_refinement];
    let mut mesh_cells = 0;
    let mut s_interval = (0.0, 0.0);
    for j in 1..opts.levels {
        let r = opts.base_refinement << j;
        let mesh = build(r, ext);
        let vmin = mesh.vmid.iter().cloned().fold(f64::INFINITY, f64::min);
        mesh_cells = mesh.cells();
        s_interval = (mesh.s[0], *mesh.s.last().unwrap());
        levels.push(solve_level(&mesh, count, vmin, &sig_q, &w)?);
        refinements.push(r);
    }
    if opts.levels == 1 {
        let mesh = build(opts.base_refinement, ext);
        mesh_cells = mesh.cells();
        s_interval = (mesh.s[0], *mesh.s.last().unwrap());
    }
    let weights: &[f64] = match levels.len() {
        1 => &[1.0],
        2 => &[-1.0 / 3.0, 4.0 / 3.0],
        _ => &[1.0 / 45.0, -20.0 / 45.0, 64.0 / 45.0],
    };
    let used = &levels[levels.len() - weights.len()..];
    let combine = |get: &dyn Fn(&Level) -> f64| -> f64 { used.iter().zip(weights).map(|(l, w)| w * get(l)).sum() };
    let finest = used.last().unwrap();
    let mut eps = Vec::with_capacity(count);
    let mut corrections = Vec::with_capacity(count);
    let mut funcs = Vec::with_capacity(count);
    for n in 0..count {
        let e = combine(&|l: &Level| l.eps[n]);
        corrections.push(0.5 * (e - finest.eps[n]).abs());
        eps.push(e);
        let f: Vec<f64> = (0..xs.len()).map(|k| combine(&|l: &Level| l.funcs[n][k])).collect();
        funcs.push(f);
    }
    let mut lambdas: Vec<f64> = eps.iter().map(|e| -0.5 * e).collect();
    let ground = (
        lambdas[0].abs(),
        funcs[0].iter().fold(0.0f64, |a, v| a.max((v - 1.0).abs())),
    );
    lambdas[0] = 0.0;
    funcs[0] = vec![1.0; xs.len()];
    if lambdas.windows(2).any(|p| !(p[1] < p[0])) {
        return Err(Error::solver("eigenvalues are not strictly decreasing", count, 0.0));
    }
    let report = MeshReport {
        refinements,
        extrapolated: weights.len() > 1,
        s_interval,
        mesh_cells,
        eigenvalue_corrections: corrections,
        ground_state_deviation: ground,
    };
    Ok(EigenSystem::tabulated(q, grid, lambdas, funcs, report))
}
