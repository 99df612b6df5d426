//! Eigen systems of diffusion generators and the spectral functionals of the
//! subordinate semigroup: transition density and distribution function,
//! conditional expectations and the resolvent.

mod product;
mod sl;

use std::sync::OnceLock;

use serde::Serialize;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::models::{Diffusion, StationaryDensity, Subordinator};
use crate::numerics::{normal_cdf, trapezoid_weights};

pub use product::ProductTensor;
pub use sl::{solve_sl_eigensystem, SlOptions};

/// Upper bound of `|phi_n(x)| exp(-z^2/2)` for normalized Hermite functions.
pub const CRAMER_BOUND: f64 = 1.086_435;

/// Default number of series terms allowed for closed-form systems.
pub const DEFAULT_SERIES_CAP: usize = 200_000;

/// Grid on `[lo, hi]`, uniform in `x` or, with `log`, in `ln x`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    pub log: bool,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if !(lo < hi) || cells < 2 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain(format!("invalid grid [{lo}, {hi}] with {cells} cells")));
        }
        Ok(Grid { lo, hi, cells, log: false })
    }

    pub fn logarithmic(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if !(lo > 0.0) {
            return Err(Error::Domain(format!("log grid needs a positive lower bound, got {lo}")));
        }
        Ok(Grid { log: true, ..Grid::new(lo, hi, cells)? })
    }

    /// Default grid. OU: mean +- `sd_multiple` sd, uniform. Positive-domain
    /// diffusions: log-spaced over the wider of that range and the numerical
    /// support, since peaks near zero and power tails defeat a uniform grid.
    pub fn default_for(q: &StationaryDensity, cells: usize, sd_multiple: f64) -> Result<Self> {
        let (l, r) = q.diffusion().interval();
        let (sl, sr) = q.support();
        let log = l == 0.0;
        let mut lo = q.mean() - sd_multiple * q.sd();
        let mut hi = q.mean() + sd_multiple * q.sd();
        if log {
            lo = lo.min(sl);
            hi = hi.max(sr);
        }
        if lo <= l || l.is_finite() && lo < sl {
            lo = sl;
        }
        if hi >= r || r.is_finite() && hi > sr {
            hi = sr;
        }
        if log {
            Grid::logarithmic(lo, hi, cells)
        } else {
            Grid::new(lo, hi, cells)
        }
    }

    fn coord(&self, x: f64) -> f64 {
        if self.log {
            x.ln()
        } else {
            x
        }
    }

    /// Cell width in the grid coordinate (`ln x` for log grids).
    pub fn step(&self) -> f64 {
        (self.coord(self.hi) - self.coord(self.lo)) / self.cells as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.cells {
            self.hi
        } else if self.log {
            (self.lo.ln() + i as f64 * self.step()).exp()
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.cells).map(|i| self.node(i)).collect()
    }

    /// Cell index and fractional position (linear in `x`), clamped to the grid.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        if !(x > self.lo) {
            return (0, 0.0);
        }
        let u = (self.coord(x) - self.coord(self.lo)) / self.step();
        if u >= self.cells as f64 {
            return (self.cells - 1, 1.0);
        }
        let i = (u.floor() as usize).min(self.cells - 1);
        if !self.log {
            return (i, u - i as f64);
        }
        let (a, b) = (self.node(i), self.node(i + 1));
        (i, ((x - a) / (b - a)).clamp(0.0, 1.0))
    }
}

/// How an eigen system was obtained.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EigenSource {
    Analytic,
    Numeric(MeshReport),
}

/// Diagnostics of a numerical Sturm-Liouville solve.
#[derive(Clone, Debug, Serialize)]
pub struct MeshReport {
    /// Subdivisions of each grid cell at each refinement level.
    pub refinements: Vec<usize>,
    pub extrapolated: bool,
    /// Liouville-coordinate interval of the finest mesh, including extensions.
    pub s_interval: (f64, f64),
    pub mesh_cells: usize,
    /// Size of the extrapolation correction per eigenvalue (error proxy).
    pub eigenvalue_corrections: Vec<f64>,
    /// Deviation of the computed ground state from the exact `lambda_0 = 0`, `phi_0 = 1`.
    pub ground_state_deviation: (f64, f64),
}

#[derive(Clone, Debug)]
enum Basis {
    Hermite { kappa: f64, theta: f64, sigma: f64 },
    Tabulated { values: Vec<Vec<f64>>, cumulative: Vec<Vec<f64>> },
}

/// Eigenvalues `0 = lambda_0 > lambda_1 > ...` and eigenfunctions of a
/// diffusion generator, orthonormal in `L^2(q)`.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    eigenvalues: Vec<f64>,
    basis: Basis,
    density: StationaryDensity,
    grid: Grid,
    source: EigenSource,
    quad_weights: Vec<f64>,
}

fn hermite_coeffs() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=DEFAULT_SERIES_CAP)
            .map(|m| {
                if m < 2 {
                    (std::f64::consts::SQRT_2, 0.0)
                } else {
                    let mf = m as f64;
                    ((2.0 / mf).sqrt(), ((mf - 1.0) / mf).sqrt())
                }
            })
            .collect()
    })
}

/// Incremental evaluator of normalized Hermite functions `phi_n(z)`.
#[derive(Clone, Copy, Debug)]
pub struct HermiteIter {
    z: f64,
    n: usize,
    prev: f64,
    cur: f64,
}

impl HermiteIter {
    pub fn new(z: f64) -> Self {
        HermiteIter { z, n: 0, prev: 0.0, cur: 1.0 }
    }

    /// Current index and value.
    #[inline]
    pub fn value(&self) -> f64 {
        self.cur
    }

    #[inline]
    pub fn previous(&self) -> f64 {
        self.prev
    }

    #[inline]
    pub fn advance(&mut self) {
        let (a, b) = hermite_coeffs()[self.n + 1];
        let next = a * self.z * self.cur - b * self.prev;
        self.prev = self.cur;
        self.cur = next;
        self.n += 1;
    }
}

/// Fills `out[n] = phi_n(z)` using the three-term recursion.
pub fn hermite_values(z: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    let mut it = HermiteIter::new(z);
    out[0] = 1.0;
    for v in out.iter_mut().skip(1) {
        it.advance();
        *v = it.value();
    }
}

/// Closed-form OU eigen system (normalized Hermite polynomials).
pub fn ou_eigensystem(kappa: f64, theta: f64, sigma: f64, m: usize) -> Result<EigenSystem> {
    if m < 1 {
        return Err(Error::Precondition("need at least one nontrivial eigenpair".into()));
    }
    let diff = Diffusion::ou(kappa, theta, sigma);
    let q = StationaryDensity::new(&diff)?;
    let grid = Grid::default_for(&q, 800, 10.0)?;
    EigenSystem::hermite(q, grid, m)
}

impl EigenSystem {
    fn hermite(density: StationaryDensity, grid: Grid, m: usize) -> Result<Self> {
        let Diffusion::Ou { kappa, theta, sigma } = *density.diffusion() else {
            return Err(Error::Capability("closed-form eigen system exists only for OU".into()));
        };
        let quad_weights = quad_weights(&grid, &density);
        Ok(EigenSystem {
            eigenvalues: (0..=m).map(|n| -kappa * n as f64).collect(),
            basis: Basis::Hermite { kappa, theta, sigma },
            density,
            grid,
            source: EigenSource::Analytic,
            quad_weights,
        })
    }

    /// Closed-form OU system on an explicit grid.
    pub fn ou_on_grid(diff: &Diffusion, m: usize, grid: Grid) -> Result<Self> {
        Self::hermite(StationaryDensity::new(diff)?, grid, m)
    }

    pub(crate) fn tabulated(
        density: StationaryDensity,
        grid: Grid,
        eigenvalues: Vec<f64>,
        values: Vec<Vec<f64>>,
        report: MeshReport,
    ) -> Self {
        let quad_weights = quad_weights(&grid, &density);
        let nodes = grid.nodes();
        let cumulative = values
            .iter()
            .map(|f| {
                let mut acc = 0.0;
                let mut out = Vec::with_capacity(f.len());
                out.push(0.0);
                for i in 1..f.len() {
                    let h = nodes[i] - nodes[i - 1];
                    acc += 0.5 * h * (f[i - 1] * density.pdf(nodes[i - 1]) + f[i] * density.pdf(nodes[i]));
                    out.push(acc);
                }
                out
            })
            .collect();
        EigenSystem {
            eigenvalues,
            basis: Basis::Tabulated { values, cumulative },
            density,
            grid,
            source: EigenSource::Numeric(report),
            quad_weights,
        }
    }

    /// Number of stored eigenpairs, `M + 1`.
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Largest number of terms usable in series expansions.
    pub fn series_capacity(&self) -> usize {
        match self.basis {
            Basis::Hermite { .. } => DEFAULT_SERIES_CAP,
            Basis::Tabulated { ref values, .. } => values.len(),
        }
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.basis, Basis::Hermite { .. })
    }

    /// `(kappa, theta, sigma)` for closed-form OU systems.
    pub fn hermite_params(&self) -> Option<(f64, f64, f64)> {
        match self.basis {
            Basis::Hermite { kappa, theta, sigma } => Some((kappa, theta, sigma)),
            _ => None,
        }
    }

    pub fn eigenvalue(&self, n: usize) -> f64 {
        match self.basis {
            Basis::Hermite { kappa, .. } => -kappa * n as f64,
            _ => self.eigenvalues[n],
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn density(&self) -> &StationaryDensity {
        &self.density
    }

    pub fn diffusion(&self) -> &Diffusion {
        self.density.diffusion()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn source(&self) -> &EigenSource {
        &self.source
    }

    /// Trapezoid weights times `q` on the grid nodes.
    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Scaled coordinate `z` of the closed-form system.
    #[inline]
    pub fn hermite_z(&self, x: f64) -> Option<f64> {
        match self.basis {
            Basis::Hermite { kappa, theta, sigma } => Some(kappa.sqrt() * (x - theta) / sigma),
            _ => None,
        }
    }

    /// Fills `out[n] = phi_n(x)` for `n < out.len()`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        match &self.basis {
            Basis::Hermite { .. } => hermite_values(self.hermite_z(x).unwrap(), out),
            Basis::Tabulated { values, .. } => {
                let (i, t) = self.grid.locate(x);
                for (n, o) in out.iter_mut().enumerate() {
                    let f = &values[n];
                    *o = f[i] + t * (f[i + 1] - f[i]);
                }
            }
        }
    }

    pub fn eval_vec(&self, x: f64, count: usize) -> Vec<f64> {
        let mut v = vec![0.0; count];
        self.eval_into(x, &mut v);
        v
    }

    pub fn eval(&self, n: usize, x: f64) -> f64 {
        match &self.basis {
            Basis::Hermite { .. } => {
                let mut it = HermiteIter::new(self.hermite_z(x).unwrap());
                for _ in 0..n {
                    it.advance();
                }
                it.value()
            }
            Basis::Tabulated { values, .. } => {
                let (i, t) = self.grid.locate(x);
                values[n][i] + t * (values[n][i + 1] - values[n][i])
            }
        }
    }

    /// Values of `phi_n` at the grid nodes.
    pub fn node_values(&self, n: usize) -> Vec<f64> {
        match &self.basis {
            Basis::Tabulated { values, .. } => values[n].clone(),
            Basis::Hermite { .. } => self.grid.nodes().iter().map(|&x| self.eval(n, x)).collect(),
        }
    }

    /// Node values for all `n < count`, indexed `[n][node]`.
    pub fn node_table(&self, count: usize) -> Vec<Vec<f64>> {
        match &self.basis {
            Basis::Tabulated { values, .. } => values[..count].to_vec(),
            Basis::Hermite { .. } => {
                let nodes = self.grid.nodes();
                let mut table = vec![vec![0.0; nodes.len()]; count];
                let mut buf = vec![0.0; count];
                for (k, &x) in nodes.iter().enumerate() {
                    self.eval_into(x, &mut buf);
                    for n in 0..count {
                        table[n][k] = buf[n];
                    }
                }
                table
            }
        }
    }

    /// `int_l^y phi_n(u) q(u) du`.
    pub fn cumulative(&self, n: usize, y: f64) -> f64 {
        match &self.basis {
            Basis::Hermite { .. } => {
                let z = self.hermite_z(y).unwrap();
                if n == 0 {
                    normal_cdf(std::f64::consts::SQRT_2 * z)
                } else {
                    -(-z * z).exp() * self.eval(n - 1, y) / (std::f64::consts::PI.sqrt() * (2.0 * n as f64).sqrt())
                }
            }
            Basis::Tabulated { cumulative, .. } => {
                if y <= self.grid.lo {
                    return 0.0;
                }
                if y >= self.grid.hi {
                    return if n == 0 { 1.0 } else { 0.0 };
                }
                let (i, t) = self.grid.locate(y);
                let c = &cumulative[n];
                c[i] + t * (c[i + 1] - c[i])
            }
        }
    }

    /// Gram matrix `<phi_i, phi_j>_q` by quadrature on the grid.
    pub fn gram(&self, count: usize) -> Vec<Vec<f64>> {
        let table = self.node_table(count);
        let w = &self.quad_weights;
        (0..count)
            .map(|i| {
                (0..count)
                    .map(|j| (0..w.len()).map(|k| w[k] * table[i][k] * table[j][k]).sum())
                    .collect()
            })
            .collect()
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self, count: usize) -> f64 {
        let g = self.gram(count);
        let mut worst = 0.0f64;
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    /// Keeps only the first `m + 1` eigenpairs.
    pub fn truncated(&self, m: usize) -> EigenSystem {
        let mut out = self.clone();
        let keep = (m + 1).min(self.len());
        out.eigenvalues.truncate(keep);
        if let Basis::Tabulated { values, cumulative } = &mut out.basis {
            values.truncate(keep);
            cumulative.truncate(keep);
        }
        out
    }

    /// Expansion coefficients `<g, phi_n>_q` for `n < count` and the relative
    /// Parseval residual `1 - sum g_n^2 / ||g||^2`.
    pub fn coefficients<G: Fn(f64) -> f64>(&self, g: G, count: usize) -> (Vec<f64>, f64) {
        let count = count.min(self.series_capacity());
        let nodes = self.grid.nodes();
        let gv: Vec<f64> = nodes.iter().map(|&x| g(x)).collect();
        let norm2: f64 = gv.iter().zip(&self.quad_weights).map(|(g, w)| g * g * w).sum();
        let mut coef = vec![0.0; count];
        let mut buf = vec![0.0; count];
        for (k, &x) in nodes.iter().enumerate() {
            self.eval_into(x, &mut buf);
            let wg = self.quad_weights[k] * gv[k];
            for n in 0..count {
                coef[n] += wg * buf[n];
            }
        }
        let captured: f64 = coef.iter().map(|c| c * c).sum();
        let resid = if norm2 > 0.0 { ((norm2 - captured) / norm2).max(0.0) } else { 0.0 };
        (coef, resid)
    }

    /// Rows for tabular export: grid point followed by `phi_1..phi_M`.
    pub fn table_rows(&self) -> Vec<Vec<f64>> {
        let m = self.len();
        let table = self.node_table(m);
        self.grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(k, &x)| std::iter::once(x).chain((1..m).map(|n| table[n][k])).collect())
            .collect()
    }
}

/// Trapezoid weights against `q`, rescaled to unit mass.
fn quad_weights(grid: &Grid, q: &StationaryDensity) -> Vec<f64> {
    let nodes = grid.nodes();
    let mut w: Vec<f64> = trapezoid_weights(&nodes)
        .into_iter()
        .zip(&nodes)
        .map(|(w, &x)| w * q.pdf(x))
        .collect();
    let mass: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= mass);
    w
}

/// Value of a truncated spectral series with its diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesValue {
    pub value: f64,
    pub terms: usize,
    /// Bound (or estimate for tabulated systems) of the neglected tail.
    pub tail: f64,
    /// True when a small negative truncation artifact was clamped.
    pub clamped: bool,
}

/// Eigen system paired with a subordinator: decay rates `phi(-lambda_n)`.
#[derive(Clone, Debug)]
pub struct SubordinateEigenSystem<'a> {
    base: &'a EigenSystem,
    sub: Subordinator,
    delta: f64,
    decay: Vec<f64>,
}

const CHECK_EVERY: usize = 32;

impl<'a> SubordinateEigenSystem<'a> {
    pub fn new(base: &'a EigenSystem, sub: Subordinator, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Domain(format!("time step must be positive, got {delta}")));
        }
        let v = sub.violations();
        if !v.is_empty() {
            return Err(Error::InvalidModel(v));
        }
        let count = match base.basis {
            Basis::Hermite { .. } => 64,
            Basis::Tabulated { .. } => base.len(),
        };
        let decay = (0..count).map(|n| sub.laplace_exponent(-base.eigenvalue(n))).collect();
        Ok(SubordinateEigenSystem { base, sub, delta, decay })
    }

    pub fn base(&self) -> &'a EigenSystem {
        self.base
    }

    pub fn subordinator(&self) -> &Subordinator {
        &self.sub
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `phi(-lambda_n)`.
    #[inline]
    pub fn decay(&self, n: usize) -> f64 {
        if n < self.decay.len() {
            self.decay[n]
        } else {
            self.sub.laplace_exponent(-self.base.eigenvalue(n))
        }
    }

    /// `exp(-phi(-lambda_n) t)`.
    #[inline]
    pub fn factor(&self, n: usize, t: f64) -> f64 {
        (-self.decay(n) * t).exp()
    }

    /// Upper bound of `sum_{m > n} exp(-t phi(kappa m))` for the closed-form system.
    fn hermite_tail(&self, t: f64, n: usize) -> f64 {
        let (kappa, _, _) = self.base.hermite_params().unwrap();
        let gamma = self.sub.gamma();
        let mut bound = f64::INFINITY;
        if gamma > 0.0 {
            let r = (-t * gamma * kappa).exp();
            bound = r.powi(n as i32 + 1) / (1.0 - r);
        }
        if let Subordinator::TemperedStable { c, p, eta, .. } = self.sub.to_tempered_stable() {
            if c > 0.0 {
                let a = -c * statrs::function::gamma::gamma(-p) * t;
                let w = (kappa * n as f64 + eta).powf(p);
                let q = gamma_ur(1.0 / p, a * w);
                if q == 0.0 {
                    return 0.0;
                }
                let ln = a * eta.powf(p) - (p * kappa).ln() - a.ln() / p + ln_gamma(1.0 / p) + q.ln();
                bound = bound.min(ln.exp());
            }
        }
        bound
    }

    fn check_point(&self, x: f64) -> Result<()> {
        if !self.base.diffusion().contains(x) {
            return Err(Error::Domain(format!("state {x} outside the state interval")));
        }
        Ok(())
    }

    /// Sum `sum_n exp(-phi(-lambda_n) t) phi_n(x) phi_n(y)` with truncation control.
    pub fn kernel_sum(&self, t: f64, x: f64, y: f64, reltol: f64) -> Result<SeriesValue> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("time must be positive, got {t}")));
        }
        self.check_point(x)?;
        self.check_point(y)?;
        match self.base.basis {
            Basis::Hermite { .. } => {
                let zx = self.base.hermite_z(x).unwrap();
                let zy = self.base.hermite_z(y).unwrap();
                let scale = CRAMER_BOUND * CRAMER_BOUND * (0.5 * (zx * zx + zy * zy)).exp();
                let (mut hx, mut hy) = (HermiteIter::new(zx), HermiteIter::new(zy));
                let mut sum = 1.0f64;
                let cap = self.base.series_capacity();
                let mut n = 0;
                loop {
                    if n % CHECK_EVERY == CHECK_EVERY - 1 || self.factor(n + 1, t) == 0.0 {
                        let tail = scale * self.hermite_tail(t, n);
                        if tail <= reltol * sum.abs().max(1.0) {
                            return Ok(SeriesValue { value: sum, terms: n + 1, tail, clamped: false });
                        }
                        if n + 1 >= cap {
                            return Err(Error::Truncation {
                                achieved: tail / sum.abs(),
                                terms: n + 1,
                            });
                        }
                    }
                    hx.advance();
                    hy.advance();
                    n += 1;
                    sum += self.factor(n, t) * hx.value() * hy.value();
                }
            }
            Basis::Tabulated { .. } => {
                let m = self.base.len();
                let (fx, fy) = (self.base.eval_vec(x, m), self.base.eval_vec(y, m));
                let terms: Vec<f64> = (0..m).map(|n| self.factor(n, t) * fx[n] * fy[n]).collect();
                let sum: f64 = terms.iter().sum();
                let tail = terms.last().map(|v| v.abs()).unwrap_or(0.0);
                if m > 1 && tail > reltol * sum.abs().max(1.0) {
                    return Err(Error::Truncation {
                        achieved: tail / sum.abs(),
                        terms: m,
                    });
                }
                Ok(SeriesValue { value: sum, terms: m, tail, clamped: false })
            }
        }
    }

    /// Transition density `p(t, x, y) = q(y) sum_n exp(-phi(-lambda_n) t) phi_n(x) phi_n(y)`.
    pub fn transition_density(&self, t: f64, x: f64, y: f64, reltol: f64) -> Result<SeriesValue> {
        let mut s = self.kernel_sum(t, x, y, reltol)?;
        if s.value < 0.0 {
            s.value = 0.0;
            s.clamped = true;
        }
        s.value *= self.base.density.pdf(y);
        s.tail *= self.base.density.pdf(y);
        Ok(s)
    }

    /// Transition distribution function `P(Y_t <= y | Y_0 = x)`, accurate to
    /// `abstol` and clamped to `[0, 1]`.
    pub fn transition_cdf(&self, t: f64, x: f64, y: f64, abstol: f64) -> Result<SeriesValue> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("time must be positive, got {t}")));
        }
        self.check_point(x)?;
        let (l, r) = self.base.diffusion().interval();
        if y <= l {
            return Ok(SeriesValue { value: 0.0, terms: 0, tail: 0.0, clamped: false });
        }
        if y >= r {
            return Ok(SeriesValue { value: 1.0, terms: 0, tail: 0.0, clamped: false });
        }
        let mut out = match self.base.basis {
            Basis::Hermite { .. } => {
                let zx = self.base.hermite_z(x).unwrap();
                let zy = self.base.hermite_z(y).unwrap();
                let gauss = (-zy * zy).exp();
                let denom = std::f64::consts::PI.sqrt();
                let scale = CRAMER_BOUND * CRAMER_BOUND * (0.5 * (zx * zx - zy * zy)).exp()
                    / (2.0 * std::f64::consts::PI).sqrt();
                let (mut hx, mut hy) = (HermiteIter::new(zx), HermiteIter::new(zy));
                let mut sum = normal_cdf(std::f64::consts::SQRT_2 * zy);
                let cap = self.base.series_capacity();
                let mut n = 0;
                loop {
                    if n % CHECK_EVERY == CHECK_EVERY - 1 || self.factor(n + 1, t) == 0.0 {
                        let tail = scale * self.hermite_tail(t, n) / ((n + 1) as f64).sqrt();
                        if tail <= abstol {
                            break SeriesValue { value: sum, terms: n + 1, tail, clamped: false };
                        }
                        if n + 1 >= cap {
                            return Err(Error::Truncation { achieved: tail, terms: n + 1 });
                        }
                    }
                    // phi_{n+1}(x) and the cumulative integral of phi_{n+1}, which uses phi_n(y)
                    let phin_y = hy.value();
                    hx.advance();
                    hy.advance();
                    n += 1;
                    let cum = -gauss * phin_y / (denom * (2.0 * n as f64).sqrt());
                    sum += self.factor(n, t) * hx.value() * cum;
                }
            }
            Basis::Tabulated { .. } => {
                let m = self.base.len();
                let fx = self.base.eval_vec(x, m);
                let terms: Vec<f64> = (0..m).map(|n| self.factor(n, t) * fx[n] * self.base.cumulative(n, y)).collect();
                let tail = if m > 1 { terms[m - 1].abs() } else { 0.0 };
                if tail > abstol.max(1e-12) && m > 1 {
                    return Err(Error::Truncation { achieved: tail, terms: m });
                }
                SeriesValue {
                    value: terms.iter().sum(),
                    terms: m,
                    tail,
                    clamped: false,
                }
            }
        };
        if out.value < 0.0 || out.value > 1.0 {
            out.value = out.value.clamp(0.0, 1.0);
            out.clamped = true;
        }
        Ok(out)
    }

    /// `E[g(Y_t) | Y_0 = x]` from expansion coefficients of `g`.
    pub fn conditional_expectation<G: Fn(f64) -> f64>(&self, g: G, x: f64, t: f64, reltol: f64) -> Result<f64> {
        let (coef, resid) = self.base.coefficients(g, self.coefficient_count());
        if resid > reltol {
            return Err(Error::Truncation {
                achieved: resid,
                terms: coef.len(),
            });
        }
        Ok(self.apply_semigroup(&coef, x, t))
    }

    fn coefficient_count(&self) -> usize {
        match self.base.basis {
            Basis::Hermite { .. } => 64,
            Basis::Tabulated { .. } => self.base.len(),
        }
    }

    /// `sum_n c_n exp(-phi(-lambda_n) t) phi_n(x)`.
    pub fn apply_semigroup(&self, coef: &[f64], x: f64, t: f64) -> f64 {
        let phi = self.base.eval_vec(x, coef.len());
        coef.iter()
            .enumerate()
            .map(|(n, c)| c * self.factor(n, t) * phi[n])
            .sum()
    }

    /// `(I - P_delta)^{-1} g` at `x` for mean-zero `g`.
    pub fn resolvent_apply<G: Fn(f64) -> f64>(&self, g: G, x: f64, reltol: f64) -> Result<f64> {
        let (coef, resid) = self.base.coefficients(g, self.coefficient_count());
        if coef[0].abs() > 1e-8 {
            return Err(Error::Precondition(format!(
                "resolvent needs a mean-zero function, mean is {:.3e}",
                coef[0]
            )));
        }
        if resid > reltol {
            return Err(Error::Truncation {
                achieved: resid,
                terms: coef.len(),
            });
        }
        Ok(self.resolvent_coefficients(&coef).iter().zip(self.base.eval_vec(x, coef.len())).map(|(c, p)| c * p).sum())
    }

    /// Coefficients of `(I - P_delta)^{-1} g` given those of `g` (mean dropped).
    pub fn resolvent_coefficients(&self, coef: &[f64]) -> Vec<f64> {
        coef.iter()
            .enumerate()
            .map(|(n, c)| if n == 0 { 0.0 } else { c / -(-self.decay(n) * self.delta).exp_m1() })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::integrate;

    fn base() -> EigenSystem {
        ou_eigensystem(0.04, 0.0, 0.06, 4).unwrap()
    }

    #[test]
    fn ou_eigenvalues_and_recursion() {
        let e = base();
        assert!((e.eigenvalue(3) + 0.12).abs() < 1e-15);
        assert_eq!(e.eval(1, 0.0), 0.0);
        let e2 = ou_eigensystem(0.3, 1.5, 0.2, 2).unwrap();
        assert_eq!(e2.eval(1, 1.5), 0.0);
        let mut seed = 12345u64;
        for _ in 0..100 {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let x = ((seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 1.2;
            let p = e.eval_vec(x, 3);
            assert!((p[1] * p[1] - (std::f64::consts::SQRT_2 * p[2] + p[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn ou_orthonormal() {
        assert!(base().orthonormality_error(9) < 1e-10);
    }

    #[test]
    fn hermite_cumulative_matches_quadrature() {
        let e = base();
        let q = e.density();
        for n in 0..5 {
            for y in [-0.3, -0.05, 0.1, 0.4] {
                let (num, _) = integrate(|u| e.eval(n, u) * q.pdf(u), -2.5, y, 1e-15, 1e-13);
                assert!((num - e.cumulative(n, y)).abs() < 1e-10, "{n} {y}");
            }
        }
    }

    #[test]
    fn density_large_time_is_stationary() {
        let e = base();
        let s = SubordinateEigenSystem::new(&e, Subordinator::inverse_gaussian(1.0, 0.5), 1.0).unwrap();
        for x in [-0.4, 0.0, 0.3] {
            let p = s.transition_density(1e6, x, 0.1, 1e-8).unwrap();
            assert!((p.value - e.density().pdf(0.1)).abs() < 1e-10);
        }
    }

    #[test]
    fn density_normalizes() {
        let e = base();
        let s = SubordinateEigenSystem::new(&e, Subordinator::inverse_gaussian(1.0, 0.5), 1.0).unwrap();
        let sd = e.density().sd();
        for x in [-2.0 * sd, 2.0 * sd] {
            let (mass, _) = integrate(
                |y| s.transition_density(1.0, x, y, 1e-10).unwrap().value,
                -12.0 * sd,
                12.0 * sd,
                1e-12,
                1e-10,
            );
            assert!((mass - 1.0).abs() < 1e-6, "{mass}");
        }
    }

    #[test]
    fn cdf_symmetry_and_limits() {
        let e = base();
        let s = SubordinateEigenSystem::new(&e, Subordinator::inverse_gaussian(1.0, 0.5), 1.0).unwrap();
        assert!((s.transition_cdf(1.0, 0.0, 0.0, 1e-10).unwrap().value - 0.5).abs() < 1e-8);
        assert!((s.transition_cdf(1.0, 0.1, 3.0, 1e-10).unwrap().value - 1.0).abs() < 1e-6);
        assert!(s.transition_cdf(1.0, 0.1, -3.0, 1e-10).unwrap().value < 1e-6);
        let (num, _) = integrate(|y| s.transition_density(1.0, 0.1, y, 1e-10).unwrap().value, -2.5, 0.05, 1e-13, 1e-11);
        assert!((num - s.transition_cdf(1.0, 0.1, 0.05, 1e-10).unwrap().value).abs() < 1e-7);
    }

    #[test]
    fn eigenvector_expectations() {
        let e = base();
        let s = SubordinateEigenSystem::new(&e, Subordinator::inverse_gaussian(1.0, 0.5), 1.0).unwrap();
        for m in 0..5 {
            for x in [-0.2, 0.07] {
                let ce = s.conditional_expectation(|y| e.eval(m, y), x, 1.0, 1e-8).unwrap();
                assert!((ce - s.factor(m, 1.0) * e.eval(m, x)).abs() < 1e-10);
            }
        }
        assert!((s.conditional_expectation(|_| 1.0, 0.3, 2.5, 1e-8).unwrap() - 1.0).abs() < 1e-12);
        let r = s.resolvent_apply(|y| e.eval(1, y), 0.2, 1e-8).unwrap();
        assert!((r - e.eval(1, 0.2) / (1.0 - s.factor(1, 1.0))).abs() < 1e-9);
        assert!(s.resolvent_apply(|_| 1.0, 0.0, 1e-8).is_err());
    }

    #[test]
    fn tail_bound_dominates() {
        let e = base();
        let s = SubordinateEigenSystem::new(&e, Subordinator::inverse_gaussian(1.0, 0.5), 1.0).unwrap();
        for n in [0usize, 10, 100, 1000] {
            let direct: f64 = (n + 1..400_000).map(|m| s.factor(m, 1.0)).sum();
            let bound = s.hermite_tail(1.0, n);
            assert!(bound >= direct && bound < 1.5 * direct + 1e-300, "{n}: {bound} {direct}");
        }
        let det = SubordinateEigenSystem::new(&e, Subordinator::deterministic(2.0), 1.0).unwrap();
        let direct: f64 = (6..100_000).map(|m| det.factor(m, 1.0)).sum();
        assert!((det.hermite_tail(1.0, 5) - direct).abs() < 1e-12 * direct);
    }
}
