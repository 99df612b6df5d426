//! Small numerical kernels: adaptive quadrature, Gauss-Legendre rules,
//! bracketed root finding and dense-matrix helpers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut resk = fc * WGK[7];
    let mut resg = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        resk += WGK[j] * s;
        if j % 2 == 1 {
            resg += WG[j / 2] * s;
        }
    }
    (resk * h, ((resk - resg) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) quadrature on a finite interval.
/// Returns the integral and an error estimate.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> (f64, f64) {
    let mut stack = vec![(a, b, kronrod15(&f, a, b))];
    let mut total = 0.0;
    let mut err = 0.0;
    let mut done = Vec::new();
    let mut evals = 0usize;
    while let Some((lo, hi, (val, e))) = stack.pop() {
        let global = stack.iter().map(|s| s.2 .0).sum::<f64>() + done.iter().sum::<f64>() + val;
        let tol = abs_tol.max(rel_tol * global.abs());
        let width = (hi - lo) / (b - a);
        if e <= tol * width.max(1e-3) || evals > 20_000 || (hi - lo).abs() < 1e-14 * (b - a).abs() {
            total += val;
            err += e;
            done.push(val);
            continue;
        }
        let mid = 0.5 * (lo + hi);
        stack.push((lo, mid, kronrod15(&f, lo, mid)));
        stack.push((mid, hi, kronrod15(&f, mid, hi)));
        evals += 2;
    }
    (total, err)
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Trapezoid weights for an arbitrary increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Brent's method on a sign-changing bracket.
pub fn brent<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, xtol: f64, max_iter: usize) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::solver("root not bracketed", 0, fa.abs().min(fb.abs())));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for it in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (p, q) = if a == c {
                (2.0 * m * s, 1.0 - s)
            } else {
                let q = fa / fc;
                let r = fb / fc;
                (
                    s * (2.0 * m * q * (q - r) - (b - a) * (r - 1.0)),
                    (q - 1.0) * (r - 1.0) * (s - 1.0),
                )
            };
            let (p, q) = if p > 0.0 { (p, -q) } else { (-p, q) };
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
        if it + 1 == max_iter {
            return Err(Error::solver("Brent iteration limit", max_iter, fb.abs()));
        }
    }
    Err(Error::solver("Brent iteration limit", max_iter, fb.abs()))
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Solves `a x = b`, falling back to a ridge-regularized least-squares solve
/// when `a` is ill-conditioned. The flag reports whether the ridge was used.
pub fn solve_with_ridge(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond_min: f64) -> Result<(DMatrix<f64>, bool)> {
    let n = a.nrows();
    if let Some(lu) = a.clone().lu().try_inverse() {
        let rc = reciprocal_condition(a, &lu);
        if rc > rcond_min {
            return Ok((lu * b, false));
        }
    }
    let at = a.transpose();
    let ata = &at * a;
    let ridge = 1e-10 * ata.trace().abs().max(f64::MIN_POSITIVE) / n as f64;
    let lhs = ata + DMatrix::identity(n, n) * ridge;
    let rhs = &at * b;
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Conditioning("matrix singular beyond ridge rescue".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning("matrix singular beyond ridge rescue".into()));
    }
    Ok((sol, true))
}

/// Reciprocal condition number in the 1-norm given a matrix and its inverse.
pub fn reciprocal_condition(a: &DMatrix<f64>, inv: &DMatrix<f64>) -> f64 {
    let norm1 = |m: &DMatrix<f64>| {
        (0..m.ncols())
            .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    1.0 / (norm1(a) * norm1(inv))
}

/// Symmetrizes a covariance matrix and checks it is positive semi-definite.
pub fn symmetrize_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let s = (m + m.transpose()) * 0.5;
    let scale = s.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let eig = s.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol * scale {
        return Err(Error::Conditioning(format!(
            "covariance not positive semi-definite (min eigenvalue {min:.3e})"
        )));
    }
    Ok(s)
}
