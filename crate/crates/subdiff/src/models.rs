//! Model specifications: subordinators, diffusions, their combination, the
//! stationary density and the scale-rescaling map.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma};

use crate::error::{Error, Result};
use crate::numerics::integrate;

/// Parameter of a subordinator that can be estimated or perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubParam {
    Gamma,
    C,
    P,
    Eta,
    Mu,
    V,
}

impl SubParam {
    pub fn name(self) -> &'static str {
        match self {
            SubParam::Gamma => "gamma",
            SubParam::C => "c",
            SubParam::P => "p",
            SubParam::Eta => "eta",
            SubParam::Mu => "mu",
            SubParam::V => "v",
        }
    }
}

/// Levy subordinator with drift `gamma`.
///
/// `TemperedStable` has Levy density `c s^(-p-1) exp(-eta s)`; `c = 0` is the
/// deterministic clock `T_t = gamma t`. `InverseGaussian` is parameterized by
/// the mean rate `mu` and variance rate `v` of its jump part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Subordinator {
    TemperedStable {
        c: f64,
        p: f64,
        eta: f64,
        #[serde(default)]
        gamma: f64,
    },
    InverseGaussian {
        mu: f64,
        v: f64,
        #[serde(default)]
        gamma: f64,
    },
}

impl Subordinator {
    pub fn inverse_gaussian(mu: f64, v: f64) -> Self {
        Subordinator::InverseGaussian { mu, v, gamma: 0.0 }
    }

    pub fn deterministic(gamma: f64) -> Self {
        Subordinator::TemperedStable {
            c: 0.0,
            p: 0.5,
            eta: 1.0,
            gamma,
        }
    }

    pub fn gamma(&self) -> f64 {
        match *self {
            Subordinator::TemperedStable { gamma, .. } | Subordinator::InverseGaussian { gamma, .. } => gamma,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(*self, Subordinator::TemperedStable { c, .. } if c == 0.0)
    }

    /// Parameters estimated by default in the second step.
    pub fn default_free_params(&self) -> Vec<SubParam> {
        match self {
            Subordinator::InverseGaussian { .. } => vec![SubParam::Mu, SubParam::V],
            s if s.is_deterministic() => vec![SubParam::Gamma],
            _ => vec![SubParam::C, SubParam::Eta],
        }
    }

    /// Equivalent tempered-stable form (identity for tempered stable).
    pub fn to_tempered_stable(&self) -> Subordinator {
        match *self {
            Subordinator::InverseGaussian { mu, v, gamma } => Subordinator::TemperedStable {
                c: mu.powf(1.5) / (2.0 * std::f64::consts::PI * v).sqrt(),
                p: 0.5,
                eta: mu / (2.0 * v),
                gamma,
            },
            ts => ts,
        }
    }

    /// `-c Gamma(-p)`, the positive scale of the tempered-stable exponent.
    fn ts_scale(c: f64, p: f64) -> f64 {
        -c * gamma(-p)
    }

    /// Laplace exponent `phi(lambda)` with `E exp(-lambda T_t) = exp(-t phi(lambda))`.
    pub fn laplace_exponent(&self, lambda: f64) -> f64 {
        match *self {
            Subordinator::TemperedStable { c, p, eta, gamma } => {
                if c == 0.0 {
                    return gamma * lambda;
                }
                // (lambda+eta)^p - eta^p without cancellation at small lambda
                let jump = eta.powf(p) * (p * (lambda / eta).ln_1p()).exp_m1();
                gamma * lambda + Self::ts_scale(c, p) * jump
            }
            Subordinator::InverseGaussian { mu, v, gamma } => {
                let s = (1.0 + 2.0 * v * lambda / mu).sqrt();
                gamma * lambda + 2.0 * mu * lambda / (s + 1.0)
            }
        }
    }

    /// First derivative of the Laplace exponent in `lambda`.
    pub fn laplace_exponent_derivative(&self, lambda: f64) -> f64 {
        match *self {
            Subordinator::TemperedStable { c, p, eta, gamma } => {
                if c == 0.0 {
                    gamma
                } else {
                    gamma + Self::ts_scale(c, p) * p * (lambda + eta).powf(p - 1.0)
                }
            }
            Subordinator::InverseGaussian { mu, v, gamma } => gamma + mu / (1.0 + 2.0 * v * lambda / mu).sqrt(),
        }
    }

    /// Partial derivative of the Laplace exponent in one parameter.
    pub fn laplace_exponent_partial(&self, lambda: f64, param: SubParam) -> Result<f64> {
        match (*self, param) {
            (_, SubParam::Gamma) => Ok(lambda),
            (Subordinator::InverseGaussian { mu, v, .. }, SubParam::Mu) => {
                let s = (1.0 + 2.0 * v * lambda / mu).sqrt();
                let sm1 = (2.0 * v * lambda / mu) / (s + 1.0);
                Ok(2.0 * mu / v * sm1 - lambda / s)
            }
            (Subordinator::InverseGaussian { mu, v, .. }, SubParam::V) => {
                let s = (1.0 + 2.0 * v * lambda / mu).sqrt();
                let sm1 = (2.0 * v * lambda / mu) / (s + 1.0);
                Ok(-mu * mu / (v * v) * sm1 + mu * lambda / (v * s))
            }
            (Subordinator::TemperedStable { p, eta, .. }, SubParam::C) => {
                Ok(-gamma(-p) * eta.powf(p) * (p * (lambda / eta).ln_1p()).exp_m1())
            }
            (Subordinator::TemperedStable { c, p, eta, .. }, SubParam::Eta) => {
                Ok(Self::ts_scale(c, p) * p * ((lambda + eta).powf(p - 1.0) - eta.powf(p - 1.0)))
            }
            (Subordinator::TemperedStable { c, p, eta, .. }, SubParam::P) => {
                let a = eta.powf(p) * (p * (lambda / eta).ln_1p()).exp_m1();
                let b = (lambda + eta).powf(p) * (lambda + eta).ln() - eta.powf(p) * eta.ln();
                Ok(c * gamma(-p) * digamma(-p) * a - c * gamma(-p) * b)
            }
            (s, p) => Err(Error::Domain(format!(
                "parameter {} does not belong to {}",
                p.name(),
                s.family_name()
            ))),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Subordinator::TemperedStable { .. } => "tempered_stable",
            Subordinator::InverseGaussian { .. } => "inverse_gaussian",
        }
    }

    pub fn get(&self, param: SubParam) -> Result<f64> {
        match (*self, param) {
            (_, SubParam::Gamma) => Ok(self.gamma()),
            (Subordinator::TemperedStable { c, .. }, SubParam::C) => Ok(c),
            (Subordinator::TemperedStable { p, .. }, SubParam::P) => Ok(p),
            (Subordinator::TemperedStable { eta, .. }, SubParam::Eta) => Ok(eta),
            (Subordinator::InverseGaussian { mu, .. }, SubParam::Mu) => Ok(mu),
            (Subordinator::InverseGaussian { v, .. }, SubParam::V) => Ok(v),
            (s, p) => Err(Error::Domain(format!(
                "parameter {} does not belong to {}",
                p.name(),
                s.family_name()
            ))),
        }
    }

    pub fn with(&self, param: SubParam, value: f64) -> Result<Subordinator> {
        let mut out = *self;
        match (&mut out, param) {
            (Subordinator::TemperedStable { gamma, .. }, SubParam::Gamma)
            | (Subordinator::InverseGaussian { gamma, .. }, SubParam::Gamma) => *gamma = value,
            (Subordinator::TemperedStable { c, .. }, SubParam::C) => *c = value,
            (Subordinator::TemperedStable { p, .. }, SubParam::P) => *p = value,
            (Subordinator::TemperedStable { eta, .. }, SubParam::Eta) => *eta = value,
            (Subordinator::InverseGaussian { mu, .. }, SubParam::Mu) => *mu = value,
            (Subordinator::InverseGaussian { v, .. }, SubParam::V) => *v = value,
            (s, p) => {
                return Err(Error::Domain(format!(
                    "parameter {} does not belong to {}",
                    p.name(),
                    s.family_name()
                )))
            }
        }
        Ok(out)
    }

    pub fn with_values(&self, params: &[SubParam], values: &[f64]) -> Result<Subordinator> {
        params.iter().zip(values).try_fold(*self, |s, (p, v)| s.with(*p, *v))
    }

    /// Tail transform of the Levy measure, `(phi(lambda) - gamma lambda) / lambda`.
    pub fn tail_transform(&self, lambda: f64) -> Result<f64> {
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(Error::Domain(format!("tail transform needs lambda > 0, got {lambda}")));
        }
        match self.to_tempered_stable() {
            Subordinator::TemperedStable { c, p, eta, .. } => {
                if c == 0.0 {
                    return Ok(0.0);
                }
                let jump = eta.powf(p) * (p * (lambda / eta).ln_1p()).exp_m1();
                Ok(Self::ts_scale(c, p) * jump / lambda)
            }
            Subordinator::InverseGaussian { .. } => unreachable!(),
        }
    }

    /// Subordinator of the rescaled model: time runs `c` times slower, so that
    /// pairing it with the diffusion sped up by `c` leaves the law unchanged.
    pub fn rescale(&self, c_factor: f64) -> Subordinator {
        match *self {
            Subordinator::TemperedStable { c, p, eta, gamma } => Subordinator::TemperedStable {
                c: c / c_factor.powf(p),
                p,
                eta: eta * c_factor,
                gamma: gamma / c_factor,
            },
            Subordinator::InverseGaussian { mu, v, gamma } => Subordinator::InverseGaussian {
                mu: mu / c_factor,
                v: v / (c_factor * c_factor),
                gamma: gamma / c_factor,
            },
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let finite = |x: f64| x.is_finite();
        match *self {
            Subordinator::TemperedStable { c, p, eta, gamma } => {
                if !(finite(c) && c >= 0.0) {
                    v.push("C>=0 (C=0 means a deterministic clock)".into());
                }
                if !(finite(p) && p > 0.0 && p < 1.0) {
                    v.push("0<p<1".into());
                }
                if !(finite(eta) && eta > 0.0) {
                    v.push("eta>0".into());
                }
                if !(finite(gamma) && gamma >= 0.0) {
                    v.push("gamma>=0".into());
                }
                if c == 0.0 && gamma <= 0.0 {
                    v.push("deterministic clock needs gamma>0".into());
                }
            }
            Subordinator::InverseGaussian { mu, v: var, gamma } => {
                if !(finite(mu) && mu > 0.0) {
                    v.push("mu>0".into());
                }
                if !(finite(var) && var > 0.0) {
                    v.push("v>0".into());
                }
                if !(finite(gamma) && gamma >= 0.0) {
                    v.push("gamma>=0".into());
                }
            }
        }
        v
    }
}

/// Ergodic scalar diffusion `dX = mu(X) dt + sigma(X) dW`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Diffusion {
    /// `dX = kappa (theta - X) dt + sigma dW`.
    Ou { kappa: f64, theta: f64, sigma: f64 },
    /// `dX = sum_i c_i X^i dt + sigma X^beta dW` on `(0, inf)`.
    PolyDriftCev { coeffs: Vec<f64>, beta: f64, sigma: f64 },
}

impl Diffusion {
    pub fn ou(kappa: f64, theta: f64, sigma: f64) -> Self {
        Diffusion::Ou { kappa, theta, sigma }
    }

    /// State interval `(l, r)`.
    pub fn interval(&self) -> (f64, f64) {
        match self {
            Diffusion::Ou { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Diffusion::PolyDriftCev { .. } => (0.0, f64::INFINITY),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let (l, r) = self.interval();
        x > l && x < r
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            Diffusion::Ou { sigma, .. } | Diffusion::PolyDriftCev { sigma, .. } => sigma,
        }
    }

    pub fn drift(&self, x: f64) -> f64 {
        match self {
            Diffusion::Ou { kappa, theta, .. } => kappa * (theta - x),
            Diffusion::PolyDriftCev { coeffs, .. } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
        }
    }

    pub fn drift_dx(&self, x: f64) -> f64 {
        match self {
            Diffusion::Ou { kappa, .. } => -kappa,
            Diffusion::PolyDriftCev { coeffs, .. } => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (i, c)| acc * x + i as f64 * c),
        }
    }

    /// Volatility `sigma(x)` and its first two derivatives.
    pub fn vol(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            Diffusion::Ou { sigma, .. } => (sigma, 0.0, 0.0),
            Diffusion::PolyDriftCev { beta, sigma, .. } => {
                let v = sigma * x.powf(beta);
                (v, beta * v / x, beta * (beta - 1.0) * v / (x * x))
            }
        }
    }

    /// Natural-scale coordinate `s(x) = int dx / sigma(x)`.
    pub fn liouville(&self, x: f64) -> f64 {
        match *self {
            Diffusion::Ou { sigma, .. } => x / sigma,
            Diffusion::PolyDriftCev { beta, sigma, .. } => {
                if (beta - 1.0).abs() < 1e-12 {
                    x.ln() / sigma
                } else {
                    x.powf(1.0 - beta) / (sigma * (1.0 - beta))
                }
            }
        }
    }

    pub fn liouville_inverse(&self, s: f64) -> f64 {
        match *self {
            Diffusion::Ou { sigma, .. } => s * sigma,
            Diffusion::PolyDriftCev { beta, sigma, .. } => {
                if (beta - 1.0).abs() < 1e-12 {
                    (s * sigma).exp()
                } else {
                    (s * sigma * (1.0 - beta)).powf(1.0 / (1.0 - beta))
                }
            }
        }
    }

    /// Log speed density up to an additive constant.
    pub fn log_speed(&self, x: f64) -> f64 {
        match self {
            Diffusion::Ou { kappa, theta, sigma } => -kappa * (x - theta).powi(2) / (sigma * sigma),
            Diffusion::PolyDriftCev { coeffs, beta, sigma } => {
                let s2 = sigma * sigma;
                let lx = x.ln();
                let mut acc = -2.0 * beta * lx;
                for (i, c) in coeffs.iter().enumerate() {
                    let e = i as f64 + 1.0 - 2.0 * beta;
                    acc += if e.abs() < 1e-12 {
                        2.0 * c * lx / s2
                    } else {
                        2.0 * c * (e * lx).exp() / (s2 * e)
                    };
                }
                acc
            }
        }
    }

    /// Same law on a clock running `c` times faster: drift and squared
    /// volatility are multiplied by `c`.
    pub fn rescale(&self, c: f64) -> Diffusion {
        match self {
            Diffusion::Ou { kappa, theta, sigma } => Diffusion::Ou {
                kappa: kappa * c,
                theta: *theta,
                sigma: sigma * c.sqrt(),
            },
            Diffusion::PolyDriftCev { coeffs, beta, sigma } => Diffusion::PolyDriftCev {
                coeffs: coeffs.iter().map(|x| x * c).collect(),
                beta: *beta,
                sigma: sigma * c.sqrt(),
            },
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            Diffusion::Ou { kappa, theta, sigma } => {
                if !(kappa.is_finite() && *kappa > 0.0) {
                    v.push("kappa>0".into());
                }
                if !theta.is_finite() {
                    v.push("theta finite".into());
                }
                if !(sigma.is_finite() && *sigma > 0.0) {
                    v.push("sigma>0".into());
                }
            }
            Diffusion::PolyDriftCev { coeffs, beta, sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    v.push("sigma>0".into());
                }
                if coeffs.len() < 2 || coeffs.iter().any(|c| !c.is_finite()) {
                    v.push("polynomial drift needs finite c_0..c_k with k>=1".into());
                    return v;
                }
                let k = coeffs.len() - 1;
                let (c0, ck) = (coeffs[0], coeffs[k]);
                let half_s2 = 0.5 * sigma * sigma;
                if !(beta.is_finite() && *beta > 0.0) {
                    v.push("beta>0".into());
                    return v;
                }
                if (beta - 1.0).abs() < 1e-12 {
                    if k < 2 {
                        v.push("beta=1 requires k>=2".into());
                    }
                    if c0 <= 0.0 {
                        v.push("c_0>0".into());
                    }
                    if ck >= 0.0 {
                        v.push("c_k<0 when beta=1".into());
                    }
                    return v;
                }
                if *beta < 0.5 {
                    v.push("beta>=1/2".into());
                    return v;
                }
                if (beta - 0.5).abs() < 1e-12 {
                    if c0 <= half_s2 {
                        v.push("c_0>sigma^2/2 when beta=1/2".into());
                    }
                } else if c0 <= 0.0 {
                    v.push("c_0>0".into());
                }
                let twob = 2.0 * beta;
                let kp1 = k as f64 + 1.0;
                if (twob - kp1).abs() < 1e-12 {
                    if ck >= half_s2 {
                        v.push("c_k<sigma^2/2 when 2beta=k+1".into());
                    }
                } else if twob < kp1 && ck >= 0.0 {
                    v.push("c_k<0 when 2beta<k+1".into());
                }
            }
        }
        v
    }

    /// Names of the diffusion parameters in vector order.
    pub fn param_names(&self) -> Vec<String> {
        match self {
            Diffusion::Ou { .. } => vec!["kappa".into(), "theta".into(), "sigma".into()],
            Diffusion::PolyDriftCev { coeffs, .. } => {
                let mut n: Vec<String> = (0..coeffs.len()).map(|i| format!("c{i}")).collect();
                n.push("beta".into());
                n.push("sigma".into());
                n
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Diffusion::Ou { kappa, theta, sigma } => vec![*kappa, *theta, *sigma],
            Diffusion::PolyDriftCev { coeffs, beta, sigma } => {
                let mut v = coeffs.clone();
                v.push(*beta);
                v.push(*sigma);
                v
            }
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Diffusion> {
        let n = self.params().len();
        if p.len() != n {
            return Err(Error::Domain(format!("expected {n} diffusion parameters, got {}", p.len())));
        }
        Ok(match self {
            Diffusion::Ou { .. } => Diffusion::Ou {
                kappa: p[0],
                theta: p[1],
                sigma: p[2],
            },
            Diffusion::PolyDriftCev { coeffs, .. } => Diffusion::PolyDriftCev {
                coeffs: p[..coeffs.len()].to_vec(),
                beta: p[n - 2],
                sigma: p[n - 1],
            },
        })
    }
}

/// The parameter held fixed to remove the time-scale indeterminacy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePin {
    /// Diffusion volatility `sigma` is fixed at its configured value.
    #[default]
    Sigma,
    /// OU mean-reversion speed `kappa` is fixed at its configured value.
    Kappa,
}

/// A diffusion time-changed by an independent subordinator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubDiffModel {
    pub diffusion: Diffusion,
    pub subordinator: Subordinator,
    #[serde(default)]
    pub fixed_scale: ScalePin,
}

impl SubDiffModel {
    pub fn new(diffusion: Diffusion, subordinator: Subordinator) -> Self {
        SubDiffModel {
            diffusion,
            subordinator,
            fixed_scale: ScalePin::Sigma,
        }
    }

    /// Returns every violated constraint; an empty list means the model is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut v = self.diffusion.violations();
        v.extend(self.subordinator.violations());
        if self.fixed_scale == ScalePin::Kappa && !matches!(self.diffusion, Diffusion::Ou { .. }) {
            v.push("fixed_scale=kappa only applies to OU".into());
        }
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(v))
        }
    }

    /// Equivalent model with the diffusion sped up by `c` and the clock slowed by `c`.
    pub fn rescale(&self, c: f64) -> Result<SubDiffModel> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Domain(format!("rescale factor must be positive, got {c}")));
        }
        Ok(SubDiffModel {
            diffusion: self.diffusion.rescale(c),
            subordinator: self.subordinator.rescale(c),
            fixed_scale: self.fixed_scale,
        })
    }
}

/// Normalized stationary density of a diffusion.
#[derive(Clone, Debug)]
pub struct StationaryDensity {
    diffusion: Diffusion,
    log_norm: f64,
    support: (f64, f64),
    mean: f64,
    sd: f64,
}

const SUPPORT_CUTOFF: f64 = 36.841_361_487_904_734; // ln(1e16)

impl StationaryDensity {
    pub fn new(diffusion: &Diffusion) -> Result<Self> {
        let v = diffusion.violations();
        if !v.is_empty() {
            return Err(Error::InvalidModel(v));
        }
        match *diffusion {
            Diffusion::Ou { kappa, theta, sigma } => {
                let sd = sigma / (2.0 * kappa).sqrt();
                let half = (2.0 * SUPPORT_CUTOFF).sqrt() * sd;
                Ok(StationaryDensity {
                    diffusion: diffusion.clone(),
                    log_norm: (sigma * (std::f64::consts::PI / kappa).sqrt()).ln(),
                    support: (theta - half, theta + half),
                    mean: theta,
                    sd,
                })
            }
            Diffusion::PolyDriftCev { .. } => Self::numeric(diffusion),
        }
    }

    fn numeric(diffusion: &Diffusion) -> Result<Self> {
        // locate the mode on a logarithmic scan, then walk out to the cutoff
        let lm = |x: f64| diffusion.log_speed(x);
        let mut best = (f64::NEG_INFINITY, 1.0);
        for i in 0..=4000 {
            let x = 10f64.powf(-8.0 + 16.0 * i as f64 / 4000.0);
            let v = lm(x);
            if v.is_finite() && v > best.0 {
                best = (v, x);
            }
        }
        let (peak, mode) = best;
        if !peak.is_finite() {
            return Err(Error::Domain("speed density has no finite mode".into()));
        }
        let find_edge = |dir: f64| -> Result<f64> {
            let mut x = mode;
            for _ in 0..20_000 {
                let nx = x * (1.0 + 0.01 * dir).max(0.5);
                if lm(nx) < peak - SUPPORT_CUTOFF || nx <= 0.0 {
                    // refine the crossing inside [x, nx]
                    let (mut a, mut b) = if dir < 0.0 { (nx, x) } else { (x, nx) };
                    for _ in 0..100 {
                        let m = 0.5 * (a + b);
                        let inside = lm(m) >= peak - SUPPORT_CUTOFF;
                        if (dir < 0.0) == inside {
                            b = m;
                        } else {
                            a = m;
                        }
                    }
                    return Ok(if dir < 0.0 { a } else { b });
                }
                x = nx;
            }
            Err(Error::Domain("stationary density does not decay; normalization fails".into()))
        };
        let lo = find_edge(-1.0)?;
        let hi = find_edge(1.0)?;
        // integrate piecewise so the adaptive rule sees the peak
        let pieces = 64;
        let edges: Vec<f64> = (0..=pieces)
            .map(|i| lo * (hi / lo).powf(i as f64 / pieces as f64))
            .collect();
        let mut z = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for w in edges.windows(2) {
            let f = |x: f64| (lm(x) - peak).exp();
            z += integrate(f, w[0], w[1], 1e-300, 1e-13).0;
            m1 += integrate(|x| x * f(x), w[0], w[1], 1e-300, 1e-13).0;
            m2 += integrate(|x| x * x * f(x), w[0], w[1], 1e-300, 1e-13).0;
        }
        let mean = m1 / z;
        let var = (m2 / z - mean * mean).max(0.0);
        Ok(StationaryDensity {
            diffusion: diffusion.clone(),
            log_norm: peak + z.ln(),
            support: (lo, hi),
            mean,
            sd: var.sqrt(),
        })
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    /// Region where the density exceeds `1e-16` times its peak.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !self.diffusion.contains(x) {
            return f64::NEG_INFINITY;
        }
        self.diffusion.log_speed(x) - self.log_norm
    }

    /// Density value; zero outside the state interval.
    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// Density value with a domain check.
    pub fn density(&self, x: f64) -> Result<f64> {
        if !self.diffusion.contains(x) {
            return Err(Error::Domain(format!("state {x} outside the state interval")));
        }
        Ok(self.pdf(x))
    }
}

/// Stationary density of `diff` at `x`.
pub fn stationary_density(diff: &Diffusion, x: f64) -> Result<f64> {
    StationaryDensity::new(diff)?.density(x)
}
