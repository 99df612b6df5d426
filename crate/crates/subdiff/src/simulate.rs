//! Exact-clock simulation of subordinate diffusions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, InverseGaussian, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::models::{Diffusion, StationaryDensity, SubDiffModel, Subordinator};

/// Where a series came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Simulated { seed: Option<u64>, stream: Option<u64> },
    Ingested { source: String },
}

/// Equally spaced observations `y_0, ..., y_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedSeries {
    pub delta: f64,
    pub values: Vec<f64>,
    pub origin: Origin,
}

impl ObservedSeries {
    pub fn new(delta: f64, values: Vec<f64>, origin: Origin) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::Domain(format!("sampling interval must be positive, got {delta}")));
        }
        if values.len() < 2 {
            return Err(Error::DegenerateData("a series needs at least two observations".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite observation at index {i}")));
        }
        Ok(ObservedSeries { delta, values, origin })
    }

    /// Number of transitions.
    pub fn transitions(&self) -> usize {
        self.values.len() - 1
    }

    /// Checks every value lies in the state interval of `diff`.
    pub fn check_domain(&self, diff: &Diffusion) -> Result<()> {
        match self.values.iter().position(|&v| !diff.contains(v)) {
            Some(i) => Err(Error::Domain(format!(
                "observation {i} = {} outside the state interval",
                self.values[i]
            ))),
            None => Ok(()),
        }
    }

    /// `(t, y)` rows with `t = i * delta`.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().enumerate().map(move |(i, &y)| (i as f64 * self.delta, y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    /// Euler substep in operational time for diffusions without exact transitions.
    pub h_sim: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { h_sim: 0.01 }
    }
}

/// Random stream for replication `stream` under a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One draw of the operational-time increment `T_delta`.
pub fn sample_increment<R: Rng + ?Sized>(sub: &Subordinator, delta: f64, rng: &mut R) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {delta}")));
    }
    if sub.is_deterministic() {
        return Ok(sub.gamma() * delta);
    }
    match *sub {
        Subordinator::InverseGaussian { mu, v, gamma } => {
            let mean = mu * delta;
            let shape = mu * mu * mu * delta * delta / v;
            let ig = InverseGaussian::new(mean, shape)
                .map_err(|e| Error::Simulation(format!("inverse Gaussian sampler: {e}")))?;
            Ok(gamma * delta + ig.sample(rng))
        }
        Subordinator::TemperedStable { p, .. } if (p - 0.5).abs() < 1e-14 => {
            sample_increment(&to_inverse_gaussian(sub), delta, rng)
        }
        Subordinator::TemperedStable { .. } => Err(Error::Capability(
            "exact sampling is only available for inverse Gaussian and deterministic clocks".into(),
        )),
    }
}

pub(crate) fn to_inverse_gaussian(sub: &Subordinator) -> Subordinator {
    match *sub {
        Subordinator::TemperedStable { c, eta, gamma, .. } => {
            // C = mu^{3/2} / sqrt(2 pi v), eta = mu / (2 v)
            let mu = c * (2.0 * std::f64::consts::PI / (2.0 * eta)).sqrt();
            let v = mu / (2.0 * eta);
            Subordinator::InverseGaussian { mu, v, gamma }
        }
        other => other,
    }
}

/// Inverse-CDF sampler for the stationary density.
pub struct StationarySampler {
    exact_normal: Option<(f64, f64)>,
    nodes: Vec<f64>,
    cdf: Vec<f64>,
}

impl StationarySampler {
    pub fn new(diff: &Diffusion) -> Result<Self> {
        if let Diffusion::Ou { kappa, theta, sigma } = *diff {
            return Ok(StationarySampler {
                exact_normal: Some((theta, sigma / (2.0 * kappa).sqrt())),
                nodes: Vec::new(),
                cdf: Vec::new(),
            });
        }
        let q = StationaryDensity::new(diff)?;
        let (lo, hi) = q.support();
        let cells = 20_000;
        let h = (hi - lo) / cells as f64;
        let nodes: Vec<f64> = (0..=cells).map(|i| lo + i as f64 * h).collect();
        let mut cdf = vec![0.0; nodes.len()];
        for i in 1..nodes.len() {
            cdf[i] = cdf[i - 1] + 0.5 * h * (q.pdf(nodes[i - 1]) + q.pdf(nodes[i]));
        }
        let total = *cdf.last().unwrap();
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(StationarySampler { exact_normal: None, nodes, cdf })
    }

    pub fn quantile(&self, u: f64) -> f64 {
        if let Some((m, s)) = self.exact_normal {
            let z = statrs::function::erf::erfc_inv(2.0 * u) * -std::f64::consts::SQRT_2;
            return m + s * z;
        }
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.nodes[k - 1] + t * (self.nodes[k] - self.nodes[k - 1])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if let Some((m, s)) = self.exact_normal {
            let z: f64 = StandardNormal.sample(rng);
            return m + s * z;
        }
        let u: f64 = rng.random();
        self.quantile(u.clamp(1e-300, 1.0 - 1e-16))
    }
}

/// Advances the diffusion over operational time `tau`.
fn diffuse<R: Rng + ?Sized>(diff: &Diffusion, x: f64, tau: f64, h_sim: f64, rng: &mut R) -> Result<f64> {
    if tau <= 0.0 {
        return Ok(x);
    }
    match *diff {
        Diffusion::Ou { kappa, theta, sigma } => {
            let e = (-kappa * tau).exp();
            let var = sigma * sigma * (-(-2.0 * kappa * tau).exp_m1()) / (2.0 * kappa);
            let z: f64 = StandardNormal.sample(rng);
            Ok(theta + (x - theta) * e + var.sqrt() * z)
        }
        Diffusion::PolyDriftCev { .. } => {
            let steps = (tau / h_sim).ceil().max(1.0) as usize;
            let h = tau / steps as f64;
            let sh = h.sqrt();
            let (lo, hi) = diff.interval();
            let mut y = x;
            for _ in 0..steps {
                let z: f64 = StandardNormal.sample(rng);
                let mut next = y + diff.drift(y) * h + diff.vol(y).0 * sh * z;
                if next <= lo {
                    next = 2.0 * lo - next;
                }
                if next >= hi {
                    next = 2.0 * hi - next;
                }
                if !(next.is_finite() && next > lo && next < hi) {
                    return Err(Error::Simulation(format!("state escaped the state interval from {y}")));
                }
                y = next;
            }
            Ok(y)
        }
    }
}

/// Simulates `n` transitions at spacing `delta`. Without `x0` the start is
/// drawn from the stationary density.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &SubDiffModel,
    n: usize,
    delta: f64,
    x0: Option<f64>,
    opts: &SimOptions,
    rng: &mut R,
) -> Result<ObservedSeries> {
    model.ensure_valid()?;
    if n == 0 {
        return Err(Error::Domain("need at least one transition".into()));
    }
    if !(opts.h_sim > 0.0) {
        return Err(Error::Domain("h_sim must be positive".into()));
    }
    let diff = &model.diffusion;
    let start = match x0 {
        Some(x) if diff.contains(x) => x,
        Some(x) => return Err(Error::Domain(format!("initial state {x} outside the state interval"))),
        None => StationarySampler::new(diff)?.sample(rng),
    };
    let mut values = Vec::with_capacity(n + 1);
    values.push(start);
    let mut x = start;
    for _ in 0..n {
        let tau = sample_increment(&model.subordinator, delta, rng)?;
        x = diffuse(diff, x, tau, opts.h_sim, rng)?;
        values.push(x);
    }
    ObservedSeries::new(delta, values, Origin::Simulated { seed: None, stream: None })
}

/// Simulation on the random stream `(seed, stream)`; bit-identical for equal inputs.
pub fn simulate_seeded(
    model: &SubDiffModel,
    n: usize,
    delta: f64,
    x0: Option<f64>,
    opts: &SimOptions,
    seed: u64,
    stream: u64,
) -> Result<ObservedSeries> {
    let mut rng = stream_rng(seed, stream);
    let mut s = simulate_path(model, n, delta, x0, opts, &mut rng)?;
    s.origin = Origin::Simulated { seed: Some(seed), stream: Some(stream) };
    Ok(s)
}

/// Independent replications, replication `r` on stream `r`.
pub fn simulate_replications(
    model: &SubDiffModel,
    n: usize,
    delta: f64,
    reps: usize,
    opts: &SimOptions,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ObservedSeries>> {
    exec::map(exec, reps, |r| simulate_seeded(model, n, delta, None, opts, seed, r as u64))
        .into_iter()
        .collect()
}
