//! Goodness of fit through the probability integral transform
//! `u_i = F(y_i | y_{i-1})` and uniformity tests on the result.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimation::build_eigensystem;
use crate::estimation::mle::MixtureKernel;
use crate::estimation::EigenMode;
use crate::exec::{self, Execution};
use crate::models::{Diffusion, SubDiffModel, Subordinator};
use crate::simulate::ObservedSeries;
use crate::spectral::{SlOptions, SubordinateEigenSystem};

const CHUNK: usize = 256;

/// How the transition distribution function is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitMethod {
    /// Gaussian mixture over the clock law when the model is OU with an
    /// inverse Gaussian clock, spectral series otherwise.
    #[default]
    Auto,
    Spectral,
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitOptions {
    pub method: PitMethod,
    /// Absolute accuracy of each spectral CDF value.
    pub abstol: f64,
    /// Eigenpairs solved for non-OU models.
    pub pairs: usize,
    pub sl: SlOptions,
}

impl Default for PitOptions {
    fn default() -> Self {
        PitOptions {
            method: PitMethod::Auto,
            abstol: 1e-8,
            pairs: 64,
            sl: SlOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PitSeries {
    pub u: Vec<f64>,
    pub method: PitMethod,
    /// Largest truncation bound reported by the spectral series.
    pub max_tail: f64,
    /// Values clamped back into `[0, 1]`.
    pub clamped: usize,
}

fn mixture_available(diff: &Diffusion, sub: &Subordinator) -> bool {
    matches!(diff, Diffusion::Ou { .. })
        && match *sub {
            Subordinator::InverseGaussian { .. } => true,
            Subordinator::TemperedStable { c, p, .. } => c > 0.0 && (p - 0.5).abs() < 1e-14,
        }
}

/// PIT values of consecutive observations under `model`.
pub fn pit(data: &ObservedSeries, model: &SubDiffModel, opts: &PitOptions, exec: Execution) -> Result<PitSeries> {
    model.ensure_valid()?;
    data.check_domain(&model.diffusion)?;
    let n = data.transitions();
    let y = &data.values;
    let use_mixture = match opts.method {
        PitMethod::Auto => mixture_available(&model.diffusion, &model.subordinator),
        PitMethod::Mixture => true,
        PitMethod::Spectral => false,
    };
    if use_mixture {
        let kern = MixtureKernel::new(&model.diffusion, &model.subordinator, data.delta)?;
        let u = exec::map_chunks(exec, n, CHUNK, |r| r.map(|i| kern.cdf(y[i], y[i + 1])).collect::<Vec<_>>())
            .into_iter()
            .flatten()
            .collect();
        return Ok(PitSeries {
            u,
            method: PitMethod::Mixture,
            max_tail: 0.0,
            clamped: 0,
        });
    }
    let eig = build_eigensystem(&model.diffusion, opts.pairs.div_ceil(2), EigenMode::Auto, &opts.sl)?;
    let se = SubordinateEigenSystem::new(&eig, model.subordinator, data.delta)?;
    let parts = exec::map_chunks(exec, n, CHUNK, |r| -> Result<Vec<_>> {
        r.map(|i| se.transition_cdf(data.delta, y[i], y[i + 1], opts.abstol)).collect()
    });
    let mut u = Vec::with_capacity(n);
    let mut max_tail = 0.0f64;
    let mut clamped = 0;
    for part in parts {
        for v in part? {
            max_tail = max_tail.max(v.tail);
            clamped += v.clamped as usize;
            u.push(v.value);
        }
    }
    Ok(PitSeries {
        u,
        method: PitMethod::Spectral,
        max_tail,
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KsResult {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Limiting Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // theta-function form, fast for small arguments
        let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * lambda * lambda);
        let s: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * c).exp()
            })
            .sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let kf = k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * kf * kf * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

fn check_unit(u: &[f64]) -> Result<()> {
    if u.is_empty() {
        return Err(Error::Precondition("need at least one PIT value".into()));
    }
    if let Some(bad) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("PIT value {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Two-sided Kolmogorov-Smirnov test against Uniform(0, 1) with the
/// asymptotic p-value.
pub fn ks_test(u: &[f64]) -> Result<KsResult> {
    check_unit(u)?;
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0f64, f64::max);
    Ok(KsResult {
        n: s.len(),
        statistic: d,
        p_value: kolmogorov_survival(n.sqrt() * d),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Chi2Result {
    pub bins: usize,
    pub dof: usize,
    pub statistic: f64,
    pub p_value: f64,
    /// Some expected bin count is below five.
    pub low_expected: bool,
}

/// Pearson test on equal-width bins of `[0, 1]` with `bins - 1` degrees of freedom.
pub fn chi2_test(u: &[f64], bins: usize) -> Result<Chi2Result> {
    chi2_test_with_dof(u, bins, bins.saturating_sub(1))
}

/// Pearson test with an explicit degrees-of-freedom count, e.g. reduced for
/// estimated parameters.
pub fn chi2_test_with_dof(u: &[f64], bins: usize, dof: usize) -> Result<Chi2Result> {
    check_unit(u)?;
    if bins < 2 {
        return Err(Error::Precondition("need at least two bins".into()));
    }
    if dof == 0 || dof >= bins {
        return Err(Error::Precondition(format!("degrees of freedom must be in 1..{bins}")));
    }
    let mut counts = vec![0usize; bins];
    for &v in u {
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let expected = u.len() as f64 / bins as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(Chi2Result {
        bins,
        dof,
        statistic,
        p_value: dist.sf(statistic),
        low_expected: expected < 5.0,
    })
}

/// Uniform QQ pairs `((i - 0.5)/n, u_(i))`.
pub fn qq_rows(u: &[f64]) -> Vec<(f64, f64)> {
    let mut s = u.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.into_iter().enumerate().map(|(i, v)| ((i as f64 + 0.5) / n, v)).collect()
}

/// One line of the test table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GofRow {
    pub test: String,
    pub bins: Option<usize>,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GofReport {
    pub n: usize,
    pub ks: KsResult,
    pub chi2: Vec<Chi2Result>,
    pub warnings: Vec<String>,
}

impl GofReport {
    pub fn rows(&self) -> Vec<GofRow> {
        let mut rows = vec![GofRow {
            test: "ks".into(),
            bins: None,
            statistic: self.ks.statistic,
            p_value: self.ks.p_value,
        }];
        rows.extend(self.chi2.iter().map(|c| GofRow {
            test: "chi2".into(),
            bins: Some(c.bins),
            statistic: c.statistic,
            p_value: c.p_value,
        }));
        rows
    }
}

/// KS test and one Pearson test per bin count.
pub fn gof_report(u: &[f64], bins: &[usize]) -> Result<GofReport> {
    let ks = ks_test(u)?;
    let chi2 = bins.iter().map(|&b| chi2_test(u, b)).collect::<Result<Vec<_>>>()?;
    let warnings = chi2
        .iter()
        .filter(|c| c.low_expected)
        .map(|c| format!("expected count below 5 with {} bins", c.bins))
        .collect();
    Ok(GofReport {
        n: u.len(),
        ks,
        chi2,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_branches_agree() {
        for lam in [1.0, 1.1, 1.18, 1.25, 1.4] {
            let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * lam * lam);
            let small: f64 = 1.0
                - (2.0 * std::f64::consts::PI).sqrt() / lam
                    * (1..=20).map(|k| (-((2 * k - 1) as f64).powi(2) * c).exp()).sum::<f64>();
            let large: f64 = 2.0
                * (1..=100)
                    .map(|k| (if k % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * (k * k) as f64 * lam * lam).exp())
                    .sum::<f64>();
            assert!((small - large).abs() < 1e-12, "{lam}");
        }
        // standard critical values
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn mixture_and_spectral_pit_agree() {
        let model = SubDiffModel::new(Diffusion::ou(0.04, 0.0, 0.06), Subordinator::inverse_gaussian(1.0, 0.5));
        let data = ObservedSeries::new(1.0, vec![0.0, 0.05, -0.1, 0.12, 0.0], crate::simulate::Origin::Ingested { source: "t".into() }).unwrap();
        let mix = pit(&data, &model, &PitOptions::default(), Execution::Sequential).unwrap();
        let spec = pit(&data, &model, &PitOptions { method: PitMethod::Spectral, ..PitOptions::default() }, Execution::Sequential).unwrap();
        assert_eq!(mix.method, PitMethod::Mixture);
        for (a, b) in mix.u.iter().zip(&spec.u) {
            assert!((a - b).abs() < 1e-7, "{a} {b}");
        }
    }
}
