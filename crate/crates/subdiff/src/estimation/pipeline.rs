use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::models::{Diffusion, ScalePin, SubDiffModel, SubParam, Subordinator};
use crate::simulate::{simulate_seeded, ObservedSeries, SimOptions};
use crate::spectral::{ou_eigensystem, solve_sl_eigensystem, EigenSource, EigenSystem, SlOptions};

use super::covariance::{outer_sample, plugin_covariance, OuterMode, PluginCovariance, Theta1Sensitivity};
use super::ef::{EfSetup, ProductMode, WeightMatrix};
use super::step1::{step1_estimate, Step1Result};
use super::step2::{step2_estimate, Step2Result};
use super::{NewtonOptions, WeightKind};

/// Source of the eigen system used in the second step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenMode {
    /// Closed form when available, numeric otherwise.
    #[default]
    Auto,
    Analytic,
    Numeric,
}

/// Extra eigenpairs solved beyond `2M` for numeric systems.
const NUMERIC_EXTRA: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Number of eigenfunctions `M`.
    pub m: usize,
    pub weight: WeightKind,
    pub eigen: EigenMode,
    pub sl: SlOptions,
    /// Defaults to exact Hermite products for closed-form systems and
    /// extrapolated quadrature on every fourth node otherwise.
    pub product: Option<ProductMode>,
    /// Clock parameters to estimate; defaults depend on the family.
    pub free: Option<Vec<SubParam>>,
    pub outer: OuterMode,
    pub newton: NewtonOptions,
    /// Compute the plug-in covariance (always done for the optimal weight).
    pub covariance: bool,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            m: 4,
            weight: WeightKind::Ks,
            eigen: EigenMode::Auto,
            sl: SlOptions::default(),
            product: None,
            free: None,
            outer: OuterMode::default(),
            newton: NewtonOptions::default(),
            covariance: true,
            exec: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EigenSummary {
    pub source: EigenSource,
    pub pairs: usize,
    pub expansion_terms: usize,
    pub product: ProductMode,
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimationReport {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    /// Standard errors for the selected weight, when the covariance is available.
    pub standard_errors: Option<Vec<f64>>,
    pub weight: WeightKind,
    pub m: usize,
    pub diffusion: Diffusion,
    pub subordinator: Subordinator,
    pub step1: Step1Result,
    pub step2_ks: Step2Result,
    pub step2_optimal: Option<Step2Result>,
    pub eigen: EigenSummary,
    pub covariance: Option<PluginCovariance>,
    pub covariance_error: Option<String>,
    pub n_obs: usize,
}

/// Builds the eigen system of `diff` for an `M`-function estimating function.
pub fn build_eigensystem(diff: &Diffusion, m: usize, mode: EigenMode, sl: &SlOptions) -> Result<EigenSystem> {
    let analytic = match mode {
        EigenMode::Auto => matches!(diff, Diffusion::Ou { .. }),
        EigenMode::Analytic => true,
        EigenMode::Numeric => false,
    };
    match (diff, analytic) {
        (&Diffusion::Ou { kappa, theta, sigma }, true) => ou_eigensystem(kappa, theta, sigma, 2 * m),
        (_, true) => Err(Error::Capability("closed-form eigen system exists only for OU".into())),
        (_, false) => solve_sl_eigensystem(diff, 2 * m + NUMERIC_EXTRA, sl),
    }
}

/// Step-two setup for given first-step diffusion parameters.
pub fn build_setup(diff: &Diffusion, sub: &Subordinator, delta: f64, cfg: &EstimationConfig) -> Result<EfSetup> {
    let eig = build_eigensystem(diff, cfg.m, cfg.eigen, &cfg.sl)?;
    let product = cfg.product.unwrap_or(if eig.is_analytic() {
        ProductMode::Exact
    } else {
        ProductMode::Quadrature { stride: 4, extrapolate: true }
    });
    let free = cfg.free.clone().unwrap_or_else(|| sub.default_free_params());
    EfSetup::new(eig, cfg.m, *sub, free, delta, product)
}

/// Sensitivity of the eigen system to the first-step parameters.
pub fn sensitivity(setup: &EfSetup, pin: ScalePin, sl: &SlOptions) -> Result<Theta1Sensitivity> {
    if setup.eig.is_analytic() {
        return Theta1Sensitivity::hermite(setup, pin);
    }
    let grid = setup.eig.grid().clone();
    let pairs = setup.eig.len() - 1;
    let opts = SlOptions {
        bounds: Some((grid.lo, grid.hi)),
        log_spacing: Some(grid.log),
        cells: grid.cells,
        ..sl.clone()
    };
    Theta1Sensitivity::numeric(setup, pin, 1e-4, |d| solve_sl_eigensystem(d, pairs, &opts))
}

/// Plug-in covariance at `theta2` for a prepared setup.
pub fn covariance_at(
    setup: &EfSetup,
    pin: ScalePin,
    sens: &Theta1Sensitivity,
    theta2: &[f64],
    outer: &OuterMode,
    data: Option<&ObservedSeries>,
    n_obs: usize,
    exec: Execution,
) -> Result<PluginCovariance> {
    let sample = outer_sample(outer, &setup.eig, data)?;
    plugin_covariance(setup, pin, sens, theta2, &sample, n_obs, exec)
}

/// Two-step estimator: moment conditions for the diffusion, then the
/// eigenfunction estimating function for the clock.
pub fn two_step_estimate(data: &ObservedSeries, model: &SubDiffModel, cfg: &EstimationConfig) -> Result<EstimationReport> {
    model.ensure_valid()?;
    data.check_domain(&model.diffusion)?;
    let pin = model.fixed_scale;
    let step1 = step1_estimate(data, &model.diffusion, pin)?;
    let setup = build_setup(&step1.diffusion, &model.subordinator, data.delta, cfg)?;
    let table = setup.phi_table(data);
    let ks = step2_estimate(&setup, &table, &WeightMatrix::Ks, None, None, &cfg.newton, cfg.exec)?;
    let n_obs = data.transitions();

    let want_cov = cfg.covariance || cfg.weight == WeightKind::Optimal;
    let mut covariance = None;
    let mut covariance_error = None;
    let mut sens_kept = None;
    if want_cov {
        match sensitivity(&setup, pin, &cfg.sl).and_then(|s| {
            let c = covariance_at(&setup, pin, &s, &ks.values, &cfg.outer, Some(data), n_obs, cfg.exec)?;
            Ok((s, c))
        }) {
            Ok((s, c)) => {
                sens_kept = Some(s);
                covariance = Some(c);
            }
            Err(e) => covariance_error = Some(e.to_string()),
        }
    }

    let mut optimal = None;
    if cfg.weight == WeightKind::Optimal {
        let (Some(sens), Some(cov)) = (sens_kept.take(), covariance.as_ref()) else {
            return Err(Error::Capability(format!(
                "optimal weight needs the plug-in covariance: {}",
                covariance_error.unwrap_or_default()
            )));
        };
        let w = WeightMatrix::Optimal {
            c2: cov.c2_matrix.clone(),
            c3: cov.c3_matrix.clone(),
            sens: Box::new(sens),
        };
        let fit = step2_estimate(&setup, &table, &w, None, Some(&ks.values), &cfg.newton, cfg.exec)?;
        if cfg.covariance {
            if let WeightMatrix::Optimal { sens, .. } = &w {
                match covariance_at(&setup, pin, sens, &fit.values, &cfg.outer, Some(data), n_obs, cfg.exec) {
                    Ok(c) => covariance = Some(c),
                    Err(e) => covariance_error = Some(e.to_string()),
                }
            }
        }
        optimal = Some(fit);
    }

    let theta2 = optimal.as_ref().map(|o| o.values.clone()).unwrap_or_else(|| ks.values.clone());
    let subordinator = setup.subordinator(&theta2)?;
    let mut names = step1.names.clone();
    names.extend(setup.free.iter().map(|p| p.name().to_string()));
    let mut estimates = step1.values.clone();
    estimates.extend(theta2.iter().cloned());
    let standard_errors = covariance.as_ref().map(|c| match cfg.weight {
        WeightKind::Ks => c.ks.standard_errors.clone(),
        WeightKind::Optimal => c.optimal.standard_errors.clone(),
    });
    Ok(EstimationReport {
        names,
        estimates,
        standard_errors,
        weight: cfg.weight,
        m: cfg.m,
        diffusion: step1.diffusion.clone(),
        subordinator,
        step1,
        step2_ks: ks,
        step2_optimal: optimal,
        eigen: EigenSummary {
            source: setup.eig.source().clone(),
            pairs: setup.eig.len(),
            expansion_terms: setup.terms,
            product: setup.product,
        },
        covariance,
        covariance_error,
        n_obs,
    })
}

/// Spread of two-step estimates over simulated replications.
#[derive(Clone, Debug, Serialize)]
pub struct ReplicationSe {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    pub standard_deviation: Vec<f64>,
    pub replications: usize,
    pub failures: Vec<(usize, String)>,
    pub estimates: Vec<Vec<f64>>,
}

/// Empirical standard errors from `reps` independent simulated series,
/// replication `r` on random stream `r` of `seed`.
pub fn replication_se(
    model: &SubDiffModel,
    n: usize,
    delta: f64,
    reps: usize,
    seed: u64,
    sim: &SimOptions,
    cfg: &EstimationConfig,
) -> Result<ReplicationSe> {
    if reps < 2 {
        return Err(Error::Precondition("need at least two replications".into()));
    }
    let inner = EstimationConfig {
        covariance: false,
        exec: Execution::Sequential,
        ..cfg.clone()
    };
    let runs = exec::map(cfg.exec, reps, |r| -> Result<EstimationReport> {
        let data = simulate_seeded(model, n, delta, None, sim, seed, r as u64)?;
        two_step_estimate(&data, model, &inner)
    });
    let mut names = Vec::new();
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok(rep) => {
                names = rep.names.clone();
                estimates.push(rep.estimates);
            }
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if estimates.len() < 2 {
        return Err(Error::solver("fewer than two replications succeeded", reps, f64::NAN));
    }
    let k = estimates[0].len();
    let count = estimates.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| estimates.iter().map(|e| e[j]).sum::<f64>() / count).collect();
    let standard_deviation = (0..k)
        .map(|j| (estimates.iter().map(|e| (e[j] - mean[j]).powi(2)).sum::<f64>() / (count - 1.0)).sqrt())
        .collect();
    let truth = truth_values(model, &names);
    Ok(ReplicationSe {
        names,
        truth,
        mean,
        standard_deviation,
        replications: reps,
        failures,
        estimates,
    })
}

fn truth_values(model: &SubDiffModel, names: &[String]) -> Vec<f64> {
    let dn = model.diffusion.param_names();
    let dp = model.diffusion.params();
    names
        .iter()
        .map(|name| {
            if let Some(i) = dn.iter().position(|d| d == name) {
                return dp[i];
            }
            [SubParam::Gamma, SubParam::C, SubParam::P, SubParam::Eta, SubParam::Mu, SubParam::V]
                .into_iter()
                .find(|p| p.name() == name)
                .and_then(|p| model.subordinator.get(p).ok())
                .unwrap_or(f64::NAN)
        })
        .collect()
}
