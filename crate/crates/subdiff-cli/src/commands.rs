//! Subcommands. Each returns the `result` section of the report and writes
//! any auxiliary tables into the output directory.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use subdiff::estimation::{
    build_setup, covariance_at, mle_information, mle_information_quadrature, replication_se, sensitivity, two_step_estimate, EigenMode,
    EstimationConfig, EstimationReport,
};
use subdiff::gof::{gof_report, pit, qq_rows};
use subdiff::models::{Diffusion, SubDiffModel, Subordinator};
use subdiff::simulate::{simulate_seeded, ObservedSeries, SimOptions};
use subdiff::spectral::{ou_eigensystem, solve_sl_eigensystem, EigenSystem};
use subdiff::Execution;

use crate::config::{GofModel, MleMode, RunConfig, SeMode};
use crate::error::CliError;
use crate::ingest::{fmt, ingest_csv, write_series, Schema};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Eigen,
    Estimate,
    Gof,
    Se,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Eigen => "eigen",
            Command::Estimate => "estimate",
            Command::Gof => "gof",
            Command::Se => "se",
        }
    }
}

/// Everything a subcommand needs besides the config.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub exec: Execution,
}

impl Context<'_> {
    fn out(&self, name: &str) -> std::path::PathBuf {
        self.cfg.output.dir.join(name)
    }

    fn estimation(&self) -> EstimationConfig {
        EstimationConfig {
            exec: self.exec,
            ..self.cfg.estimation.clone()
        }
    }

    fn simulate_seed(&self) -> u64 {
        self.cfg
            .data
            .as_ref()
            .and_then(|d| d.simulate.as_ref())
            .and_then(|s| s.seed)
            .unwrap_or(self.cfg.seed)
    }

    /// Observations from the data block: ingested or simulated.
    fn series(&self) -> Result<ObservedSeries, CliError> {
        let data = self.cfg.data.as_ref().ok_or_else(|| CliError::Config {
            key: Some("data".into()),
            message: "this command needs a data block".into(),
        })?;
        if let Some(path) = &data.path {
            let schema = Schema {
                time: data.time_column.clone(),
                value: data.value_column.clone(),
            };
            return ingest_csv(path, &schema, data.delta);
        }
        let s = data.simulate.as_ref().expect("validated");
        Ok(simulate_seeded(&self.cfg.model(), s.n, s.delta, s.x0, &s.options, self.simulate_seed(), 0)?)
    }

    fn sim_options(&self) -> SimOptions {
        self.cfg
            .data
            .as_ref()
            .and_then(|d| d.simulate.as_ref())
            .map(|s| s.options.clone())
            .unwrap_or_default()
    }

    /// Sample size and spacing for the model-based SE modes.
    fn design(&self) -> Result<(usize, f64), CliError> {
        let sim = self.cfg.data.as_ref().and_then(|d| d.simulate.as_ref());
        let n = self.cfg.se.n.or(sim.map(|s| s.n));
        let delta = self.cfg.se.delta.or(sim.map(|s| s.delta));
        match (n, delta) {
            (Some(n), Some(d)) => Ok((n, d)),
            _ => Err(CliError::Config {
                key: Some("se".into()),
                message: "set se.n and se.delta or give a data.simulate block".into(),
            }),
        }
    }
}

pub fn run(cmd: Command, ctx: &Context) -> Result<Value, CliError> {
    match cmd {
        Command::Simulate => simulate(ctx),
        Command::Eigen => eigen(ctx),
        Command::Estimate => estimate(ctx),
        Command::Gof => gof(ctx),
        Command::Se => se(ctx),
    }
}

fn data_summary(s: &ObservedSeries) -> Value {
    let n = s.values.len() as f64;
    let mean = s.values.iter().sum::<f64>() / n;
    let var = s.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    json!({
        "origin": s.origin,
        "observations": s.values.len(),
        "delta": s.delta,
        "mean": mean,
        "sd": var.sqrt(),
        "min": s.values.iter().cloned().fold(f64::INFINITY, f64::min),
        "max": s.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn simulate(ctx: &Context) -> Result<Value, CliError> {
    let has_sim = ctx.cfg.data.as_ref().is_some_and(|d| d.simulate.is_some());
    if !has_sim {
        return Err(CliError::Config {
            key: Some("data.simulate".into()),
            message: "simulate needs a data.simulate block".into(),
        });
    }
    let series = ctx.series()?;
    let path = ctx.out(&ctx.cfg.output.series);
    write_series(&path, &series)?;
    Ok(json!({
        "series": file_name(&path),
        "data": data_summary(&series),
    }))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn eigen(ctx: &Context) -> Result<Value, CliError> {
    let e = &ctx.cfg.eigen;
    let diff = &ctx.cfg.diffusion;
    let analytic = match e.mode {
        EigenMode::Auto => matches!(diff, Diffusion::Ou { .. }),
        EigenMode::Analytic => true,
        EigenMode::Numeric => false,
    };
    let eig = match (diff, analytic) {
        (&Diffusion::Ou { kappa, theta, sigma }, true) => ou_eigensystem(kappa, theta, sigma, e.pairs)?,
        (_, true) => return Err(subdiff::Error::Capability("closed-form eigen system exists only for OU".into()).into()),
        (_, false) => solve_sl_eigensystem(diff, e.pairs, &e.sl)?,
    };
    let count = eig.len();
    let path = ctx.out("eigensystem.csv");
    let mut header = vec!["x".to_string(), "density".to_string()];
    header.extend((0..count).map(|n| format!("phi_{n}")));
    let table = eig.node_table(count);
    let nodes = eig.grid().nodes();
    write_table(
        &path,
        &header,
        nodes.iter().enumerate().map(|(k, &x)| {
            let mut row = vec![fmt(x), fmt(eig.density().pdf(x))];
            row.extend((0..count).map(|n| fmt(table[n][k])));
            row
        }),
    )?;

    let mut result = json!({
        "table": file_name(&path),
        "source": eig.source(),
        "grid": eig.grid(),
        "eigenvalues": eig.eigenvalues(),
        "orthonormality_error": eig.orthonormality_error(count),
    });
    if let (&Diffusion::Ou { kappa, .. }, false) = (diff, analytic) {
        result["accuracy_vs_analytic"] = ou_accuracy(&eig, diff, kappa, count)?;
    }
    Ok(result)
}

/// Per-pair relative eigenvalue error and largest nodal eigenfunction error
/// against the Hermite system, up to the sign of each eigenfunction.
fn ou_accuracy(eig: &EigenSystem, diff: &Diffusion, kappa: f64, count: usize) -> Result<Value, CliError> {
    let exact = EigenSystem::ou_on_grid(diff, count - 1, eig.grid().clone())?;
    let rows: Vec<Value> = (1..count)
        .map(|n| {
            let truth = -kappa * n as f64;
            let a = eig.node_values(n);
            let b = exact.node_values(n);
            let sign = if a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            let err = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((sign * x - y).abs()));
            json!({
                "n": n,
                "eigenvalue": eig.eigenvalue(n),
                "analytic": truth,
                "relative_error": (eig.eigenvalue(n) / truth - 1.0).abs(),
                "max_abs_eigenfunction_error": err,
            })
        })
        .collect();
    Ok(Value::Array(rows))
}

#[derive(Serialize)]
struct SeRow<'a> {
    parameter: &'a str,
    estimate: f64,
    se_ks: f64,
    se_optimal: f64,
}

/// Parameter, estimate and the KS and optimal standard error columns.
fn weight_table(rep: &EstimationReport) -> Option<Vec<SeRow<'_>>> {
    let cov = rep.covariance.as_ref()?;
    Some(
        rep.names
            .iter()
            .enumerate()
            .map(|(i, name)| SeRow {
                parameter: name,
                estimate: rep.estimates[i],
                se_ks: cov.ks.standard_errors[i],
                se_optimal: cov.optimal.standard_errors[i],
            })
            .collect(),
    )
}

fn estimate_report(rep: &EstimationReport) -> Value {
    let mut v = json!({
        "names": rep.names,
        "estimates": rep.estimates,
        "standard_errors": rep.standard_errors,
        "weight": rep.weight,
        "m": rep.m,
        "n_obs": rep.n_obs,
        "diffusion": rep.diffusion,
        "subordinator": rep.subordinator,
        "step1": rep.step1,
        "step2_ks": rep.step2_ks,
        "step2_optimal": rep.step2_optimal,
        "eigen": rep.eigen,
        "covariance_error": rep.covariance_error,
    });
    if let Some(table) = weight_table(rep) {
        v["weight_comparison"] = json!(table);
    }
    if let Some(cov) = &rep.covariance {
        v["covariance"] = json!(cov);
    }
    v
}

fn estimate(ctx: &Context) -> Result<Value, CliError> {
    let data = ctx.series()?;
    let rep = two_step_estimate(&data, &ctx.cfg.model(), &ctx.estimation())?;
    let mut v = estimate_report(&rep);
    v["data"] = data_summary(&data);
    Ok(v)
}

fn gof(ctx: &Context) -> Result<Value, CliError> {
    let data = ctx.series()?;
    let configured = ctx.cfg.model();
    let (model, fit) = match ctx.cfg.gof.model {
        GofModel::Configured => (configured, None),
        GofModel::Estimated => {
            let rep = two_step_estimate(&data, &configured, &ctx.estimation())?;
            let model = SubDiffModel {
                diffusion: rep.diffusion.clone(),
                subordinator: rep.subordinator,
                fixed_scale: configured.fixed_scale,
            };
            (model, Some(estimate_report(&rep)))
        }
    };
    let p = pit(&data, &model, &ctx.cfg.gof.pit, ctx.exec)?;
    let report = gof_report(&p.u, &ctx.cfg.gof.bins)?;
    let path = ctx.out("qq.csv");
    write_table(
        &path,
        &["theoretical".into(), "empirical".into()],
        qq_rows(&p.u).into_iter().map(|(a, b)| vec![fmt(a), fmt(b)]),
    )?;
    Ok(json!({
        "data": data_summary(&data),
        "model": model,
        "fit": fit,
        "pit": { "method": p.method, "max_tail": p.max_tail, "clamped": p.clamped },
        "tests": report.rows(),
        "warnings": report.warnings,
        "qq": file_name(&path),
    }))
}

fn se(ctx: &Context) -> Result<Value, CliError> {
    let cfg = ctx.cfg;
    let model = cfg.model();
    let est = ctx.estimation();
    let mut v = match cfg.se.mode {
        SeMode::Replication => {
            let (n, delta) = ctx.design()?;
            let r = replication_se(&model, n, delta, cfg.se.replications, cfg.seed, &ctx.sim_options(), &est)?;
            json!({ "mode": "replication", "n": n, "delta": delta, "replication": r })
        }
        SeMode::Plugin => {
            let data = ctx.series()?;
            let rep = two_step_estimate(&data, &model, &EstimationConfig { covariance: true, ..est })?;
            let mut v = estimate_report(&rep);
            v["mode"] = json!("plugin");
            v["data"] = data_summary(&data);
            v
        }
        SeMode::Asymptotic => {
            let (n, delta) = ctx.design()?;
            asymptotic(&model.diffusion, &model.subordinator, model.fixed_scale, n, delta, &est)?
        }
    };
    if let Some(mode) = &cfg.se.mle {
        let (n, delta) = match ctx.design() {
            Ok(d) => d,
            Err(_) => {
                let s = ctx.series()?;
                (s.transitions(), s.delta)
            }
        };
        let (diff, sub) = (&model.diffusion, &model.subordinator);
        let mle = match mode {
            MleMode::Quadrature => mle_information_quadrature(diff, sub, delta, n, ctx.exec)?,
            MleMode::MonteCarlo { draws } => mle_information(diff, sub, delta, n, *draws, cfg.seed, ctx.exec)?,
        };
        v["mle"] = json!(mle);
    }
    Ok(v)
}

/// Sandwich covariance at the configured parameters for `n` transitions.
fn asymptotic(
    diff: &Diffusion,
    sub: &Subordinator,
    pin: subdiff::models::ScalePin,
    n: usize,
    delta: f64,
    est: &EstimationConfig,
) -> Result<Value, CliError> {
    let setup = build_setup(diff, sub, delta, est)?;
    let sens = sensitivity(&setup, pin, &est.sl)?;
    let theta2: Vec<f64> = setup.free.iter().map(|&p| sub.get(p)).collect::<subdiff::Result<_>>()?;
    let cov = covariance_at(&setup, pin, &sens, &theta2, &est.outer, None, n, est.exec)?;
    let rows: Vec<Value> = cov
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| json!({ "parameter": name, "se_ks": cov.ks.standard_errors[i], "se_optimal": cov.optimal.standard_errors[i] }))
        .collect();
    Ok(json!({ "mode": "asymptotic", "n": n, "delta": delta, "m": est.m, "weight_comparison": rows, "covariance": cov }))
}
