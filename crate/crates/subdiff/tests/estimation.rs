use subdiff::estimation::{mle_fit, mle_information, mle_information_quadrature, two_step_estimate, EigenMode, EstimationConfig, NewtonOptions, WeightKind};
use subdiff::models::{Diffusion, SubDiffModel, Subordinator};
use subdiff::simulate::{simulate_seeded, SimOptions};
use subdiff::Execution;

fn ou_model() -> SubDiffModel {
    SubDiffModel::new(Diffusion::ou(0.04, 0.0, 0.06), Subordinator::inverse_gaussian(1.0, 0.5))
}

#[test]
fn numeric_and_closed_form_eigensystems_give_the_same_estimates() {
    let model = ou_model();
    let data = simulate_seeded(&model, 2000, 1.0, None, &SimOptions::default(), 21, 0).unwrap();
    let base = EstimationConfig {
        covariance: false,
        exec: Execution::Sequential,
        ..EstimationConfig::default()
    };
    let exact = two_step_estimate(&data, &model, &base).unwrap();
    let numeric = two_step_estimate(
        &data,
        &model,
        &EstimationConfig {
            eigen: EigenMode::Numeric,
            ..base
        },
    )
    .unwrap();
    for (a, b) in exact.estimates.iter().zip(&numeric.estimates) {
        assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-2), "{a} {b}");
    }
}

#[test]
fn optimal_weight_reports_its_constants_and_both_standard_errors() {
    let model = ou_model();
    let data = simulate_seeded(&model, 1500, 1.0, None, &SimOptions::default(), 17, 0).unwrap();
    let cfg = EstimationConfig {
        weight: WeightKind::Optimal,
        ..EstimationConfig::default()
    };
    let rep = two_step_estimate(&data, &model, &cfg).unwrap();
    let cov = rep.covariance.as_ref().unwrap();
    assert_eq!((cov.c2.len(), cov.c2[0].len()), (2, 2));
    assert_eq!((cov.c3.len(), cov.c3[0].len()), (2, 2));
    assert_eq!(cov.ks.standard_errors.len(), 4);
    assert_eq!(cov.optimal.standard_errors.len(), 4);
    let opt = rep.step2_optimal.as_ref().unwrap();
    for (a, b) in opt.values.iter().zip(&rep.step2_ks.values) {
        assert!((a - b).abs() < 0.05 * b.abs(), "{a} {b}");
    }
}

#[test]
fn cev_estimation_runs_and_flags_the_missing_covariance() {
    let d = Diffusion::PolyDriftCev {
        coeffs: vec![0.5, 0.0, -0.5],
        beta: 0.75,
        sigma: 1.0,
    };
    let model = SubDiffModel::new(d, Subordinator::inverse_gaussian(1.0, 0.5));
    let data = simulate_seeded(&model, 2000, 0.1, None, &SimOptions::default(), 3, 0).unwrap();
    let rep = two_step_estimate(&data, &model, &EstimationConfig::default()).unwrap();
    assert!(rep.estimates.iter().all(|v| v.is_finite()));
    assert!(rep.standard_errors.is_none());
    assert!(rep.covariance_error.as_deref().unwrap().starts_with("unsupported"));
    let optimal = EstimationConfig {
        weight: WeightKind::Optimal,
        ..EstimationConfig::default()
    };
    assert_eq!(two_step_estimate(&data, &model, &optimal).unwrap_err().kind(), "capability");
}

#[test]
fn maximum_likelihood_lands_near_the_truth() {
    let model = ou_model();
    let data = simulate_seeded(&model, 2000, 1.0, None, &SimOptions::default(), 23, 0).unwrap();
    let start = Subordinator::inverse_gaussian(1.3, 0.8);
    let fit = mle_fit(&data, &Diffusion::ou(0.05, 0.01, 0.06), &start, &NewtonOptions::default(), Execution::default()).unwrap();
    assert!(fit.trace.converged);
    // asymptotic SEs at this design: 0.0064, 0.034, 0.043, 0.13
    for (j, (truth, se)) in [(0.04, 0.0064), (0.0, 0.034), (1.0, 0.043), (0.5, 0.13)].iter().enumerate() {
        assert!((fit.values[j] - truth).abs() < 4.0 * se, "{j} {:?}", fit.values);
    }
}

#[test]
fn information_quadrature_agrees_with_monte_carlo() {
    let d = Diffusion::ou(0.5, 0.1, 0.3);
    let s = Subordinator::inverse_gaussian(1.3, 2.0);
    let quad = mle_information_quadrature(&d, &s, 0.2, 1000, Execution::default()).unwrap();
    let mc = mle_information(&d, &s, 0.2, 1000, 100_000, 4, Execution::default()).unwrap();
    for (a, b) in quad.standard_errors.iter().zip(&mc.standard_errors) {
        assert!((a / b - 1.0).abs() < 0.03, "{a} {b}");
    }
}
