use subdiff::models::{Diffusion, StationaryDensity, SubDiffModel, Subordinator};
use subdiff::numerics::integrate;
use subdiff::simulate::{sample_increment, simulate_seeded, stream_rng, SimOptions, StationarySampler};

#[test]
fn inverse_gaussian_increments_have_the_right_moments() {
    let sub = Subordinator::inverse_gaussian(1.0, 0.5);
    let delta = 2.0;
    let mut rng = stream_rng(3, 0);
    let draws: Vec<f64> = (0..200_000).map(|_| sample_increment(&sub, delta, &mut rng).unwrap()).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // mean mu*delta, variance v*delta
    assert!((mean - 2.0).abs() < 4.0 * (1.0f64 / n).sqrt(), "{mean}");
    assert!((var - 1.0).abs() < 0.03, "{var}");
}

#[test]
fn increments_match_the_laplace_exponent() {
    let sub = Subordinator::inverse_gaussian(1.0, 0.5);
    let mut rng = stream_rng(4, 1);
    let draws: Vec<f64> = (0..100_000).map(|_| sample_increment(&sub, 1.0, &mut rng).unwrap()).collect();
    for lambda in [0.3, 1.0, 4.0] {
        let mc = draws.iter().map(|t| (-lambda * t).exp()).sum::<f64>() / draws.len() as f64;
        let exact = (-sub.laplace_exponent(lambda)).exp();
        assert!((mc - exact).abs() < 3e-3, "{lambda} {mc} {exact}");
    }
}

#[test]
fn drift_shifts_the_clock() {
    let sub = Subordinator::InverseGaussian { mu: 1.0, v: 0.5, gamma: 0.25 };
    let mut rng = stream_rng(5, 0);
    let min = (0..10_000)
        .map(|_| sample_increment(&sub, 2.0, &mut rng).unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(min >= 0.5);
}

#[test]
fn one_step_from_stationarity_stays_stationary() {
    let model = SubDiffModel::new(Diffusion::ou(0.04, 0.1, 0.06), Subordinator::inverse_gaussian(1.0, 0.5));
    let ends: Vec<f64> = (0..20_000u64)
        .map(|r| simulate_seeded(&model, 1, 5.0, None, &SimOptions::default(), 9, r).unwrap().values[1])
        .collect();
    let n = ends.len() as f64;
    let mean = ends.iter().sum::<f64>() / n;
    let var = ends.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd2 = 0.06f64 * 0.06 / 0.08;
    assert!((mean - 0.1).abs() < 4.0 * (sd2 / n).sqrt(), "{mean}");
    assert!((var / sd2 - 1.0).abs() < 0.05, "{var} {sd2}");
}

#[test]
fn stationary_sampler_inverts_the_cev_distribution() {
    let d = Diffusion::PolyDriftCev {
        coeffs: vec![0.5, 0.0, -0.5],
        beta: 0.75,
        sigma: 0.3,
    };
    let q = StationaryDensity::new(&d).unwrap();
    let s = StationarySampler::new(&d).unwrap();
    let lo = q.support().0;
    for u in [0.05, 0.5, 0.9] {
        let x = s.quantile(u);
        let (mass, _) = integrate(|t| q.pdf(t), lo, x, 1e-12, 1e-10);
        assert!((mass - u).abs() < 1e-5, "{u} {mass}");
    }
}

#[test]
fn cev_paths_stay_positive() {
    let d = Diffusion::PolyDriftCev {
        coeffs: vec![0.5, 0.0, -0.5],
        beta: 0.75,
        sigma: 0.3,
    };
    let model = SubDiffModel::new(d, Subordinator::inverse_gaussian(1.0, 0.5));
    let path = simulate_seeded(&model, 500, 1.0, Some(1.0), &SimOptions::default(), 2, 0).unwrap();
    assert_eq!(path.values.len(), 501);
    assert!(path.values.iter().all(|&y| y > 0.0));
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = SubDiffModel::new(Diffusion::ou(0.04, 0.0, 0.06), Subordinator::inverse_gaussian(1.0, 0.5));
    let opts = SimOptions::default();
    assert_eq!(simulate_seeded(&model, 0, 1.0, None, &opts, 1, 0).unwrap_err().kind(), "domain");
    let bad = SubDiffModel::new(Diffusion::ou(-1.0, 0.0, 0.06), Subordinator::inverse_gaussian(1.0, 0.5));
    assert!(simulate_seeded(&bad, 10, 1.0, None, &opts, 1, 0).is_err());
}
