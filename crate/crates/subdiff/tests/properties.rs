use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subdiff::estimation::{eigen_ef, step2_estimate, EfSetup, NewtonOptions, ProductMode, WeightMatrix};
use subdiff::models::{Diffusion, SubDiffModel, SubParam, Subordinator};
use subdiff::numerics::integrate;
use subdiff::simulate::{simulate_seeded, SimOptions};
use subdiff::spectral::{ou_eigensystem, solve_sl_eigensystem, SlOptions, SubordinateEigenSystem};
use subdiff::Execution;

fn ou() -> Diffusion {
    Diffusion::ou(0.04, 0.0, 0.06)
}

fn ig() -> Subordinator {
    Subordinator::inverse_gaussian(1.0, 0.5)
}

#[test]
fn rescaled_model_has_the_same_transition_density() {
    let model = SubDiffModel::new(ou(), ig());
    for c in [0.5, 3.0] {
        let other = model.rescale(c).unwrap();
        let Diffusion::Ou { kappa, theta, sigma } = other.diffusion else { unreachable!() };
        let e1 = ou_eigensystem(0.04, 0.0, 0.06, 4).unwrap();
        let e2 = ou_eigensystem(kappa, theta, sigma, 4).unwrap();
        let s1 = SubordinateEigenSystem::new(&e1, model.subordinator, 1.0).unwrap();
        let s2 = SubordinateEigenSystem::new(&e2, other.subordinator, 1.0).unwrap();
        for (x, y) in [(0.0, 0.03), (0.15, -0.1), (-0.3, -0.28)] {
            let a = s1.transition_density(1.0, x, y, 1e-12).unwrap().value;
            let b = s2.transition_density(1.0, x, y, 1e-12).unwrap().value;
            assert!((a - b).abs() <= 1e-8 * a.max(1.0), "c={c} {a} {b}");
        }
    }
}

#[test]
fn numeric_eigenfunctions_are_orthonormal() {
    let cev = Diffusion::PolyDriftCev {
        coeffs: vec![0.5, 0.0, -0.5],
        beta: 0.75,
        sigma: 0.3,
    };
    let fitted = Diffusion::PolyDriftCev {
        coeffs: vec![0.0053, 0.0177, -0.3273],
        beta: 2.3695,
        sigma: 1.0,
    };
    for d in [ou(), cev, fitted] {
        let eig = solve_sl_eigensystem(&d, 10, &SlOptions::default()).unwrap();
        let err = eig.orthonormality_error(11);
        assert!(err <= 1e-6, "{d:?} {err}");
    }
    let heavy = Diffusion::PolyDriftCev {
        coeffs: vec![0.1, -0.1],
        beta: 0.75,
        sigma: 1.0,
    };
    // linear drift: x - 1 is an eigenfunction with eigenvalue -0.1
    let eig = solve_sl_eigensystem(&heavy, 4, &SlOptions::default()).unwrap();
    assert!(eig.orthonormality_error(5) <= 1e-6, "{}", eig.orthonormality_error(5));
    assert!((eig.eigenvalues()[1] + 0.1).abs() <= 1e-6);
    let narrow = SlOptions {
        bounds: Some((0.05, 2.0)),
        ..SlOptions::default()
    };
    let e = solve_sl_eigensystem(&heavy, 4, &narrow).unwrap_err();
    assert_eq!(e.kind(), "precondition");
}

#[test]
fn eigenfunction_increments_are_martingale_differences() {
    let eig = ou_eigensystem(0.04, 0.0, 0.06, 4).unwrap();
    let se = SubordinateEigenSystem::new(&eig, ig(), 1.0).unwrap();
    for x in [-0.3, -0.1, 0.0, 0.2] {
        for m in 1..=4 {
            let f = |y: f64| se.transition_density(1.0, x, y, 1e-13).unwrap().value * eig.eval(m, y);
            let (ev, _) = integrate(f, -2.2, 2.2, 1e-12, 1e-12);
            let resid = ev - se.factor(m, 1.0) * eig.eval(m, x);
            assert!(resid.abs() <= 1e-8, "x={x} m={m} {resid:e}");
        }
    }
}

#[test]
fn semigroup_contracts_mean_zero_functions() {
    let eig = solve_sl_eigensystem(&ou(), 8, &SlOptions::default()).unwrap();
    let se = SubordinateEigenSystem::new(&eig, ig(), 1.0).unwrap();
    let rate = se.factor(1, 1.0);
    let nodes = eig.grid().nodes();
    let w = eig.quad_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut coef: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        coef[0] = 0.0;
        let norm = |t: f64| -> f64 {
            nodes
                .iter()
                .zip(w)
                .map(|(&x, w)| {
                    let v = if t == 0.0 {
                        coef.iter().enumerate().map(|(n, c)| c * eig.eval(n, x)).sum::<f64>()
                    } else {
                        se.apply_semigroup(&coef, x, t)
                    };
                    w * v * v
                })
                .sum::<f64>()
                .sqrt()
        };
        let (before, after) = (norm(0.0), norm(1.0));
        assert!(after <= rate * before * (1.0 + 1e-9), "{after} {} ", rate * before);
    }
}

#[test]
fn chapman_kolmogorov() {
    let eig = ou_eigensystem(0.04, 0.0, 0.06, 4).unwrap();
    let se = SubordinateEigenSystem::new(&eig, ig(), 1.0).unwrap();
    for (x, y) in [(0.0, 0.05), (0.2, -0.1), (-0.25, -0.2)] {
        let f = |z: f64| {
            se.transition_density(1.0, x, z, 1e-12).unwrap().value * se.transition_density(2.0, z, y, 1e-12).unwrap().value
        };
        let (lhs, _) = integrate(f, -2.2, 2.2, 1e-10, 1e-10);
        let rhs = se.transition_density(3.0, x, y, 1e-12).unwrap().value;
        assert!((lhs - rhs).abs() <= 1e-5 * rhs.max(1.0), "{lhs} {rhs}");
    }
}

fn setup(delta: f64) -> EfSetup {
    EfSetup::new(
        ou_eigensystem(0.04, 0.0, 0.06, 8).unwrap(),
        4,
        ig(),
        vec![SubParam::Mu, SubParam::V],
        delta,
        ProductMode::Exact,
    )
    .unwrap()
}

#[test]
fn ks_weight_pieces_match_oracles() {
    let s = setup(1.0);
    let sub = s.template;
    let se = SubordinateEigenSystem::new(&s.eig, sub, 1.0).unwrap();
    let d = s.decays(&sub);
    let grad = s.decay_gradient(&sub, &d).unwrap();
    for x in [-0.2, 0.05, 0.3] {
        let phi = s.eig.eval_vec(x, s.terms);
        let p = s.p_matrix(&phi, &d);
        for i in 1..=4 {
            for j in i..=4 {
                let f = |y: f64| {
                    let vi = s.eig.eval(i, y) - d[i] * phi[i];
                    let vj = s.eig.eval(j, y) - d[j] * phi[j];
                    vi * vj * se.transition_density(1.0, x, y, 1e-13).unwrap().value
                };
                let (q, _) = integrate(f, -2.2, 2.2, 1e-12, 1e-12);
                assert!((q - p[(i - 1, j - 1)]).abs() <= 1e-5, "P {i}{j} {q} {}", p[(i - 1, j - 1)]);
            }
        }
        let q = s.q_matrix(&phi, &grad);
        for (k, param) in s.free.iter().enumerate() {
            let h = 1e-6;
            let up = sub.with(*param, sub.get(*param).unwrap() + h).unwrap();
            let dn = sub.with(*param, sub.get(*param).unwrap() - h).unwrap();
            let (du, dd) = (s.decays(&up), s.decays(&dn));
            for i in 1..=4 {
                let fd = (du[i] - dd[i]) * phi[i] / (2.0 * h);
                assert!((fd - q[(i - 1, k)]).abs() <= 1e-5, "Q {i}{k} {fd} {}", q[(i - 1, k)]);
            }
        }
    }
}

#[test]
fn root_is_invariant_under_right_multiplication() {
    let model = SubDiffModel::new(ou(), ig());
    let data = simulate_seeded(&model, 1500, 1.0, None, &SimOptions::default(), 5, 0).unwrap();
    let s = setup(1.0);
    let table = s.phi_table(&data);
    let opts = NewtonOptions::default();
    let plain = step2_estimate(&s, &table, &WeightMatrix::Ks, None, None, &opts, Execution::Sequential).unwrap();
    let k = DMatrix::from_row_slice(2, 2, &[2.0, -0.7, 0.3, 1.5]);
    let mixed = step2_estimate(&s, &table, &WeightMatrix::Ks, Some(&k), None, &opts, Execution::Sequential).unwrap();
    for (a, b) in plain.values.iter().zip(&mixed.values) {
        assert!((a - b).abs() <= 1e-8 * a.abs(), "{a} {b}");
    }
    let f = eigen_ef(&s, &table, &plain.values, &WeightMatrix::Ks, Some(&k), Execution::Sequential).unwrap().0;
    assert!(f.amax() <= 1e-6);
}
