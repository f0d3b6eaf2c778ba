use fedlora::params::Rng;
use fedlora::theory::{self, check_bound, check_bounds, sample_joint, QuadScenario, Which};

fn isotropic(d: usize, l: f64, offset: &[f64], var: f64, delta: f64) -> QuadScenario {
    QuadScenario {
        w_star: vec![0.5; d],
        h: vec![l; d],
        l,
        c3: 0.0,
        delta,
        w_pre: vec![0.0; d],
        mu_f: offset.iter().map(|o| 0.5 + o).collect(),
        mu_l: offset.iter().map(|o| 0.5 + o).collect(),
        var_f: vec![var; d],
        var_l: vec![var; d],
        cross: vec![0.0; d],
    }
}

#[test]
fn quadratic_expectation_is_reproduced() {
    let offset = [0.3, -0.4];
    let sc = isotropic(2, 2.0, &offset, 0.01, 1.0);
    for which in [Which::FedIt, Which::Local, Which::Merge(0.3)] {
        let c = check_bound(&sc, which, 100_000, &mut Rng::new(1)).unwrap();
        let tr = sc.sigma_trace(which);
        let exact = 0.5 * 2.0 * (0.25 + tr);
        assert!(
            (c.lhs - exact).abs() <= 3.0 * c.lhs_stderr,
            "{which:?}: {} vs {exact}",
            c.lhs
        );
        assert!(c.holds);
    }
}

#[test]
fn bound_is_tight_on_the_basin_boundary() {
    // ‖offset‖ = δ and H = L·I: E[excess] equals the bound exactly.
    let sc = isotropic(2, 2.0, &[3.0, 4.0], 0.0, 5.0);
    let c = check_bound(&sc, Which::FedIt, 10_000, &mut Rng::new(2)).unwrap();
    assert!((c.lhs - c.rhs).abs() <= 1e-12);
    assert!(c.holds);
}

#[test]
fn independent_draws_have_no_cross_covariance() {
    let mut sc = isotropic(1, 1.0, &[0.0], 0.04, 2.0);
    sc.var_l = vec![0.09];
    let n = 100_000;
    let draws = sample_joint(&sc, n, &mut Rng::new(3)).unwrap();
    let (mf, ml) = (sc.mu_f[0], sc.mu_l[0]);
    let cov = draws.iter().map(|(f, l)| (f[0] - mf) * (l[0] - ml)).sum::<f64>() / n as f64;
    let sd = (0.04f64 * 0.09).sqrt();
    assert!(cov.abs() < 3.0 * sd / (n as f64).sqrt());
}

#[test]
fn merged_mean_follows_the_clt() {
    let mut rng = Rng::new(4);
    let sc = QuadScenario::random(3, false, &mut rng);
    let lam = 0.35;
    let n = 100_000;
    let draws = sample_joint(&sc, n, &mut rng).unwrap();
    for i in 0..3 {
        let mean = draws.iter().map(|(f, l)| lam * f[i] + (1.0 - lam) * l[i]).sum::<f64>() / n as f64;
        let var = lam * lam * sc.var_f[i] + (1.0 - lam).powi(2) * sc.var_l[i] + 2.0 * lam * (1.0 - lam) * sc.cross[i];
        let target = lam * sc.mu_f[i] + (1.0 - lam) * sc.mu_l[i];
        assert!((mean - target).abs() <= 4.0 * (var / n as f64).sqrt());
    }
}

#[test]
fn bound_grows_with_any_variance() {
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let mut sc = QuadScenario::random(4, true, &mut rng);
        let before: Vec<f64> = [Which::FedIt, Which::Local, Which::Merge(0.5)]
            .iter()
            .map(|&w| sc.rhs(w))
            .collect();
        let k = rng.below(4);
        sc.var_f[k] *= 1.5;
        sc.var_l[k] *= 1.5;
        let after: Vec<f64> = [Which::FedIt, Which::Local, Which::Merge(0.5)]
            .iter()
            .map(|&w| sc.rhs(w))
            .collect();
        assert!(before.iter().zip(&after).all(|(b, a)| a >= b));
    }
}

#[test]
fn optimal_weight_gives_the_tightest_bound() {
    let mut rng = Rng::new(6);
    for i in 0..100 {
        let sc = QuadScenario::random(1 + i % 7, i % 2 == 0, &mut rng);
        let ls = sc.lambda_star().unwrap();
        assert!(sc.rhs(Which::Merge(ls)) <= sc.rhs(Which::Merge(0.0)).min(sc.rhs(Which::Merge(1.0))));
    }
}

#[test]
fn cubic_scenarios_hold_with_no_escapes() {
    let mut rng = Rng::new(7);
    for _ in 0..5 {
        let sc = QuadScenario::random(5, true, &mut rng);
        let lam = sc.lambda_star().unwrap();
        for c in check_bounds(&sc, &[Which::FedIt, Which::Local, Which::Merge(lam)], 20_000, &mut rng).unwrap() {
            assert!(c.holds);
            assert_eq!(c.escapes, 0);
        }
    }
}

#[test]
fn suite_is_reproducible() {
    let a = theory::run_suite(3, 10_000, 100, &Rng::new(8)).unwrap();
    let b = theory::run_suite(3, 10_000, 100, &Rng::new(8)).unwrap();
    assert_eq!(a.to_csv().render(), b.to_csv().render());
    assert!(a.all_hold());
}

#[test]
fn perfectly_correlated_trace_reaches_equality() {
    let mut sc = isotropic(3, 1.0, &[0.0; 3], 0.01, 1.0);
    sc.cross = sc.var_f.clone();
    let a: f64 = sc.var_f.iter().sum();
    let c: f64 = sc.cross.iter().sum();
    assert_eq!(c, (a * a).sqrt());
    assert!(theory::check_trace_cs(1, &mut Rng::new(9)).unwrap() == 1);
}
