mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use qlab::environment::{sample_path, EnvironmentModel};
use qlab::limits::*;
use qlab::stats::mean_se;
use qlab::systems::{make_circle_family, FnSpec};

fn perturbed(f: FnSpec, len: usize, seed: u64) -> Fixture {
    let sys = make_circle_family(perturbed_fibers(), 1.0).unwrap();
    let env = EnvironmentModel::iid(vec![0.5, 0.5], seed).unwrap();
    let path = sample_path(&env, -400, len as i64 + 800, seed).unwrap();
    Fixture::new(sys, path, f, 128, len, 60)
}

#[test]
fn char_fn_basic_identities() {
    let fx = doubling(FnSpec::cos(1), 128, 64);
    let q = fx.q();
    assert_eq!(char_fn(&q, 0, 0.0, 10).unwrap(), Complex64::new(1.0, 0.0));
    for t in [0.1, 0.7, 2.0, 9.0] {
        assert!(char_fn(&q, 0, t, 10).unwrap().norm() <= 1.0 + 1e-12);
    }
}

#[test]
fn char_fn_matches_monte_carlo() {
    let fx = doubling(FnSpec::cos(1), 256, 64);
    let q = fx.q();
    let exact = char_fn(&q, 0, 0.5, 10).unwrap();
    let sums = sample_orbit_sums(&q, 0, &[10], 100_000, 17).unwrap();
    let re: Vec<f64> = sums.sums[0].iter().map(|s| (0.5 * s).cos()).collect();
    let im: Vec<f64> = sums.sums[0].iter().map(|s| (0.5 * s).sin()).collect();
    let (mr, sr) = mean_se(&re);
    let (mi, si) = mean_se(&im);
    assert!((mr - exact.re).abs() <= 3.0 * sr, "{mr} vs {}", exact.re);
    assert!((mi - exact.im).abs() <= 3.0 * si.max(1e-4), "{mi} vs {}", exact.im);
}

#[test]
fn doubling_cosine_variance_is_one_half() {
    let fx = doubling(FnSpec::cos(1), 256, 600);
    let v = variance(&fx.q(), 0, 256, 32, 64).unwrap();
    assert!((v.sigma2_series - 0.5).abs() < 0.002);
    assert!(v.b_k[1..].iter().all(|b| b.abs() < 1e-10));
    for (_, s) in &v.per_n {
        assert!((s - 0.5).abs() < 1e-9);
    }
}

#[test]
fn coboundary_and_constant_have_no_variance() {
    // the midpoint rule leaves an O(N⁻²) defect in discrete coboundaries
    let cob = doubling(FnSpec::Coboundary { inner: Box::new(FnSpec::cos(1)) }, 4096, 600);
    let v = variance(&cob.q(), 0, 256, 32, 64).unwrap();
    assert!(v.sigma2_series.abs() <= 1e-6, "{}", v.sigma2_series);
    let c = doubling(FnSpec::Constant { value: 3.0 }, 64, 200);
    let v = variance(&c.q(), 0, 64, 8, 8).unwrap();
    assert!(v.sigma2_series.abs() < 1e-20);
    assert!(v.per_n.iter().all(|(_, s)| s.abs() < 1e-20));
}

#[test]
fn coboundary_clt_is_degenerate() {
    let cob = doubling(FnSpec::Coboundary { inner: Box::new(FnSpec::cos(1)) }, 4096, 200);
    let q = cob.q();
    let v = variance(&q, 0, 64, 32, 64).unwrap();
    let opts = CltOptions { samples: 1000, ..Default::default() };
    assert!(matches!(clt_report(&q, 0, &[16, 32], v.sigma2_series, &opts), Err(qlab::Error::Degenerate(_))));
}

#[test]
fn exact_variance_matches_sampled_variance() {
    let fx = perturbed(FnSpec::cos(1), 200, 3);
    let q = fx.q();
    let exact = quenched_variances(&q, 0, &[64]).unwrap()[0];
    let sums = sample_orbit_sums(&q, 0, &[64], 40_000, 5).unwrap();
    let s = &sums.sums[0];
    let m = s.iter().sum::<f64>() / s.len() as f64;
    let dev: Vec<f64> = s.iter().map(|x| (x - m).powi(2)).collect();
    let (var, se) = mean_se(&dev);
    // Ulam discretization error adds to the sampling error
    assert!((var - exact).abs() <= 3.0 * se + 0.02 * exact, "{var} ± {se} vs {exact}");
}

#[test]
fn perturbed_variance_converges() {
    let fx = perturbed(FnSpec::cos(1), 2200, 7);
    let v = variance(&fx.q(), 0, 1024, 32, 512).unwrap();
    assert!(v.tail_bound < 1e-6);
    assert!(v.convergence_slope.unwrap() <= -0.4, "{:?}", v.convergence_slope);
    assert!(v.envelope_c.is_finite());
}

#[test]
fn small_k_max_is_a_truncation_error() {
    let fx = perturbed(FnSpec::cos(1), 600, 7);
    assert!(matches!(variance(&fx.q(), 0, 64, 1, 64), Err(qlab::Error::Truncation(_))));
}

#[test]
fn clt_report_shapes() {
    let fx = doubling(FnSpec::cos(1), 128, 400);
    let opts = CltOptions { samples: 4000, panels: 32, ..Default::default() };
    let r = clt_report(&fx.q(), 0, &[1, 16, 256], 0.5, &opts).unwrap();
    assert_eq!(r.rows.len(), 3);
    for row in &r.rows {
        assert!((0.0..=1.0).contains(&row.ks));
        assert!(row.esseen_dominates());
        assert!((row.ks - row.ks_sigma).abs() < 1e-9);
    }
    for (_, t, v) in &r.char_fn_values {
        assert!(v.norm() <= 1.0 + 1e-12);
        if *t == 0.0 {
            assert_eq!(*v, Complex64::new(1.0, 0.0));
        }
    }
}

#[test]
fn mdp_cumulants_small_n() {
    let fx = doubling(FnSpec::cos(1), 128, 1100);
    let opts = MdpOptions {
        exponent: 0.1,
        n_grid: vec![256, 1024],
        t_grid: vec![-0.5, -0.25, 0.25, 0.5],
        sets: vec![(0.5, f64::INFINITY)],
        samples: 2000,
        seed: 4,
    };
    let r = mdp_report(&fx.q(), 0, &opts).unwrap();
    assert!(r.convex);
    assert!(r.cumulants.iter().filter(|c| c.t == 0.0).all(|c| c.value == 0.0));
    assert!(r.limit_error_at_largest() < 0.1);
    assert_eq!(r.sets[0].closure_rate, -0.125);
    assert!((r.sets[1].legendre_rate + 0.125).abs() < 0.0125);
    let bad = MdpOptions { exponent: 0.6, ..opts };
    assert!(mdp_report(&fx.q(), 0, &bad).is_err());
}

#[test]
fn lp_norm_has_gaussian_scaling() {
    let fx = doubling(FnSpec::cos(1), 256, 300);
    let (lhs, rel) = centered_lp_norm(&fx.q(), 0, 256, 4.0, 20_000, 9).unwrap();
    let target = (3.0f64 * 0.25).powf(0.25);
    assert!(rel < 0.2);
    assert!((lhs / 16.0 / target - 1.0).abs() < 0.2, "{}", lhs / 16.0);
}

#[test]
fn coboundary_lp_norm_does_not_grow() {
    let fx = doubling(FnSpec::Coboundary { inner: Box::new(FnSpec::cos(1)) }, 256, 600);
    let q = fx.q();
    let (a, _) = centered_lp_norm(&q, 0, 16, 4.0, 5000, 1).unwrap();
    let (b, _) = centered_lp_norm(&q, 0, 512, 4.0, 5000, 1).unwrap();
    assert!(b < 2.0 * a && b < 2.5, "{a} {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn char_fn_is_bounded(t in -20.0f64..20.0, n in 1usize..40) {
        let fx = doubling(FnSpec::cos(1), 64, 48);
        prop_assert!(char_fn(&fx.q(), 0, t, n).unwrap().norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn growth_fit_bounds_series(a in 0.0f64..1.0, scale in 0.1f64..10.0, k in 5usize..300) {
        let w: Vec<f64> = (1..=k).map(|i| scale * (i as f64).powf(a) * (1.0 + 0.5 * (i as f64).sin())).collect();
        let g = growth_fit(&w, a, 4.0, 0.3).unwrap();
        for (i, v) in w.iter().enumerate() {
            prop_assert!(*v <= g.constant * ((i + 1) as f64).powf(a + 0.3) * (1.0 + 1e-12));
        }
    }
}
