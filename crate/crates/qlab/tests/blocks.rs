use num_complex::Complex64;
use proptest::prelude::*;
use qlab::blocks::*;
use qlab::environment::{visiting_times, EnvPath};
use qlab::limits::Quenched;
use qlab::rpf::solve_triplet;
use qlab::systems::{make_circle_family, CircleFiber, FiberedSystem, FnSpec, RandomFunction, Shape};
use qlab::transfer::{CocycleWindow, Discretization};

fn perturbed() -> (FiberedSystem, EnvPath) {
    let fibers = vec![
        CircleFiber { k: 2, eps: 0.08, shape: Shape::Sin, mode: 1 },
        CircleFiber { k: 3, eps: 0.05, shape: Shape::Cos, mode: 1 },
    ];
    let sys = make_circle_family(fibers, 1.0).unwrap();
    let states: Vec<usize> = (0..600).map(|i| ((i * 7 + i / 3) % 5 == 0) as usize).collect();
    (sys, EnvPath { offset: -200, states })
}

#[test]
fn joined_blocks_reproduce_base_triplet() {
    let (sys, path) = perturbed();
    let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
    let f = RandomFunction::uniform(FnSpec::cos(1));
    let zero = Complex64::new(0.0, 0.0);
    let raw = CocycleWindow::build(&sys, &path, &phi, &Discretization::Ulam { cells: 96 }, -150, 500, zero, None).unwrap();
    let t = solve_triplet(&raw, 60, 1e-10).unwrap();
    let w = t.normalized_window(&raw).unwrap();
    let tail = EnvPath { offset: 0, states: path.states[200..].to_vec() };
    let visits = visiting_times(&tail, &[true, true], "all").unwrap();
    let c1 = fit_decay_constant(&w, &t, 0, &visits.visit_indices, 2.0, 0.5, 1.0, 4, 6).unwrap();
    let sched = build_schedule(c1, 2.0, 0.5, 0.1, 40).unwrap();
    let bc = induce(&w, 1.0, &t, 0, &visits, &sched, 1.0, 0.0, 4).unwrap();
    assert!(bc.count() >= 4);
    assert!(bc.eps0_contraction_holds(), "worst ratio {}", bc.worst_eps0_ratio());

    let probe = w.twisted(&sys, &path, &phi, &f, Complex64::new(0.01, 0.0)).unwrap();
    let k = measure_constants(&sys, &path, &bc, &probe, &f, 0.5, 2.0, 0.01).unwrap();
    assert!(k.radius(0.1, 3) > 0.0 && k.radius(0.1, 3) < k.radius(0.1, 1));
    let rep = block_rpf(&sys, &path, &phi, &f, &w, &bc, &k, 3, 8, 6).unwrap();
    assert_eq!(rep.triplets.len(), 17);
    assert!(rep.z0_deviation < 1e-8);
    assert!(rep.max_normalization_residual < 1e-8);
    assert!(rep.max_ratio <= 0.2);
    assert!(rep.derivative_error < 1e-4);
    for tr in &rep.triplets {
        assert!(tr.eigen_residual < 1e-10 && tr.dual_residual < 1e-10);
    }

    let q = Quenched::new(&sys, &path, &phi, &f, &w, &t).unwrap();
    let m = moment_bound_check(&q, &bc, &k, 2, 64, 4.0, 4000, 3).unwrap();
    assert!(m.stable && m.holds(), "{m:?}");
    let zero = RandomFunction::zero();
    let q0 = Quenched::new(&sys, &path, &phi, &zero, &w, &t).unwrap();
    let m0 = moment_bound_check(&q0, &bc, &k, 2, 64, 4.0, 100, 3).unwrap();
    assert_eq!(m0.lhs, 0.0);
    assert!(moment_bound_check(&q, &bc, &k, 2, 64, 2.0, 100, 3).is_err());
}

#[test]
fn joined_operators_switch_after_cut() {
    let (sys, path) = perturbed();
    let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
    let f = RandomFunction::uniform(FnSpec::cos(1));
    let zero = Complex64::new(0.0, 0.0);
    let raw = CocycleWindow::build(&sys, &path, &phi, &Discretization::Ulam { cells: 32 }, -100, 300, zero, None).unwrap();
    let t = solve_triplet(&raw, 40, 1e-10).unwrap();
    let w = t.normalized_window(&raw).unwrap();
    let tail = EnvPath { offset: 0, states: path.states[200..].to_vec() };
    let visits = visiting_times(&tail, &[true, true], "all").unwrap();
    let sched = build_schedule(1.0, 2.0, 0.5, 0.1, 20).unwrap();
    let bc = induce(&w, 1.0, &t, 0, &visits, &sched, 1.0, 0.0, 3).unwrap();
    let tw = w.twisted(&sys, &path, &phi, &f, Complex64::new(0.0, 0.1)).unwrap();
    let ops = joined_operators(&bc, &tw, 1).unwrap();
    assert_eq!(ops.len(), bc.count());
    assert!(ops[0].dense() != bc.plain[0].dense());
    for (op, plain) in ops.iter().zip(&bc.plain).skip(2) {
        assert_eq!(op.dense(), plain.dense());
    }
    // a single block is the composition of its fibers
    let direct = w.compose(bc.block_start(1), bc.block_len(1)).unwrap();
    assert_eq!(direct.dense(), bc.plain[1].dense());
}

#[test]
fn unnormalized_window_is_rejected() {
    let (sys, path) = perturbed();
    let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
    let raw = CocycleWindow::build(&sys, &path, &phi, &Discretization::Ulam { cells: 16 }, -100, 300, Complex64::new(0.0, 0.0), None).unwrap();
    let t = solve_triplet(&raw, 40, 1e-10).unwrap();
    let tail = EnvPath { offset: 0, states: path.states[200..].to_vec() };
    let visits = visiting_times(&tail, &[true, true], "all").unwrap();
    let sched = build_schedule(1.0, 2.0, 0.5, 0.1, 20).unwrap();
    assert!(induce(&raw, 1.0, &t, 0, &visits, &sched, 1.0, 0.0, 3).is_err());
}

#[test]
fn sandwich_grid_to_ten_thousand() {
    for c1 in [1.0, 4.0, 16.0] {
        for beta in [1.5, 2.0, 3.0] {
            for frac in [0.25, 0.5] {
                let s = build_schedule(c1, beta, frac * beta, 0.1, 10_000).unwrap();
                assert!(s.sandwich_holds(), "C1={c1} β={beta} ε={}β: {} {}", frac, s.lower_ratio, s.upper_ratio);
            }
        }
    }
}

#[test]
fn overflowing_schedule_is_an_error() {
    assert!(build_schedule(50.0, 1.0, 0.95, 0.01, 10_000).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_sandwich_holds(c1 in 1.0f64..50.0, beta in 1.0f64..4.0, frac in 0.05f64..0.6, eps0 in 0.01f64..0.169) {
        let s = build_schedule(c1, beta, frac * beta, eps0, 500).unwrap();
        prop_assert!(s.sandwich_holds());
        prop_assert!(s.n[1..].windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn big_l_inverts_ell(step in 1usize..5, n in 0usize..400) {
        let s = build_schedule(1.0, 2.0, 1.0, 0.1, 12).unwrap();
        let visits: Vec<usize> = (1..=600).map(|k| step * k).collect();
        let idx = induced_index(&visits, &s, 1.0, 0.0).unwrap();
        let l = idx.big_l(n);
        prop_assert!(idx.ell[l] <= n);
        prop_assert!(l + 1 >= idx.ell.len() || idx.ell[l + 1] > n);
    }
}
