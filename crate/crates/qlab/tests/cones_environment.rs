use nalgebra::DMatrix;
use proptest::prelude::*;
use qlab::cones::{birkhoff_contraction, cone_membership, decompose, hilbert_metric, ConeSpec};
use qlab::environment::*;
use qlab::geometry::CellGeometry;
use qlab::rpf::orthant_distance;

fn positive(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n).prop_map(|v| v.into_iter().map(f64::exp).collect())
}

#[test]
fn iid_products_are_powers_of_the_mean() {
    let env = EnvironmentModel::iid(vec![0.25, 0.75], 0).unwrap();
    let e = product_expectations(&env, &[0.2, 0.6], 12);
    let m: f64 = 0.25 * 0.2 + 0.75 * 0.6;
    for (n, v) in e.iter().enumerate() {
        assert!((v - m.powi(n as i32)).abs() < 1e-14);
    }
}

#[test]
fn markov_paths_repeat_for_a_seed() {
    let env = EnvironmentModel::markov(vec![vec![0.6, 0.4], vec![0.3, 0.7]], 5).unwrap();
    let a = sample_path(&env, -10, 500, 9).unwrap();
    let b = sample_path(&env, -10, 500, 9).unwrap();
    let c = sample_path(&env, -10, 500, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states, c.states);
    assert!((env.marginal[0] - 3.0 / 7.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn positive_matrices_contract(entries in positive(36), pairs in prop::collection::vec((positive(6), positive(6)), 16)) {
        let m = DMatrix::from_vec(6, 6, entries);
        let r = birkhoff_contraction(&m, &pairs).unwrap();
        prop_assert!(r.holds(1e-9), "{r:?}");
        prop_assert!(r.max_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn orthant_cone_metric_matches_ratio_formula(f in positive(16), g in positive(16)) {
        let geom = CellGeometry::circle(16);
        let d = hilbert_metric(&f, &g, &ConeSpec::orthant(), &geom).unwrap();
        prop_assert!((d - orthant_distance(&f, &g)).abs() < 1e-12);
    }

    #[test]
    fn decomposition_pieces_lie_in_the_cone(g in prop::collection::vec(-2.0f64..2.0, 32)) {
        let geom = CellGeometry::circle(32);
        let cone = ConeSpec::log_oscillation(2.0, 1.0, 1.0, 0.5);
        let dec = decompose(&g, &cone, &geom).unwrap();
        let scale = 1.0 + g.iter().map(|v| v.abs()).fold(0.0, f64::max) * 8.0;
        prop_assert!(dec.reconstruction_error <= 4.0 * f64::EPSILON * scale);
        prop_assert!(dec.norm_sum <= dec.norm_bound + 1e-12);
        for (piece, sign) in dec.pieces.iter().zip(dec.signs) {
            if piece.iter().all(|v| *v == 0.0) {
                continue;
            }
            let p: Vec<f64> = piece.iter().map(|v| v * sign as f64).collect();
            prop_assert!(cone_membership(&p, &cone, &geom).member);
        }
    }

    #[test]
    fn product_lemma_envelope_dominates(p in 0.55f64..0.95, q in 0.55f64..0.95, g0 in 0.1f64..0.9) {
        let env = EnvironmentModel::markov(vec![vec![p, 1.0 - p], vec![1.0 - q, q]], 1).unwrap();
        let prof = mixing_bounds(&env).unwrap();
        let g = [g0, 1.0];
        let mean = env.expectation(&g);
        for (n, e) in product_expectations(&env, &g, 40).iter().enumerate() {
            prop_assert!(*e <= product_lemma_bound(&prof, mean, n) + 1e-14, "n={n}");
        }
    }

    #[test]
    fn visits_count_level_set_hits(states in prop::collection::vec(0usize..3, 1..200)) {
        let path = EnvPath { offset: 0, states: states.clone() };
        match visiting_times(&path, &[true, false, false], "zero") {
            Ok(rec) => {
                let expected: Vec<usize> = (1..states.len()).filter(|&i| states[i] == 0).collect();
                prop_assert_eq!(rec.visit_indices, expected);
            }
            Err(_) => prop_assert!(states[1..].iter().all(|&s| s != 0)),
        }
    }
}
