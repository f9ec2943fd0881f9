#![allow(dead_code)]

use num_complex::Complex64;
use qlab::environment::EnvPath;
use qlab::limits::Quenched;
use qlab::rpf::{solve_triplet, RPFTriplet};
use qlab::systems::{make_circle_family, CircleFiber, FiberedSystem, FnSpec, RandomFunction, Shape};
use qlab::transfer::{CocycleWindow, Discretization};

pub struct Fixture {
    pub sys: FiberedSystem,
    pub path: EnvPath,
    pub phi: RandomFunction,
    pub f: RandomFunction,
    pub window: CocycleWindow,
    pub triplet: RPFTriplet,
}

impl Fixture {
    /// Geometric potential, window over [-burn, len + burn) of the path.
    pub fn new(sys: FiberedSystem, path: EnvPath, f: FnSpec, cells: usize, len: usize, burn: usize) -> Self {
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let f = RandomFunction::uniform(f);
        let raw = CocycleWindow::build(
            &sys,
            &path,
            &phi,
            &Discretization::Ulam { cells },
            -(2 * burn as i64),
            len + 4 * burn,
            Complex64::new(0.0, 0.0),
            None,
        )
        .unwrap();
        let triplet = solve_triplet(&raw, burn, 1e-10).unwrap();
        let window = triplet.normalized_window(&raw).unwrap();
        Fixture { sys, path, phi, f, window, triplet }
    }

    pub fn q(&self) -> Quenched<'_> {
        Quenched::new(&self.sys, &self.path, &self.phi, &self.f, &self.window, &self.triplet).unwrap()
    }
}

pub fn constant_path(len: usize, burn: usize) -> EnvPath {
    EnvPath { offset: -(3 * burn as i64), states: vec![0; len + 7 * burn] }
}

pub fn doubling(f: FnSpec, cells: usize, len: usize) -> Fixture {
    let sys = make_circle_family(vec![CircleFiber::linear(2)], 1.0).unwrap();
    Fixture::new(sys, constant_path(len, 20), f, cells, len, 20)
}

pub fn perturbed_fibers() -> Vec<CircleFiber> {
    vec![
        CircleFiber { k: 2, eps: 0.08, shape: Shape::Sin, mode: 1 },
        CircleFiber { k: 3, eps: 0.05, shape: Shape::Cos, mode: 1 },
    ]
}
