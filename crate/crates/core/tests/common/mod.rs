#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DVector;
use sdde_mp::forward::{simulate_sdde, ControlProcess, PathBatch};
use sdde_mp::model::{ControlSet, DelayModel, InitialPaths, ProblemSpec};
use sdde_mp::noise::{generate, BrownianBundle};
use sdde_mp::scenarios::LinearDelayModel;

pub fn s1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

pub struct Setup {
    pub delta: f64,
    pub lambda: f64,
    pub horizon: f64,
    pub xi: f64,
    pub eta: f64,
    pub controls: Vec<f64>,
    pub steps: usize,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            delta: 0.25,
            lambda: 0.0,
            horizon: 1.0,
            xi: 1.0,
            eta: 0.0,
            controls: vec![-1.0, 0.0, 1.0],
            steps: 200,
        }
    }
}

pub fn scalar_spec(model: LinearDelayModel, s: Setup) -> ProblemSpec {
    ProblemSpec {
        delay: DelayModel::new(s.delta, s.lambda, s.horizon).unwrap(),
        coeffs: Arc::new(model),
        controls: ControlSet::finite_scalar(&s.controls),
        init: InitialPaths::constant(s1(s.xi), s1(s.eta)),
        steps: s.steps,
    }
}

pub fn run(spec: &ProblemSpec, u: &ControlProcess, seed: u64, paths: usize) -> (BrownianBundle, PathBatch) {
    let grid = spec.grid().unwrap();
    let bundle = generate(seed, &grid, paths, spec.dims().d).unwrap();
    let batch = simulate_sdde(spec, u, &bundle).unwrap();
    (bundle, batch)
}

/// b = y (+ u when `with_u`), σ = 0, h = x.
pub fn delayed_drift(with_u: bool) -> LinearDelayModel {
    let mut m = LinearDelayModel::scalar();
    m.a[(0, 1)] = 1.0;
    if with_u {
        m.bu[(0, 0)] = 1.0;
    }
    m.h1[0] = 1.0;
    m
}
