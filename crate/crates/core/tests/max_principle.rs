mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use nalgebra::{DMatrix, DVector};
use sdde_mp::adjoint1::{solve_first_adjoint, AdjointMode};
use sdde_mp::adjoint2::{assemble_curly_p, kernels_along, CurlyP};
use sdde_mp::forward::ControlProcess;
use sdde_mp::model::{Dims, ProblemSpec};
use sdde_mp::mp::*;
use sdde_mp::scenarios::{builtin, LinearDelayModel};
use sdde_mp::Error;

fn two_dim() -> LinearDelayModel {
    let mut m = LinearDelayModel::zeros(Dims::new(2, 1, 1));
    m.b0 = DVector::from_vec(vec![2.0, 3.0]);
    m.s0[0] = DVector::from_vec(vec![4.0, 5.0]);
    m.control_cost = Arc::new(|_, _| 1.0);
    m
}

#[test]
fn g_oracles() {
    let m = two_dim();
    let zero = [0.0, 0.0];
    let q = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let g = eval_g(&m, 0.0, &zero, &zero, &zero, &[1.0, 0.0], &q, &[0.0], &[0.0]).unwrap();
    assert_eq!(g, 8.0);

    let mut s = LinearDelayModel::scalar();
    s.b0[0] = 2.0;
    let q0 = DMatrix::zeros(1, 1);
    assert_eq!(
        eval_g(&s, 0.0, &[0.0], &[0.0], &[0.0], &[1.0], &q0, &[0.0], &[0.0]).unwrap(),
        2.0
    );
    let mut s = LinearDelayModel::scalar();
    s.control_cost = Arc::new(|_, _| 5.0);
    assert_eq!(
        eval_g(&s, 0.0, &[0.0], &[0.0], &[0.0], &[3.0], &q0, &[0.0], &[0.0]).unwrap(),
        5.0
    );

    assert!(matches!(
        eval_g(&s, 0.0, &[0.0, 1.0], &[0.0], &[0.0], &[3.0], &q0, &[0.0], &[0.0]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn hamiltonian_oracles() {
    let mut m = LinearDelayModel::zeros(Dims::new(2, 1, 1));
    m.du[0][(0, 0)] = 1.0;
    let base = HamiltonianInputs {
        t: 0.0,
        x: vec![0.0; 2],
        y: vec![0.0; 2],
        z: vec![0.0; 2],
        p: vec![0.0; 2],
        q: DMatrix::zeros(2, 1),
        curly_p: DMatrix::identity(2, 2),
        u: vec![1.0],
        mu: vec![0.0],
        sigma_ref: DMatrix::zeros(2, 1),
    };
    assert_eq!(eval_hamiltonian(&m, &base).unwrap(), 1.0);

    let zero_p = HamiltonianInputs {
        curly_p: DMatrix::zeros(2, 2),
        ..base.clone()
    };
    assert_eq!(eval_hamiltonian(&m, &zero_p).unwrap(), 0.0);

    let g = two_dim();
    let at_ref = HamiltonianInputs {
        p: vec![1.0, 0.0],
        q: DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        sigma_ref: DMatrix::from_column_slice(2, 1, &[4.0, 5.0]),
        curly_p: DMatrix::from_element(2, 2, 3.0),
        ..base
    };
    assert_eq!(eval_hamiltonian(&g, &at_ref).unwrap(), 8.0);
}

fn control_only(cost: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, controls: Vec<f64>, eta: f64) -> ProblemSpec {
    let mut m = LinearDelayModel::scalar();
    m.a[(0, 0)] = -0.5;
    m.s0[0][0] = 0.3;
    m.control_cost = Arc::new(move |u, mu| cost(u[0], mu[0]));
    scalar_spec(
        m,
        Setup {
            controls,
            eta,
            steps: 100,
            ..Setup::default()
        },
    )
}

fn scan(spec: &ProblemSpec, cand: &ControlProcess, paths: usize) -> ScanReport {
    let (bundle, batch) = run(spec, cand, 1, paths);
    let adj = solve_first_adjoint(spec, cand, &batch, &bundle, AdjointMode::Deterministic).unwrap();
    let curly = CurlyP::zeros(1, 101);
    max_condition_scan(spec, cand, &batch, &adj, &curly, 1e-6).unwrap()
}

#[test]
fn scan_pointwise_oracle() {
    let spec = control_only(|u, _| (u - 0.3).powi(2), vec![0.0, 0.3, 1.0], 0.3);
    let cand = ControlProcess::constant(&spec, &[0.3]).unwrap();
    let r = scan(&spec, &cand, 4);
    assert!(r.passed);
    assert_eq!(r.min_value, 0.0);
    assert_eq!(r.argmin_v, 1);
    for row in &r.rows {
        match row.v_index {
            1 => assert_eq!(row.value, 0.0),
            0 => assert!((row.value - 0.09).abs() < 1e-12),
            _ => assert!((row.value - 0.49).abs() < 1e-12),
        }
    }
    assert!(!r.delayed_exercised);
}

#[test]
fn scan_delayed_oracle() {
    let spec = control_only(|u, mu| u * u + mu * mu, vec![0.0, 0.5, 1.0], 0.0);
    let cand = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let r = scan(&spec, &cand, 4);
    assert!(r.passed);
    assert_eq!(r.min_value, 0.0);
    assert!(r.delayed_exercised);
    for row in r.rows.iter().filter(|row| row.v_index == 1) {
        let expect = if row.node < 75 { 0.5 } else { 0.25 };
        assert!((row.value - expect).abs() < 1e-12, "node {}: {}", row.node, row.value);
    }

    let bad = ControlProcess::constant(&spec, &[0.5]).unwrap();
    let r = scan(&spec, &bad, 4);
    assert!(!r.passed);
    assert!(r.min_value < -1e-6);
    assert_eq!(r.argmin_v, 0);
}

#[test]
fn scan_minimum_independent_of_enumeration_order() {
    let a = control_only(|u, mu| (u - 0.5).powi(2) + mu * mu, vec![0.0, 0.5, 1.0], 0.0);
    let b = control_only(|u, mu| (u - 0.5).powi(2) + mu * mu, vec![1.0, 0.0, 0.5], 0.0);
    let ca = ControlProcess::constant(&a, &[1.0]).unwrap();
    let cb = ControlProcess::constant(&b, &[1.0]).unwrap();
    let (ra, rb) = (scan(&a, &ca, 2), scan(&b, &cb, 2));
    assert_eq!(ra.min_value, rb.min_value);
    assert_eq!(ra.argmin_node, rb.argmin_node);
}

#[test]
fn pointwise_cost_scenario_scan() {
    let sc = builtin("pointwise-cost", &BTreeMap::new(), 100).unwrap();
    let run_scan = |cand: &ControlProcess| {
        let (bundle, batch) = run(&sc.spec, cand, 7, 400);
        let adj = solve_first_adjoint(&sc.spec, cand, &batch, &bundle, AdjointMode::Regression).unwrap();
        let curly = assemble_curly_p(&kernels_along(&sc.spec, cand, &batch).unwrap());
        max_condition_scan(&sc.spec, cand, &batch, &adj, &curly, 1e-6).unwrap()
    };
    let good = run_scan(&sc.reference);
    assert!(good.passed, "min {}", good.min_value);
    assert!(good.delayed_exercised);
    let bad = run_scan(&ControlProcess::constant(&sc.spec, &[1.0]).unwrap());
    assert!(!bad.passed);
    assert!(bad.violations > 0);
}

#[test]
fn expansion_exact_for_control_free_dynamics() {
    let spec = control_only(|u, _| u * u, vec![0.0, 1.0], 0.0);
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let v = ControlProcess::constant(&spec, &[1.0]).unwrap();
    let (bundle, batch) = run(&spec, &u, 3, 100);
    let adj = solve_first_adjoint(&spec, &u, &batch, &bundle, AdjointMode::Deterministic).unwrap();
    let curly = CurlyP::zeros(1, 101);
    let r = spike_expansion_check(
        &spec,
        &u,
        &v,
        &[0.2, 0.5],
        &[0.1, 0.05],
        &bundle,
        &batch,
        &adj,
        &curly,
        None,
    )
    .unwrap();
    for row in &r.rows {
        assert!((row.prediction - row.eps).abs() < 1e-12);
        assert!((row.cost_difference - row.eps).abs() < 1e-12);
        assert!(row.residual.abs() <= 3.0 * row.stderr + 1e-12);
    }
    let same = spike_expansion_check(&spec, &u, &u, &[0.2], &[0.1], &bundle, &batch, &adj, &curly, None).unwrap();
    assert_eq!(same.rows[0].prediction, 0.0);
    assert_eq!(same.rows[0].cost_difference, 0.0);

    assert!(matches!(
        spike_expansion_check(&spec, &u, &v, &[0.2], &[0.25], &bundle, &batch, &adj, &curly, None),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn lq_expansion_residual_vanishes_faster_than_eps() {
    let sc = builtin("lq-scalar", &BTreeMap::new(), 200).unwrap();
    let (bundle, batch) = run(&sc.spec, &sc.reference, 9, 4000);
    let adj = solve_first_adjoint(&sc.spec, &sc.reference, &batch, &bundle, AdjointMode::Deterministic).unwrap();
    let k = kernels_along(&sc.spec, &sc.reference, &batch).unwrap();
    let curly = assemble_curly_p(&k);
    let r = spike_expansion_check(
        &sc.spec,
        &sc.reference,
        &sc.spike,
        &[0.25],
        &[0.04, 0.02, 0.01],
        &bundle,
        &batch,
        &adj,
        &curly,
        Some(&k),
    )
    .unwrap();
    let ratios = r.ratios(0.25);
    assert!(ratios[0] > ratios[1] && ratios[1] > ratios[2], "{ratios:?}");
    for row in &r.rows {
        let raw = row.prediction_raw.unwrap();
        assert!((raw - row.prediction).abs() <= 10.0 * 0.005, "{row:?}");
    }
}
