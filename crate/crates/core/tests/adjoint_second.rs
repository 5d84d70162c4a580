mod common;

use std::collections::BTreeMap;

use common::*;
use nalgebra::DMatrix;
use sdde_mp::adjoint1::{deterministic_trace, solve_first_adjoint_deterministic};
use sdde_mp::adjoint2::*;
use sdde_mp::forward::ControlProcess;
use sdde_mp::scenarios::{builtin, LinearDelayModel, BUILTIN};
use sdde_mp::Error;

fn lq_kernels(steps: usize, overrides: &[(&str, f64)]) -> (sdde_mp::scenarios::Scenario, SecondOrderKernels) {
    let p = overrides.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let sc = builtin("lq-scalar", &p, steps).unwrap();
    let (_, batch) = run(&sc.spec, &sc.reference, 1, 2);
    let k = kernels_along(&sc.spec, &sc.reference, &batch).unwrap();
    (sc, k)
}

#[test]
fn lq_ode_oracles() {
    let ode = solve_lq_p_ode(&LqParams::scalar(0.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.25), 1e-3).unwrap();
    assert!((ode.at(0.9).unwrap()[(0, 0)] - 1.1).abs() < 1e-6);
    assert!((ode.at(0.75).unwrap()[(0, 0)] - 1.25).abs() < 1e-6);
    assert!((ode.at(0.5).unwrap()[(0, 0)] - 2.0).abs() < 1e-6);
    assert!(matches!(ode.at(0.5005), Err(Error::Alignment(_))));

    let flat = solve_lq_p_ode(&LqParams::scalar(0.0, 0.0, 0.0, 0.0, 1.5, 1.0, 0.25), 1e-2).unwrap();
    assert!(flat.values.iter().all(|m| m[(0, 0)] == 1.5));

    assert!(matches!(
        solve_lq_p_ode(&LqParams::scalar(0.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.25), 0.3),
        Err(Error::Alignment(_))
    ));
}

#[test]
fn zero_curvature_gives_zero_kernels() {
    let mut m = LinearDelayModel::scalar();
    m.a.copy_from_slice(&[0.4, 0.3, -0.2]);
    m.bu[(0, 0)] = 1.0;
    m.h1[0] = 1.0;
    let spec = scalar_spec(
        m,
        Setup {
            steps: 40,
            ..Setup::default()
        },
    );
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let (_, batch) = run(&spec, &u, 1, 1);
    let k = kernels_along(&spec, &u, &batch).unwrap();
    assert_eq!(k.p1.amax(), 0.0);
    assert_eq!(k.off_xx_max(), 0.0);
    assert!(k.curly_p().values.iter().all(|v| v.amax() == 0.0));
    assert!(assemble_curly_p(&k).values.iter().all(|v| v.amax() == 0.0));
}

#[test]
fn lq_consistency_improves_with_n() {
    let mut errs = Vec::new();
    for steps in [200, 400] {
        let (sc, k) = lq_kernels(steps, &[]);
        let curly = assemble_curly_p(&k);
        let ode = solve_lq_p_ode(sc.lq.as_ref().unwrap(), sc.spec.grid().unwrap().dt).unwrap();
        let sup = ode.values.iter().map(|m| m.amax()).fold(0.0, f64::max);
        let d = sup_distance(&curly.values, &ode.values, 1);
        assert!(d <= 0.02 * (1.0 + sup), "N = {steps}: {d}");
        errs.push(d);
    }
    assert!(errs[1] < errs[0]);
}

#[test]
fn lq_curly_p_mid_horizon() {
    let (_, k) = lq_kernels(200, &[]);
    let v = assemble_curly_p(&k).at(100)[(0, 0)];
    assert!((v - 2.0).abs() < 0.02, "{v}");
}

#[test]
fn last_delta_ignores_delayed_costs() {
    let (_, a) = lq_kernels(200, &[]);
    let (_, b) = lq_kernels(200, &[("q11", 7.0)]);
    let (ca, cb) = (assemble_curly_p(&a), assemble_curly_p(&b));
    for r in 150..=200 {
        assert_eq!(ca.at(r), cb.at(r), "node {r}");
    }
    assert_ne!(ca.at(100), cb.at(100));
}

#[test]
fn classical_riccati_oracle_and_case_one() {
    let sc = builtin("no-delay-classical", &BTreeMap::new(), 200).unwrap();
    let (_, batch) = run(&sc.spec, &sc.reference, 1, 4);
    let tr = deterministic_trace(&sc.spec, &sc.reference, &batch, true).unwrap();
    let adj = solve_first_adjoint_deterministic(&sc.spec, &tr).unwrap();
    let pbar = solve_classical_p_bsde(&sc.spec, &tr, &adj).unwrap();
    assert!((pbar[0][(0, 0)] - std::f64::consts::E).abs() < 1e-4);

    let k = kernels_along(&sc.spec, &sc.reference, &batch).unwrap();
    assert_eq!(k.off_xx_max(), 0.0);
    let curly = assemble_curly_p(&k);
    let sup = pbar.iter().map(|m| m.amax()).fold(0.0, f64::max);
    assert!(sup_distance(&curly.values, &pbar, 1) <= 0.02 * (1.0 + sup));
}

#[test]
fn classical_solver_rejects_delay() {
    let sc = builtin("delayed-drift", &BTreeMap::new(), 100).unwrap();
    let (_, batch) = run(&sc.spec, &sc.reference, 1, 1);
    let tr = deterministic_trace(&sc.spec, &sc.reference, &batch, false).unwrap();
    let adj = solve_first_adjoint_deterministic(&sc.spec, &tr).unwrap();
    assert!(matches!(
        solve_classical_p_bsde(&sc.spec, &tr, &adj),
        Err(Error::Mode(_))
    ));
}

#[test]
fn control_delay_only_has_no_p4_cross_block() {
    let mut m = LinearDelayModel::scalar();
    m.a[(0, 0)] = 0.5;
    m.bmu[(0, 0)] = 1.0;
    m.c[0][(0, 0)] = 0.2;
    m.dmu[0][(0, 0)] = 0.3;
    m.l[(0, 0)] = 1.0;
    m.h[(0, 0)] = 1.0;
    let spec = scalar_spec(
        m,
        Setup {
            steps: 100,
            ..Setup::default()
        },
    );
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let (_, batch) = run(&spec, &u, 1, 4);
    let k = kernels_along(&spec, &u, &batch).unwrap();
    assert_eq!(k.p4_block_max(0, 1), 0.0);
    assert!(k.p4_block_max(0, 0) > 0.0);
}

#[test]
fn curvature_symmetric_and_compact_identity() {
    let mut m = LinearDelayModel::zeros(sdde_mp::model::Dims::new(2, 1, 1));
    m.a = DMatrix::from_row_slice(2, 6, &[0.1, 0.4, 0.3, 0.0, 0.2, 0.1, -0.2, 0.1, 0.0, 0.5, 0.0, 0.3]);
    m.c[0] = DMatrix::from_row_slice(2, 6, &[0.2, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.3, 0.0, 0.1, 0.2, 0.0]);
    m.bu[(0, 0)] = 1.0;
    m.l = DMatrix::from_fn(6, 6, |i, j| if i == j { 1.0 + i as f64 * 0.1 } else { 0.05 });
    m.h = DMatrix::from_fn(6, 6, |i, j| if i == j { 0.5 } else { 0.02 * (i + j) as f64 });
    let spec = sdde_mp::model::ProblemSpec {
        delay: sdde_mp::model::DelayModel::new(0.25, 0.8, 1.0).unwrap(),
        coeffs: std::sync::Arc::new(m),
        controls: sdde_mp::model::ControlSet::finite_scalar(&[0.0, 1.0]),
        init: sdde_mp::model::InitialPaths::constant(nalgebra::DVector::from_vec(vec![0.0, 0.0]), s1(0.0)),
        steps: 80,
    };
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let (_, batch) = run(&spec, &u, 1, 1);
    let k = kernels_along(&spec, &u, &batch).unwrap();
    let full = k.curly_p();
    let compact = k.compact_curly_p();
    for r in 0..=80 {
        let a = full.at(r);
        assert!(
            (a - a.transpose()).amax() <= 1e-10 * (1.0 + a.amax()),
            "asymmetric at {r}"
        );
        assert!(
            (a - compact.at(r)).amax() <= 1e-10 * (1.0 + a.amax()),
            "compact mismatch at {r}"
        );
    }
    assert_eq!(k.p1, k.p1.transpose());
    for r in 0..80 {
        assert_eq!(k.p4(r, r), k.p4(r, r).transpose());
        if r > 0 {
            assert_eq!(k.p4(r - 1, r), k.p4(r, r - 1).transpose());
        }
    }
}

#[test]
fn kernels_need_deterministic_curvature() {
    let sc = builtin("nonlinear-delay", &BTreeMap::new(), 40).unwrap();
    let (_, batch) = run(&sc.spec, &sc.reference, 1, 8);
    assert!(matches!(
        kernels_along(&sc.spec, &sc.reference, &batch),
        Err(Error::Mode(_))
    ));
    // a single path is always deterministic
    let (_, one) = run(&sc.spec, &sc.reference, 1, 1);
    assert!(kernels_along(&sc.spec, &sc.reference, &one).is_ok());
}

#[test]
fn raw_form_close_to_assembled() {
    for name in BUILTIN {
        if *name == "nonlinear-delay" {
            continue;
        }
        let sc = builtin(name, &BTreeMap::new(), 100).unwrap();
        let (_, batch) = run(&sc.spec, &sc.reference, 1, 2);
        let k = kernels_along(&sc.spec, &sc.reference, &batch).unwrap();
        let curly = assemble_curly_p(&k);
        for tau in [0, 25, 50, 99] {
            let raw = k.raw_matrix(tau);
            let d = (raw - curly.at(tau)).amax();
            assert!(d <= 10.0 * 0.01 * (1.0 + curly.at(tau).amax()), "{name} at {tau}: {d}");
        }
    }
}
