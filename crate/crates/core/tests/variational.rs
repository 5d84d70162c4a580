mod common;

use std::collections::BTreeMap;

use common::*;
use sdde_mp::forward::{spike_perturb, ControlProcess};
use sdde_mp::model::eval_coefficients_along;
use sdde_mp::scenarios::{builtin, LinearDelayModel, BUILTIN};
use sdde_mp::variational::*;
use std::sync::Arc;

#[test]
fn identity_spike_has_no_variation() {
    let sc = builtin("nonlinear-delay", &BTreeMap::new(), 100).unwrap();
    let (bundle, batch) = run(&sc.spec, &sc.reference, 1, 3);
    let same = spike_perturb(&sc.reference, 0.25, 0.1, &sc.reference).unwrap();
    for pair in simulate_variations(&sc.spec, &sc.reference, &same, &bundle, &batch).unwrap() {
        for i in 0..=100 {
            assert_eq!(pair.x1.x(i)[0], 0.0);
            assert_eq!(pair.x2.x(i)[0], 0.0);
        }
    }
    for lifted in simulate_lifted(&sc.spec, &sc.reference, &same, &bundle, &batch).unwrap() {
        assert!(lifted.x1(100).iter().all(|v| *v == 0.0));
    }
    let r = empirical_order_check(&sc.spec, &sc.reference, &sc.reference, 0.25, &[0.1, 0.05], &bundle).unwrap();
    assert!(r.rows.iter().all(|row| row.estimate == 0.0));
}

#[test]
fn pure_integrator() {
    let mut m = LinearDelayModel::scalar();
    m.bu[(0, 0)] = 1.0;
    let spec = scalar_spec(m, Setup::default());
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let v = ControlProcess::constant(&spec, &[1.0]).unwrap();
    let ue = spike_perturb(&u, 0.3, 0.1, &v).unwrap();
    let (bundle, batch) = run(&spec, &u, 1, 1);
    let pair = &simulate_variations(&spec, &u, &ue, &bundle, &batch).unwrap()[0];
    assert!((pair.x1.x(200)[0] - 0.1).abs() < 1e-12);
}

#[test]
fn delayed_integrator_oracle() {
    // x1 = ε on [0.15, 0.6], then grows by ∫ x1(s − 0.5) ds: 0.05 + 0.00125 + 0.0175
    let spec = scalar_spec(
        delayed_drift(true),
        Setup {
            delta: 0.5,
            steps: 2000,
            ..Setup::default()
        },
    );
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let v = ControlProcess::constant(&spec, &[1.0]).unwrap();
    let ue = spike_perturb(&u, 0.1, 0.05, &v).unwrap();
    let (bundle, batch) = run(&spec, &u, 1, 1);
    let pair = &simulate_variations(&spec, &u, &ue, &bundle, &batch).unwrap()[0];
    let x1 = pair.x1.x(2000)[0];
    assert!((x1 - 0.06875).abs() < 1e-3, "x1(T) = {x1}");
}

#[test]
fn wrong_bundle_rejected() {
    let sc = builtin("nonlinear-delay", &BTreeMap::new(), 100).unwrap();
    let (_, batch) = run(&sc.spec, &sc.reference, 1, 3);
    let (other, _) = run(&sc.spec, &sc.reference, 2, 3);
    let ue = spike_perturb(&sc.reference, 0.25, 0.1, &sc.spike).unwrap();
    assert!(matches!(
        simulate_variations(&sc.spec, &sc.reference, &ue, &other, &batch),
        Err(sdde_mp::Error::BundleIdentity(_))
    ));
}

#[test]
fn kernel_structure() {
    let sc = builtin("nonlinear-delay", &BTreeMap::new(), 100).unwrap();
    let spec = sc.spec.with_lambda(0.0);
    let (_, batch) = run(&spec, &sc.reference, 1, 1);
    let path = &batch.paths[0];
    let trace = eval_coefficients_along(&spec, path, &sc.reference).unwrap();
    let ue = spike_perturb(&sc.reference, 0.25, 0.1, &sc.spike).unwrap();
    let k = build_kernels(&spec, &trace, path, &sc.reference, &ue).unwrap();
    for (i, m) in [(10, 3), (60, 10), (60, 40), (100, 74), (100, 75), (100, 99)] {
        let a = k.a(i, m);
        assert_eq!((a[(2, 0)], a[(2, 1)], a[(2, 2)]), (1.0, -1.0, 0.0));
        let c = k.c(0, i, m);
        assert!(c.row(2).iter().all(|v| *v == 0.0));
        assert_eq!(k.b(i, m)[2], 0.0);
        assert_eq!(k.d(0, i, m)[2], 0.0);
        let far = i - m > 25;
        for col in 0..3 {
            let expect = if far { a[(0, col)] } else { 0.0 };
            assert_eq!(a[(1, col)], expect, "A middle row at ({i}, {m})");
            let expect = if far { c[(0, col)] } else { 0.0 };
            assert_eq!(c[(1, col)], expect);
        }
    }
}

#[test]
fn zero_sigma_difference_zeroes_d() {
    let mut m = LinearDelayModel::scalar();
    m.bu[(0, 0)] = 1.0;
    m.s0[0][0] = 0.4;
    let spec = scalar_spec(m, Setup::default());
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let v = ControlProcess::constant(&spec, &[1.0]).unwrap();
    let ue = spike_perturb(&u, 0.3, 0.1, &v).unwrap();
    let (_, batch) = run(&spec, &u, 1, 1);
    let trace = eval_coefficients_along(&spec, &batch.paths[0], &u).unwrap();
    let k = build_kernels(&spec, &trace, &batch.paths[0], &u, &ue).unwrap();
    for m in 0..200 {
        assert!(k.d(0, 150, m).iter().all(|v| *v == 0.0));
    }
    assert_eq!(k.b(150, 65)[0], 1.0);
}

#[test]
fn lift_matches_direct_route_on_every_builtin() {
    for name in BUILTIN {
        let sc = builtin(name, &BTreeMap::new(), 100).unwrap();
        let (bundle, batch) = run(&sc.spec, &sc.reference, 4, 8);
        let ue = spike_perturb(&sc.reference, sc.tau, 0.1, &sc.spike).unwrap();
        let pairs = simulate_variations(&sc.spec, &sc.reference, &ue, &bundle, &batch).unwrap();
        let lifted = simulate_lifted(&sc.spec, &sc.reference, &ue, &bundle, &batch).unwrap();
        let dt = sc.spec.grid().unwrap().dt;
        for (l, p) in lifted.iter().zip(&pairs) {
            let (dist, max_x1) = lift_distance(l, p);
            assert!(dist <= 5.0 * dt * (1.0 + max_x1), "{name}: {dist}");
            // y-block stays zero before δ
            for i in 0..=sc.spec.grid().unwrap().lag {
                assert_eq!(l.x1(i)[1], 0.0);
            }
        }
    }
}

#[test]
fn auxiliary_process_endpoints() {
    let sc = builtin("nonlinear-delay", &BTreeMap::new(), 100).unwrap();
    let (bundle, batch) = run(&sc.spec, &sc.reference, 1, 1);
    let path = &batch.paths[0];
    let grid = sc.spec.grid().unwrap();
    let trace = eval_coefficients_along(&sc.spec, path, &sc.reference).unwrap();
    let ue = spike_perturb(&sc.reference, 0.25, 0.1, &sc.spike).unwrap();
    let k = build_kernels(&sc.spec, &trace, path, &sc.reference, &ue).unwrap();
    let lifted = simulate_lifted_path(&k, &bundle, 0);
    let aux = auxiliary_process(&k, &lifted, &bundle, 0, &grid, 0.8).unwrap();
    assert!(aux[0].iter().all(|v| *v == 0.0));
    let last = aux.last().unwrap();
    for c in 0..3 {
        assert!((last[c] - lifted.x1(80)[c]).abs() < 1e-12);
    }
    assert!(auxiliary_process(&k, &lifted, &bundle, 0, &grid, 0.805).is_err());
}

#[test]
fn leibniz_identity_for_z1() {
    let sc = builtin("nonlinear-delay", &BTreeMap::new(), 400).unwrap();
    let (bundle, batch) = run(&sc.spec, &sc.reference, 1, 1);
    let ue = spike_perturb(&sc.reference, 0.25, 0.05, &sc.spike).unwrap();
    let pair = &simulate_variations(&sc.spec, &sc.reference, &ue, &bundle, &batch).unwrap()[0];
    let g = sc.spec.grid().unwrap();
    let (lam, decay) = (sc.spec.delay.lambda, sc.spec.delay.decay());
    for i in 0..g.steps {
        let lhs = pair.x1.z(i + 1)[0] - pair.x1.z(i)[0];
        let x = pair.x1.x(i as isize)[0];
        let xd = pair.x1.x(i as isize - g.lag as isize)[0];
        let rhs = (x - decay * xd - lam * pair.x1.z(i)[0]) * g.dt;
        // trapezoid endpoint error: one jump of x1 per step
        assert!((lhs - rhs).abs() <= 2.0 * g.dt.powf(1.5) * (1.0 + x.abs()), "node {i}");
    }
}

#[test]
fn control_free_expansion_is_exact() {
    let mut m = LinearDelayModel::scalar();
    m.a[(0, 0)] = -0.5;
    m.s0[0][0] = 0.3;
    m.control_cost = Arc::new(|u, _| u[0] * u[0]);
    let spec = scalar_spec(m, Setup::default());
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let v = ControlProcess::constant(&spec, &[1.0]).unwrap();
    let (bundle, _) = run(&spec, &u, 1, 50);
    for eps in [0.1, 0.05] {
        let ue = spike_perturb(&u, 0.3, eps, &v).unwrap();
        let r = expansion_residual(&spec, &u, &ue, &bundle).unwrap();
        assert!((r.cost_difference - eps).abs() < 1e-12);
        assert!(r.residual.abs() < 1e-12);
    }
    let r = expansion_residual(&spec, &u, &u, &bundle).unwrap();
    assert_eq!(r.residual, 0.0);
}
