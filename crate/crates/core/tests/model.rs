mod common;

use common::*;
use nalgebra::DVector;
use sdde_mp::forward::{ControlProcess, StatePath};
use sdde_mp::model::*;
use sdde_mp::scenarios::{LinearDelayModel, NonlinearDelay};
use sdde_mp::Error;
use std::sync::Arc;

struct WrongJacobian;

impl Coefficients for WrongJacobian {
    fn dims(&self) -> Dims {
        Dims::new(1, 1, 1)
    }
    fn eval(&self, _t: f64, s: &[f64], _u: &[f64], _mu: &[f64], _o: Order, out: &mut NodeMut<'_>) {
        out.drift_mut()[0] = s[0];
    }
    fn terminal(&self, _s: &[f64], _o: Order) -> TerminalEval {
        TerminalEval::zeros(1)
    }
}

struct WrongDims;

impl Coefficients for WrongDims {
    fn dims(&self) -> Dims {
        Dims::new(1, 1, 1)
    }
    fn eval(&self, _t: f64, _s: &[f64], _u: &[f64], _mu: &[f64], _o: Order, _out: &mut NodeMut<'_>) {}
    fn terminal(&self, _s: &[f64], _o: Order) -> TerminalEval {
        TerminalEval::zeros(2)
    }
}

fn spec_with(c: Arc<dyn Coefficients>, delta: f64) -> ProblemSpec {
    ProblemSpec {
        delay: DelayModel {
            delta,
            lambda: 0.5,
            horizon: 1.0,
        },
        coeffs: c,
        controls: ControlSet::finite_scalar(&[-1.0, 0.0, 1.0]),
        init: InitialPaths::constant(s1(0.5), s1(0.0)),
        steps: 100,
    }
}

#[test]
fn validation_passes_on_consistent_problem() {
    let spec = spec_with(Arc::new(NonlinearDelay), 0.25);
    let r = validate_problem(&spec, &ProbeConfig::default()).unwrap();
    assert!(r.passed(), "{r:?}");
    let again = validate_problem(&spec, &ProbeConfig::default()).unwrap();
    assert_eq!(r, again);
}

#[test]
fn delta_out_of_range_fails() {
    let spec = spec_with(Arc::new(NonlinearDelay), 1.5);
    let r = validate_problem(&spec, &ProbeConfig::default()).unwrap();
    assert!(!r.passed());
    let line = r.check("delta-range").unwrap();
    assert!(!line.passed);
    assert!(line.detail.contains("delta out of range"));
}

#[test]
fn wrong_jacobian_fails() {
    let spec = spec_with(Arc::new(WrongJacobian), 0.25);
    let r = validate_problem(&spec, &ProbeConfig::default()).unwrap();
    assert!(!r.check("derivative-consistency").unwrap().passed);
}

#[test]
fn wrong_dimension_is_an_error() {
    let spec = spec_with(Arc::new(WrongDims), 0.25);
    match validate_problem(&spec, &ProbeConfig::default()) {
        Err(Error::Dimension { what, .. }) => assert!(what.contains('h'), "{what}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn trace_oracles() {
    let mut m = LinearDelayModel::scalar();
    m.a[(0, 0)] = 1.0;
    m.control_cost = Arc::new(|u, _| u[0] * u[0]);
    let spec = scalar_spec(
        m,
        Setup {
            xi: 2.0,
            controls: vec![3.0],
            eta: 3.0,
            ..Setup::default()
        },
    );
    let u = ControlProcess::constant(&spec, &[3.0]).unwrap();
    let (_, batch) = run(&spec, &u, 1, 1);
    // node 0 sits at the initial value x = 2
    let tr = eval_coefficients_along(&spec, &batch.paths[0], &u).unwrap();
    let first = tr.node(0);
    assert_eq!(first.drift()[0], 2.0);
    assert_eq!(first.jac_b()[(0, 0)], 1.0);
    assert_eq!(first.running(), 9.0);

    let short = StatePath::zeros(&sdde_mp::noise::TimeGrid::new(1.0, 0.5, 200).unwrap(), 1);
    assert!(matches!(
        eval_coefficients_along(&spec, &short, &u),
        Err(Error::HistoryUnderflow(_))
    ));
}

#[test]
fn delayed_state_read_from_history() {
    let spec = scalar_spec(
        delayed_drift(false),
        Setup {
            delta: 0.5,
            ..Setup::default()
        },
    );
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let (_, batch) = run(&spec, &u, 1, 1);
    let tr = eval_coefficients_along(&spec, &batch.paths[0], &u).unwrap();
    for i in 0..100 {
        assert_eq!(tr.node(i).drift()[0], 1.0);
    }
}

#[test]
fn constant_inputs_give_constant_trace() {
    let mut m = LinearDelayModel::scalar();
    m.a.copy_from_slice(&[0.3, -0.2, 0.1]);
    m.l[(0, 0)] = 1.0;
    let spec = scalar_spec(
        m,
        Setup {
            xi: 0.0,
            ..Setup::default()
        },
    );
    let u = ControlProcess::constant(&spec, &[0.0]).unwrap();
    let (_, batch) = run(&spec, &u, 1, 1);
    let tr = eval_coefficients_along(&spec, &batch.paths[0], &u).unwrap();
    let first = tr.node(0).raw().to_vec();
    for i in 1..tr.len() {
        assert_eq!(tr.node(i).raw(), &first[..]);
    }
}

#[test]
fn control_set_enumeration() {
    let fin = ControlSet::finite_scalar(&[1.0, -1.0]);
    assert_eq!(fin.enumerate(), vec![s1(1.0), s1(-1.0)]);
    assert!(fin.contains(&[-1.0]));
    assert!(!fin.contains(&[0.0]));
    let bx = ControlSet::Box {
        lower: DVector::from_vec(vec![0.0, 0.0]),
        upper: DVector::from_vec(vec![1.0, 2.0]),
        resolution: 3,
    };
    let pts = bx.enumerate();
    assert_eq!(pts.len(), 9);
    assert_eq!(pts, bx.enumerate());
    assert!(bx.contains(&[0.5, 1.5]));
    assert!(!bx.contains(&[1.5, 0.0]));
    assert!(ControlSet::Finite(vec![]).validate().is_err());
}
