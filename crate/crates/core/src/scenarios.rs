//! Coefficient families and the named built-in scenarios.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::adjoint1::solve_first_adjoint_deterministic;
use crate::adjoint2::LqParams;
use crate::error::{Error, Result};
use crate::forward::ControlProcess;
use crate::model::{
    eval_coefficients_along, Coefficients, ControlSet, DelayModel, Dims, InitialPaths, NodeMut, Order, ProblemSpec,
    TerminalEval,
};
use crate::noise::TimeGrid;

pub type ControlCost = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Linear dynamics with a quadratic-plus-linear state cost:
///
/// b = Σ_κ A_κ s_κ + B u + B̄ μ + b₀, σʲ = Σ_κ Cʲ_κ s_κ + Dʲ u + D̄ʲ μ + σʲ₀,
/// l = ½ sᵀLs + ℓᵀs + sᵀL_u u + c(u, μ), h = ½ sᵀHs + h₁ᵀs,
///
/// with s = (x, y, z). Derivatives in s are exact; `c` may be any function of
/// the controls.
#[derive(Clone)]
pub struct LinearDelayModel {
    pub dims: Dims,
    /// [A_x A_y A_z], n × 3n
    pub a: DMatrix<f64>,
    pub bu: DMatrix<f64>,
    pub bmu: DMatrix<f64>,
    pub b0: DVector<f64>,
    /// per j: n × 3n
    pub c: Vec<DMatrix<f64>>,
    pub du: Vec<DMatrix<f64>>,
    pub dmu: Vec<DMatrix<f64>>,
    pub s0: Vec<DVector<f64>>,
    pub l: DMatrix<f64>,
    pub l1: DVector<f64>,
    /// 3n × m
    pub lu: DMatrix<f64>,
    pub control_cost: ControlCost,
    pub h: DMatrix<f64>,
    pub h1: DVector<f64>,
}

impl LinearDelayModel {
    pub fn zeros(dims: Dims) -> Self {
        let Dims { n, m, d } = dims;
        let w = 3 * n;
        LinearDelayModel {
            dims,
            a: DMatrix::zeros(n, w),
            bu: DMatrix::zeros(n, m),
            bmu: DMatrix::zeros(n, m),
            b0: DVector::zeros(n),
            c: vec![DMatrix::zeros(n, w); d],
            du: vec![DMatrix::zeros(n, m); d],
            dmu: vec![DMatrix::zeros(n, m); d],
            s0: vec![DVector::zeros(n); d],
            l: DMatrix::zeros(w, w),
            l1: DVector::zeros(w),
            lu: DMatrix::zeros(w, m),
            control_cost: Arc::new(|_, _| 0.0),
            h: DMatrix::zeros(w, w),
            h1: DVector::zeros(w),
        }
    }

    /// Scalar state, control and noise.
    pub fn scalar() -> Self {
        Self::zeros(Dims::new(1, 1, 1))
    }
}

impl Coefficients for LinearDelayModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn eval(&self, _t: f64, s: &[f64], u: &[f64], mu: &[f64], order: Order, out: &mut NodeMut<'_>) {
        let sv = DVector::from_column_slice(s);
        let uv = DVector::from_column_slice(u);
        let mv = DVector::from_column_slice(mu);
        out.drift_mut()
            .copy_from(&(&self.a * &sv + &self.bu * &uv + &self.bmu * &mv + &self.b0));
        for j in 0..self.dims.d {
            let sig = &self.c[j] * &sv + &self.du[j] * &uv + &self.dmu[j] * &mv + &self.s0[j];
            out.sigma_mut(j).copy_from(&sig);
        }
        let ls = &self.l * &sv;
        let run = 0.5 * sv.dot(&ls) + self.l1.dot(&sv) + sv.dot(&(&self.lu * &uv)) + (self.control_cost)(u, mu);
        out.set_running(run);
        if order >= Order::First {
            out.jac_b_mut().copy_from(&self.a);
            for j in 0..self.dims.d {
                out.jac_sigma_mut(j).copy_from(&self.c[j]);
            }
            out.grad_l_mut().copy_from(&(ls + &self.l1 + &self.lu * &uv));
        }
        if order >= Order::Second {
            out.hess_l_mut().copy_from(&self.l);
        }
    }

    fn terminal(&self, s: &[f64], _order: Order) -> TerminalEval {
        let sv = DVector::from_column_slice(s);
        let hs = &self.h * &sv;
        TerminalEval {
            value: 0.5 * sv.dot(&hs) + self.h1.dot(&sv),
            grad: hs + &self.h1,
            hess: self.h.clone(),
        }
    }
}

/// Scalar test problem with nonlinear state dependence:
/// b = −0.5x + 0.4 sin y + 0.3z + 0.5u, σ = 0.2 + 0.5u + 0.3 sin x,
/// l = ½x² + ½u², h = ½x².
#[derive(Clone, Copy, Debug)]
pub struct NonlinearDelay;

impl Coefficients for NonlinearDelay {
    fn dims(&self) -> Dims {
        Dims::new(1, 1, 1)
    }

    fn eval(&self, _t: f64, s: &[f64], u: &[f64], _mu: &[f64], order: Order, out: &mut NodeMut<'_>) {
        let (x, y, z) = (s[0], s[1], s[2]);
        let u = u[0];
        out.drift_mut()[0] = -0.5 * x + 0.4 * y.sin() + 0.3 * z + 0.5 * u;
        out.sigma_mut(0)[0] = 0.2 + 0.5 * u + 0.3 * x.sin();
        out.set_running(0.5 * x * x + 0.5 * u * u);
        if order >= Order::First {
            let mut jb = out.jac_b_mut();
            jb[(0, 0)] = -0.5;
            jb[(0, 1)] = 0.4 * y.cos();
            jb[(0, 2)] = 0.3;
            out.jac_sigma_mut(0)[(0, 0)] = 0.3 * x.cos();
            out.grad_l_mut()[0] = x;
        }
        if order >= Order::Second {
            out.hess_b_mut(0)[(1, 1)] = -0.4 * y.sin();
            out.hess_sigma_mut(0, 0)[(0, 0)] = -0.3 * x.sin();
            out.hess_l_mut()[(0, 0)] = 1.0;
        }
    }

    fn terminal(&self, s: &[f64], _order: Order) -> TerminalEval {
        let mut t = TerminalEval::zeros(1);
        t.value = 0.5 * s[0] * s[0];
        t.grad[0] = s[0];
        t.hess[(0, 0)] = 1.0;
        t
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN: &[&str] = &[
    "lq-scalar",
    "delayed-drift",
    "pointwise-cost",
    "no-delay-classical",
    "consumption",
    "nonlinear-delay",
    "hz-terminal",
];

/// A ready-to-run problem with its reference control and spike direction.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub spec: ProblemSpec,
    pub reference: ControlProcess,
    /// Spike value v as a constant process.
    pub spike: ControlProcess,
    /// Default spike location.
    pub tau: f64,
    /// Whether the reference is declared optimal (maximum-condition checks apply).
    pub optimal: bool,
    /// Closed-form curvature data when the problem has the LQ shape.
    pub lq: Option<LqParams>,
    pub params: BTreeMap<String, f64>,
}

/// Parameter names and defaults of a built-in scenario.
pub fn defaults(name: &str) -> Result<Vec<(&'static str, f64)>> {
    let common = |delta: f64, lambda: f64| vec![("delta", delta), ("horizon", 1.0), ("lambda", lambda)];
    let mut v = match name {
        "lq-scalar" => {
            let mut v = common(0.25, 0.0);
            v.extend([
                ("a", 0.0),
                ("b", 1.0),
                ("bbar", 0.0),
                ("cbar", 0.0),
                ("d", 0.3),
                ("dbar", 0.0),
                ("q00", 1.0),
                ("q11", 2.0),
                ("s00", 1.0),
                ("r", 1.0),
                ("g", 1.0),
                ("g_lin", 1.0),
                ("v", 1.0),
                ("tau", 0.25),
            ]);
            v
        }
        "delayed-drift" => {
            let mut v = common(0.5, 1.0);
            v.extend([
                ("ay", 1.0),
                ("bu", 1.0),
                ("sigma", 0.0),
                ("hx", 1.0),
                ("hy", 0.5),
                ("hz", 0.5),
                ("ru", 1.0),
                ("xi", 1.0),
                ("v", 1.0),
                ("tau", 0.1),
            ]);
            v
        }
        "pointwise-cost" => {
            let mut v = common(0.25, 0.5);
            v.extend([
                ("sigma", 0.3),
                ("target", 0.3),
                ("w", 1.0),
                ("xi", 1.0),
                ("v", 1.0),
                ("tau", 0.25),
            ]);
            v
        }
        "no-delay-classical" => {
            let mut v = common(0.25, 0.0);
            v.extend([
                ("bx", 0.0),
                ("sx", 1.0),
                ("hxx", 1.0),
                ("hx", 0.0),
                ("ru", 1.0),
                ("xi", 1.0),
                ("v", 1.0),
                ("tau", 0.25),
            ]);
            v
        }
        "consumption" => {
            let mut v = common(0.25, 0.5);
            v.extend([("gamma", 0.5), ("sigma", 0.2), ("xi", 1.0), ("v", 1.0), ("tau", 0.25)]);
            v
        }
        "nonlinear-delay" => {
            let mut v = common(0.25, 1.0);
            v.extend([("xi", 0.5), ("v", 1.0), ("tau", 0.25)]);
            v
        }
        "hz-terminal" => {
            let mut v = common(0.25, 1.0);
            v.extend([
                ("hx", 1.0),
                ("hy", 0.5),
                ("hz", 1.0),
                ("sigma", 0.1),
                ("xi", 1.0),
                ("v", 1.0),
                ("tau", 0.25),
            ]);
            v
        }
        other => return Err(Error::Parameter(format!("unknown scenario \"{other}\""))),
    };
    v.sort_by(|a, b| a.0.cmp(b.0));
    Ok(v)
}

fn merged(name: &str, overrides: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    let mut p: BTreeMap<String, f64> = defaults(name)?.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    for (k, v) in overrides {
        if !p.contains_key(k) {
            return Err(Error::Parameter(format!(
                "scenario \"{name}\" has no parameter \"{k}\""
            )));
        }
        if !v.is_finite() {
            return Err(Error::range(k, format!("{k} = {v}")));
        }
        p.insert(k.clone(), *v);
    }
    Ok(p)
}

fn s1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn finish(
    name: &str,
    params: BTreeMap<String, f64>,
    coeffs: Arc<dyn Coefficients>,
    controls: ControlSet,
    xi: f64,
    eta: f64,
    steps: usize,
) -> Result<(ProblemSpec, BTreeMap<String, f64>)> {
    let delay = DelayModel::new(params["delta"], params["lambda"], params["horizon"])?;
    let spec = ProblemSpec {
        delay,
        coeffs,
        controls,
        init: InitialPaths::constant(s1(xi), s1(eta)),
        steps,
    };
    spec.grid()?;
    spec.check_dims()?;
    let _ = name;
    Ok((spec, params))
}

/// Builds a named scenario on N = `steps` with parameter overrides.
pub fn builtin(name: &str, overrides: &BTreeMap<String, f64>, steps: usize) -> Result<Scenario> {
    let p = merged(name, overrides)?;
    let (spec, params, reference, optimal, lq) = match name {
        "lq-scalar" => {
            let mut m = LinearDelayModel::scalar();
            m.a[(0, 0)] = p["a"];
            m.bu[(0, 0)] = p["b"];
            m.bmu[(0, 0)] = p["bbar"];
            m.c[0][(0, 1)] = p["cbar"];
            m.du[0][(0, 0)] = p["d"];
            m.dmu[0][(0, 0)] = p["dbar"];
            m.l[(0, 0)] = p["q00"];
            m.l[(1, 1)] = p["q11"];
            m.lu[(0, 0)] = p["s00"];
            let r = p["r"];
            m.control_cost = Arc::new(move |u, _| 0.5 * r * u[0] * u[0]);
            m.h[(0, 0)] = p["g"];
            m.h1[0] = p["g_lin"];
            let lq = LqParams::scalar(p["a"], p["cbar"], p["q00"], p["q11"], p["g"], p["horizon"], p["delta"]);
            let controls = ControlSet::finite_scalar(&[-1.0, -0.5, 0.0, 0.5, 1.0]);
            let (spec, params) = finish(name, p, Arc::new(m), controls, 0.0, 0.0, steps)?;
            let reference = ControlProcess::constant(&spec, &[0.0])?;
            (spec, params, reference, false, Some(lq))
        }
        "delayed-drift" => {
            let mut m = LinearDelayModel::scalar();
            m.a[(0, 1)] = p["ay"];
            m.bu[(0, 0)] = p["bu"];
            m.s0[0][0] = p["sigma"];
            m.h1.copy_from_slice(&[p["hx"], p["hy"], p["hz"]]);
            let ru = p["ru"];
            m.control_cost = Arc::new(move |u, _| 0.5 * ru * u[0] * u[0]);
            let controls = ControlSet::finite_scalar(&[-1.0, 0.0, 1.0]);
            let xi = p["xi"];
            let (spec, params) = finish(name, p, Arc::new(m), controls, xi, 0.0, steps)?;
            let reference = ControlProcess::constant(&spec, &[0.0])?;
            (spec, params, reference, false, None)
        }
        "pointwise-cost" => {
            let mut m = LinearDelayModel::scalar();
            m.a.copy_from_slice(&[-0.5, 0.3, 0.2]);
            m.s0[0][0] = p["sigma"];
            m.h1[0] = 1.0;
            let (target, w) = (p["target"], p["w"]);
            m.control_cost = Arc::new(move |u, mu| (u[0] - target).powi(2) + w * (mu[0] - target).powi(2));
            let controls = ControlSet::finite_scalar(&[0.0, target, 1.0]);
            let xi = p["xi"];
            let (spec, params) = finish(name, p, Arc::new(m), controls, xi, target, steps)?;
            let reference = ControlProcess::constant(&spec, &[target])?;
            (spec, params, reference, true, None)
        }
        "no-delay-classical" => {
            let mut m = LinearDelayModel::scalar();
            m.a[(0, 0)] = p["bx"];
            m.bu[(0, 0)] = 1.0;
            m.c[0][(0, 0)] = p["sx"];
            m.h[(0, 0)] = p["hxx"];
            m.h1[0] = p["hx"];
            let ru = p["ru"];
            m.control_cost = Arc::new(move |u, _| 0.5 * ru * u[0] * u[0]);
            let controls = ControlSet::finite_scalar(&[-1.0, 0.0, 1.0]);
            let xi = p["xi"];
            let (spec, params) = finish(name, p, Arc::new(m), controls, xi, 0.0, steps)?;
            let reference = ControlProcess::constant(&spec, &[0.0])?;
            (spec, params, reference, false, None)
        }
        "consumption" => {
            let mut m = LinearDelayModel::scalar();
            m.a.copy_from_slice(&[1.0, 0.0, 1.0]);
            m.bu[(0, 0)] = -1.0;
            m.c[0][(0, 0)] = p["sigma"];
            m.h1[0] = -1.0;
            let gamma = p["gamma"];
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(Error::range("gamma", format!("gamma = {gamma} must lie in (0, 1)")));
            }
            m.control_cost = Arc::new(move |u, _| -u[0].max(0.0).powf(gamma) / gamma);
            let levels = [0.25, 0.5, 1.0, 1.5];
            let controls = ControlSet::finite_scalar(&levels);
            let xi = p["xi"];
            let (spec, params) = finish(name, p, Arc::new(m), controls, xi, 0.5, steps)?;
            // The adjoint does not depend on the control here, so the pointwise
            // minimiser of the Hamiltonian can be read off directly.
            let flat = ControlProcess::constant(&spec, &[0.5])?;
            let path = crate::forward::StatePath::zeros(&spec.grid()?, 1);
            let trace = eval_coefficients_along(&spec, &path, &flat)?;
            let adj = solve_first_adjoint_deterministic(&spec, &trace)?;
            let nodes: Vec<DVector<f64>> = (0..spec.steps)
                .map(|i| {
                    let pv = adj.p(0, i)[0];
                    let f = |v: f64| -v.powf(gamma) / gamma - pv * v;
                    let best = levels.iter().copied().fold((f64::INFINITY, levels[0]), |acc, v| {
                        if f(v) < acc.0 {
                            (f(v), v)
                        } else {
                            acc
                        }
                    });
                    s1(best.1)
                })
                .collect();
            let reference = ControlProcess::from_nodes(&spec, &nodes)?;
            (spec, params, reference, true, None)
        }
        "nonlinear-delay" => {
            let controls = ControlSet::finite_scalar(&[-1.0, 0.0, 1.0]);
            let xi = p["xi"];
            let (spec, params) = finish(name, p, Arc::new(NonlinearDelay), controls, xi, 0.0, steps)?;
            let reference = ControlProcess::constant(&spec, &[0.0])?;
            (spec, params, reference, false, None)
        }
        "hz-terminal" => {
            let mut m = LinearDelayModel::scalar();
            m.a.copy_from_slice(&[-0.3, 0.2, 0.4]);
            m.bu[(0, 0)] = 1.0;
            m.s0[0][0] = p["sigma"];
            m.l1.copy_from_slice(&[0.5, 0.0, 0.2]);
            m.h1.copy_from_slice(&[p["hx"], p["hy"], p["hz"]]);
            m.control_cost = Arc::new(|u, _| 0.5 * u[0] * u[0]);
            let controls = ControlSet::finite_scalar(&[-1.0, 0.0, 1.0]);
            let xi = p["xi"];
            let (spec, params) = finish(name, p, Arc::new(m), controls, xi, 0.0, steps)?;
            let reference = ControlProcess::constant(&spec, &[0.0])?;
            (spec, params, reference, false, None)
        }
        other => return Err(Error::Parameter(format!("unknown scenario \"{other}\""))),
    };
    let spike = ControlProcess::constant(&spec, &[params["v"]])?;
    let tau = params["tau"];
    TimeGrid::new(spec.delay.horizon, spec.delay.delta, steps)?.node(tau)?;
    Ok(Scenario {
        name: name.to_string(),
        spec,
        reference,
        spike,
        tau,
        optimal,
        lq,
        params,
    })
}

impl Scenario {
    pub fn with_steps(&self, steps: usize) -> Result<Scenario> {
        builtin(&self.name, &self.params, steps)
    }
}
