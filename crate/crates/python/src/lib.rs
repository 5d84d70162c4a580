//! Python bindings: built-in scenarios, simulation, adjoints, curvature and checks.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sdde_mp::adjoint1::{duality_check, solve_first_adjoint, AdjointMode, FirstOrderAdjoint};
use sdde_mp::adjoint2::{assemble_curly_p, kernels_along, solve_lq_p_ode, LqParams};
use sdde_mp::forward::{simulate_sdde, spike_perturb, PathBatch};
use sdde_mp::mp::{max_condition_scan, spike_expansion_check};
use sdde_mp::noise::{generate, generate_antithetic, BrownianBundle};
use sdde_mp::scenarios::{builtin, defaults, BUILTIN};
use sdde_mp::variational::empirical_order_check;

create_exception!(sddemp, SddeMpError, PyException);

fn err(e: sdde_mp::Error) -> PyErr {
    SddeMpError::new_err(e.to_string())
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|a| (0..m.ncols()).map(|b| m[(a, b)]).collect())
        .collect()
}

/// A built-in scenario on a fixed grid.
#[pyclass(module = "sddemp")]
pub struct Scenario {
    inner: sdde_mp::scenarios::Scenario,
}

#[pymethods]
impl Scenario {
    #[new]
    #[pyo3(signature = (name, params = None, steps = 200))]
    fn new(name: &str, params: Option<BTreeMap<String, f64>>, steps: usize) -> PyResult<Self> {
        let inner = builtin(name, &params.unwrap_or_default(), steps).map_err(err)?;
        Ok(Scenario { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn params(&self) -> BTreeMap<String, f64> {
        self.inner.params.clone()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.spec.steps
    }

    #[getter]
    fn dt(&self) -> PyResult<f64> {
        Ok(self.inner.spec.grid().map_err(err)?.dt)
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn optimal(&self) -> bool {
        self.inner.optimal
    }

    #[getter]
    fn has_lq_form(&self) -> bool {
        self.inner.lq.is_some()
    }

    /// (n, m, d): state, control and Brownian dimensions.
    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.spec.dims();
        (d.n, d.m, d.d)
    }

    /// Simulates the reference control on a seeded bundle.
    #[pyo3(signature = (seed, paths, antithetic = false))]
    fn simulate(&self, py: Python<'_>, seed: u64, paths: usize, antithetic: bool) -> PyResult<Simulation> {
        let sc = self.inner.clone();
        py.detach(move || {
            let grid = sc.spec.grid()?;
            let d = sc.spec.dims().d;
            let bundle = if antithetic {
                generate_antithetic(seed, &grid, paths / 2, d)?
            } else {
                generate(seed, &grid, paths, d)?
            };
            let batch = simulate_sdde(&sc.spec, &sc.reference, &bundle)?;
            Ok(Simulation { sc, bundle, batch })
        })
        .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, steps={})", self.inner.name, self.inner.spec.steps)
    }
}

/// Reference paths of a scenario together with the noise that produced them.
#[pyclass(module = "sddemp")]
pub struct Simulation {
    sc: sdde_mp::scenarios::Scenario,
    bundle: BrownianBundle,
    batch: PathBatch,
}

impl Simulation {
    fn adjoint(&self, mode: &str) -> sdde_mp::Result<FirstOrderAdjoint> {
        let solve = |m| solve_first_adjoint(&self.sc.spec, &self.sc.reference, &self.batch, &self.bundle, m);
        match mode {
            "deterministic" => solve(AdjointMode::Deterministic),
            "regression" => solve(AdjointMode::Regression),
            _ => match solve(AdjointMode::Deterministic) {
                Err(sdde_mp::Error::Mode(_)) => solve(AdjointMode::Regression),
                other => other,
            },
        }
    }

    fn times(&self) -> Vec<f64> {
        let grid = self.bundle.grid();
        (0..=grid.steps).map(|i| grid.time(i as isize)).collect()
    }
}

fn check_mode(mode: &str) -> PyResult<()> {
    match mode {
        "auto" | "deterministic" | "regression" => Ok(()),
        _ => Err(SddeMpError::new_err(format!("unknown adjoint mode {mode:?}"))),
    }
}

#[pymethods]
impl Simulation {
    #[getter]
    fn paths(&self) -> usize {
        self.batch.paths.len()
    }

    /// Pathwise costs in path order.
    #[getter]
    fn costs(&self) -> Vec<f64> {
        self.batch.costs.clone()
    }

    /// (mean, standard error) of the cost.
    fn cost(&self) -> (f64, f64) {
        self.bundle.mean_stderr(&self.batch.costs)
    }

    /// State trajectory of one path on nodes −k..N.
    fn state(&self, path: usize) -> PyResult<Vec<Vec<f64>>> {
        let p = self
            .batch
            .paths
            .get(path)
            .ok_or_else(|| SddeMpError::new_err(format!("path {path} out of range")))?;
        let (k, n) = (p.lag() as isize, p.steps() as isize);
        Ok((-k..=n).map(|i| p.x(i).to_vec()).collect())
    }

    /// First-order adjoint: mode, t, mean p, mean p̃ and the regression error of p.
    #[pyo3(signature = (mode = "auto"))]
    fn first_adjoint<'py>(&self, py: Python<'py>, mode: &str) -> PyResult<Bound<'py, PyDict>> {
        check_mode(mode)?;
        let adj = py.detach(|| self.adjoint(mode)).map_err(err)?;
        let paths = adj.paths();
        let n = self.sc.spec.dims().n;
        let mut pt = vec![vec![0.0; n]; adj.nodes()];
        for (i, row) in pt.iter_mut().enumerate() {
            for p in 0..paths {
                for (a, v) in row.iter_mut().zip(adj.p_tilde(p, i)) {
                    *a += v / paths as f64;
                }
            }
        }
        let out = PyDict::new(py);
        out.set_item(
            "mode",
            if adj.mode == AdjointMode::Deterministic {
                "deterministic"
            } else {
                "regression"
            },
        )?;
        out.set_item("t", self.times())?;
        out.set_item(
            "p",
            adj.mean_p().iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>(),
        )?;
        out.set_item("p_tilde", pt)?;
        out.set_item("p_stderr", adj.p_stderr.clone())?;
        Ok(out)
    }

    /// Assembled curvature 𝒫 on nodes 0..N as nested lists.
    fn curly_p(&self, py: Python<'_>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let k = py
            .detach(|| kernels_along(&self.sc.spec, &self.sc.reference, &self.batch))
            .map_err(err)?;
        Ok(assemble_curly_p(&k).values.iter().map(rows).collect())
    }

    /// Duality identity for a spike of width `eps` at `tau`.
    fn duality<'py>(&self, py: Python<'py>, tau: f64, eps: f64) -> PyResult<Bound<'py, PyDict>> {
        let r = py
            .detach(|| {
                let adj = self.adjoint("deterministic")?;
                let ue = spike_perturb(&self.sc.reference, tau, eps, &self.sc.spike)?;
                duality_check(&self.sc.spec, &self.sc.reference, &ue, &self.bundle, &self.batch, &adj)
            })
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("lhs", r.lhs)?;
        out.set_item("rhs", r.rhs)?;
        out.set_item("difference", r.difference)?;
        out.set_item("stderr", r.stderr_combined)?;
        Ok(out)
    }

    /// Moment estimates and fitted log-log slopes of the variations.
    fn order_check<'py>(&self, py: Python<'py>, tau: f64, eps: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let r = py
            .detach(|| {
                empirical_order_check(
                    &self.sc.spec,
                    &self.sc.reference,
                    &self.sc.spike,
                    tau,
                    &eps,
                    &self.bundle,
                )
            })
            .map_err(err)?;
        let out = PyDict::new(py);
        for (name, slope) in &r.slopes {
            out.set_item(name, (r.estimates(name), slope.unwrap_or(f64::NAN)))?;
        }
        Ok(out)
    }

    /// Spike expansion rows as dicts (tau, eps, cost_difference, prediction, residual, stderr).
    #[pyo3(signature = (taus, eps, mode = "auto"))]
    fn expansion<'py>(
        &self,
        py: Python<'py>,
        taus: Vec<f64>,
        eps: Vec<f64>,
        mode: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        check_mode(mode)?;
        let r = py
            .detach(|| {
                let adj = self.adjoint(mode)?;
                let k = kernels_along(&self.sc.spec, &self.sc.reference, &self.batch)?;
                let curly = assemble_curly_p(&k);
                let sc = &self.sc;
                spike_expansion_check(
                    &sc.spec,
                    &sc.reference,
                    &sc.spike,
                    &taus,
                    &eps,
                    &self.bundle,
                    &self.batch,
                    &adj,
                    &curly,
                    None,
                )
            })
            .map_err(err)?;
        r.rows
            .iter()
            .map(|x| {
                let d = PyDict::new(py);
                d.set_item("tau", x.tau)?;
                d.set_item("eps", x.eps)?;
                d.set_item("cost_difference", x.cost_difference)?;
                d.set_item("prediction", x.prediction)?;
                d.set_item("residual", x.residual)?;
                d.set_item("stderr", x.stderr)?;
                Ok(d)
            })
            .collect()
    }

    /// Maximum-condition scan over every node and control value.
    #[pyo3(signature = (tol = 1e-6, mode = "auto"))]
    fn scan<'py>(&self, py: Python<'py>, tol: f64, mode: &str) -> PyResult<Bound<'py, PyDict>> {
        check_mode(mode)?;
        let r = py
            .detach(|| {
                let adj = self.adjoint(mode)?;
                let curly = assemble_curly_p(&kernels_along(&self.sc.spec, &self.sc.reference, &self.batch)?);
                max_condition_scan(&self.sc.spec, &self.sc.reference, &self.batch, &adj, &curly, tol)
            })
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("passed", r.passed)?;
        out.set_item("min_value", r.min_value)?;
        out.set_item("violations", r.violations)?;
        out.set_item("delayed_exercised", r.delayed_exercised)?;
        out.set_item(
            "values",
            r.rows
                .iter()
                .map(|x| (x.tau, x.v_index, x.value, x.stderr))
                .collect::<Vec<_>>(),
        )?;
        Ok(out)
    }
}

/// Names of the built-in scenarios.
#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    BUILTIN.to_vec()
}

/// Default parameters of a built-in scenario.
#[pyfunction]
fn scenario_defaults(name: &str) -> PyResult<BTreeMap<&'static str, f64>> {
    Ok(defaults(name).map_err(err)?.into_iter().collect())
}

/// Scalar LQ curvature ODE by the method of steps; returns (t, values).
#[pyfunction]
#[pyo3(signature = (a, cbar, q00, q11, g, horizon, delta, step))]
#[allow(clippy::too_many_arguments)]
fn lq_curvature(
    a: f64,
    cbar: f64,
    q00: f64,
    q11: f64,
    g: f64,
    horizon: f64,
    delta: f64,
    step: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let sol = solve_lq_p_ode(&LqParams::scalar(a, cbar, q00, q11, g, horizon, delta), step).map_err(err)?;
    let t = (0..sol.values.len()).map(|i| i as f64 * sol.step).collect();
    Ok((t, sol.values.iter().map(|m| m[(0, 0)]).collect()))
}

#[pymodule]
fn sddemp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_defaults, m)?)?;
    m.add_function(wrap_pyfunction!(lq_curvature, m)?)?;
    m.add("SddeMpError", m.py().get_type::<SddeMpError>())?;
    Ok(())
}
