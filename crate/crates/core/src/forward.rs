//! Forward Euler–Maruyama simulation of the controlled delay equation, cost
//! estimation and spike perturbations.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{NodeBuf, Order, ProblemSpec};
use crate::noise::{BrownianBundle, TimeGrid};

/// Open-loop control on nodes −k..N−1. `at(N)` repeats the last value.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlProcess {
    lag: usize,
    steps: usize,
    m: usize,
    dt: f64,
    values: Vec<f64>,
}

impl ControlProcess {
    /// History from η, then `f(t_i)` for i = 0..N−1; every value must lie in U.
    pub fn from_fn(spec: &ProblemSpec, f: impl Fn(f64) -> DVector<f64>) -> Result<Self> {
        let grid = spec.grid()?;
        let m = spec.dims().m;
        let total = grid.lag + grid.steps;
        let mut values = Vec::with_capacity(total * m);
        for idx in 0..total {
            let i = idx as isize - grid.lag as isize;
            let t = grid.time(i);
            let v = if i < 0 { (spec.init.eta)(t) } else { f(t) };
            if v.len() != m {
                return Err(Error::dim(if i < 0 { "eta" } else { "control" }, m, v.len()));
            }
            if !spec.controls.contains(v.as_slice()) {
                return Err(Error::ControlMembership { node: i });
            }
            values.extend_from_slice(v.as_slice());
        }
        Ok(ControlProcess {
            lag: grid.lag,
            steps: grid.steps,
            m,
            dt: grid.dt,
            values,
        })
    }

    pub fn constant(spec: &ProblemSpec, value: &[f64]) -> Result<Self> {
        let v = DVector::from_column_slice(value);
        Self::from_fn(spec, move |_| v.clone())
    }

    /// Values on nodes 0..N−1 given explicitly.
    pub fn from_nodes(spec: &ProblemSpec, nodes: &[DVector<f64>]) -> Result<Self> {
        let grid = spec.grid()?;
        if nodes.len() != grid.steps {
            return Err(Error::dim("control nodes", grid.steps, nodes.len()));
        }
        Self::from_fn(spec, |t| {
            let i = ((t / grid.dt).round() as usize).min(grid.steps - 1);
            nodes[i].clone()
        })
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// u_i for i in −k..=N.
    pub fn at(&self, i: isize) -> &[f64] {
        let i = i.min(self.steps as isize - 1);
        let idx = (i + self.lag as isize) as usize;
        &self.values[idx * self.m..(idx + 1) * self.m]
    }

    /// μ_i = u_{i−k}.
    pub fn mu(&self, i: isize) -> &[f64] {
        self.at(i - self.lag as isize)
    }

    /// Nodes in 0..N where the control differs from `other`, either in u or in μ.
    pub fn differing_nodes(&self, other: &ControlProcess) -> Vec<usize> {
        (0..=self.steps)
            .filter(|&i| {
                let i = i as isize;
                self.at(i) != other.at(i) || self.mu(i) != other.mu(i)
            })
            .collect()
    }
}

/// Spike control: `v` on [τ, τ+ε), `u_star` elsewhere; history unchanged.
pub fn spike_perturb(u_star: &ControlProcess, tau: f64, eps: f64, v: &ControlProcess) -> Result<ControlProcess> {
    let delta = u_star.lag as f64 * u_star.dt;
    if !(eps > 0.0 && eps < delta - 1e-12) {
        return Err(Error::Parameter(format!(
            "spike width ε = {eps} must lie in (0, δ = {delta})"
        )));
    }
    if v.lag != u_star.lag || v.steps != u_star.steps || v.m != u_star.m {
        return Err(Error::dim("spike value control", u_star.steps, v.steps));
    }
    let grid = TimeGrid {
        horizon: u_star.steps as f64 * u_star.dt,
        delta,
        steps: u_star.steps,
        lag: u_star.lag,
        dt: u_star.dt,
    };
    let start = grid.node(tau)?;
    let width = grid.steps_in(eps)?;
    if start + width > grid.steps {
        return Err(Error::range(
            "tau",
            format!("spike [{tau}, {}) leaves [0, T]", tau + eps),
        ));
    }
    let mut out = u_star.clone();
    let m = u_star.m;
    for i in start..start + width {
        let idx = (i + u_star.lag) * m;
        out.values[idx..idx + m].copy_from_slice(v.at(i as isize));
    }
    Ok(out)
}

/// State trajectory on nodes −k..N with distributed-delay values on 0..N.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePath {
    lag: usize,
    steps: usize,
    n: usize,
    x: Vec<f64>,
    z: Vec<f64>,
}

impl StatePath {
    pub fn zeros(grid: &TimeGrid, n: usize) -> Self {
        StatePath {
            lag: grid.lag,
            steps: grid.steps,
            n,
            x: vec![0.0; (grid.lag + grid.steps + 1) * n],
            z: vec![0.0; (grid.steps + 1) * n],
        }
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// x_i for i in −k..=N.
    pub fn x(&self, i: isize) -> &[f64] {
        let idx = (i + self.lag as isize) as usize;
        &self.x[idx * self.n..(idx + 1) * self.n]
    }

    pub(crate) fn x_mut(&mut self, i: isize) -> &mut [f64] {
        let idx = (i + self.lag as isize) as usize;
        &mut self.x[idx * self.n..(idx + 1) * self.n]
    }

    /// y_i = x_{i−k}.
    pub fn y(&self, i: usize) -> &[f64] {
        self.x(i as isize - self.lag as isize)
    }

    pub fn z(&self, i: usize) -> &[f64] {
        &self.z[i * self.n..(i + 1) * self.n]
    }

    /// Sets z_i from the current x window.
    pub(crate) fn update_z(&mut self, i: usize, weights: &DelayWeights) {
        let n = self.n;
        let win = &self.x[i * n..(i + self.lag + 1) * n];
        weights.apply(win, n, &mut self.z[i * n..(i + 1) * n]);
    }

    /// x values on nodes i−k..=i, contiguous.
    pub fn window(&self, i: usize) -> &[f64] {
        &self.x[i * self.n..(i + self.lag + 1) * self.n]
    }

    /// Writes (x_i, y_i, z_i) into `out` (length 3n).
    pub fn fill_stacked(&self, i: usize, out: &mut [f64]) {
        let n = self.n;
        out[..n].copy_from_slice(self.x(i as isize));
        out[n..2 * n].copy_from_slice(self.y(i));
        out[2 * n..].copy_from_slice(self.z(i));
    }

    pub fn stacked(&self, i: usize) -> DVector<f64> {
        let mut out = DVector::zeros(3 * self.n);
        self.fill_stacked(i, out.as_mut_slice());
        out
    }

    /// Recomputes every z_i from x with `weights`; used by the invariant checks.
    pub fn recompute_z(&self, weights: &DelayWeights) -> Vec<f64> {
        let mut out = vec![0.0; self.z.len()];
        for i in 0..=self.steps {
            weights.apply(self.window(i), self.n, &mut out[i * self.n..(i + 1) * self.n]);
        }
        out
    }

    pub fn z_values(&self) -> &[f64] {
        &self.z
    }
}

/// Trapezoid weights for ∫_{−δ}^0 e^{λθ} x(t+θ) dθ on the nodes θ = −δ..0.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayWeights {
    w: Vec<f64>,
}

impl DelayWeights {
    pub fn new(grid: &TimeGrid, lambda: f64) -> Self {
        let k = grid.lag;
        let w = (0..=k)
            .map(|j| {
                let theta = -grid.delta + j as f64 * grid.dt;
                let end = if j == 0 || j == k { 0.5 } else { 1.0 };
                end * grid.dt * (lambda * theta).exp()
            })
            .collect();
        DelayWeights { w }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// `window` holds nodes i−k..=i contiguously (n values each).
    pub fn apply(&self, window: &[f64], n: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (j, wj) in self.w.iter().enumerate() {
            let xs = &window[j * n..(j + 1) * n];
            for (o, x) in out.iter_mut().zip(xs) {
                *o += wj * x;
            }
        }
    }
}

/// Trapezoid value of ∫_{−δ}^0 e^{λθ} x(t_i+θ) dθ.
///
/// `values` holds node values starting at node `first`, n entries per node.
pub fn distributed_delay(
    values: &[f64],
    n: usize,
    first: isize,
    i: isize,
    lambda: f64,
    grid: &TimeGrid,
) -> Result<DVector<f64>> {
    let k = grid.lag as isize;
    let available = (values.len() / n) as isize;
    if i - k < first {
        return Err(Error::HistoryUnderflow(format!(
            "node {i} needs history from node {}, values start at {first}",
            i - k
        )));
    }
    if i - first >= available {
        return Err(Error::HistoryUnderflow(format!("node {i} is past the supplied values")));
    }
    let start = ((i - k - first) as usize) * n;
    let window = &values[start..start + (grid.lag + 1) * n];
    let mut out = DVector::zeros(n);
    DelayWeights::new(grid, lambda).apply(window, n, out.as_mut_slice());
    Ok(out)
}

/// Everything one path simulation needs, reused across paths.
pub(crate) struct SimContext<'a> {
    pub spec: &'a ProblemSpec,
    pub grid: TimeGrid,
    pub weights: DelayWeights,
}

impl<'a> SimContext<'a> {
    pub fn new(spec: &'a ProblemSpec, bundle: &BrownianBundle) -> Result<Self> {
        spec.check_dims()?;
        let grid = spec.grid()?;
        bundle.check_against(&grid, spec.dims().d)?;
        Ok(SimContext {
            spec,
            grid,
            weights: DelayWeights::new(&grid, spec.delay.lambda),
        })
    }

    fn check_control(&self, control: &ControlProcess) -> Result<()> {
        if control.lag != self.grid.lag {
            return Err(Error::HistoryUnderflow(format!(
                "control has {} history nodes, grid needs {}",
                control.lag, self.grid.lag
            )));
        }
        if control.steps != self.grid.steps || control.m != self.spec.dims().m {
            return Err(Error::dim("control", self.grid.steps, control.steps));
        }
        Ok(())
    }

    /// Simulates one path; returns it with its pathwise cost.
    pub fn path(&self, control: &ControlProcess, bundle: &BrownianBundle, p: usize) -> Result<(StatePath, f64)> {
        let dims = self.spec.dims();
        let n = dims.n;
        let d = dims.d;
        let g = &self.grid;
        let mut path = StatePath::zeros(g, n);
        for i in -(g.lag as isize)..=0 {
            let xi = (self.spec.init.xi)(g.time(i));
            path.x_mut(i).copy_from_slice(xi.as_slice());
        }
        let mut buf = NodeBuf::new(dims);
        let mut s = vec![0.0; 3 * n];
        let mut running = 0.0;
        let coeffs = self.spec.coeffs.as_ref();
        for i in 0..g.steps {
            path.update_z(i, &self.weights);
            path.fill_stacked(i, &mut s);
            let ii = i as isize;
            buf.fill(coeffs, g.time(ii), &s, control.at(ii), control.mu(ii), Order::Value);
            let node = buf.view();
            running += node.running() * g.dt;
            let dw = bundle.increment(p, i);
            let next = path.x_mut(ii + 1);
            for r in 0..n {
                next[r] = s[r] + node.drift()[r] * g.dt;
                for (j, w) in dw.iter().enumerate().take(d) {
                    next[r] += node.sigma(j)[r] * w;
                }
            }
            if next.iter().any(|v| !v.is_finite()) || !running.is_finite() {
                return Err(Error::Diverged { path: p, node: i + 1 });
            }
        }
        let nn = g.steps;
        path.update_z(nn, &self.weights);
        path.fill_stacked(nn, &mut s);
        let h = coeffs.terminal(&s, Order::Value).value;
        if !h.is_finite() {
            return Err(Error::Diverged { path: p, node: nn });
        }
        Ok((path, running + h))
    }
}

/// Simulated paths together with the identity of the bundle that drove them.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub paths: Vec<StatePath>,
    pub costs: Vec<f64>,
    pub bundle_id: u64,
}

pub fn simulate_sdde(spec: &ProblemSpec, control: &ControlProcess, bundle: &BrownianBundle) -> Result<PathBatch> {
    let ctx = SimContext::new(spec, bundle)?;
    ctx.check_control(control)?;
    let out: Vec<(StatePath, f64)> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| ctx.path(control, bundle, p))
        .collect::<Result<_>>()?;
    let (paths, costs) = out.into_iter().unzip();
    Ok(PathBatch {
        paths,
        costs,
        bundle_id: bundle.fingerprint(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
}

impl CostEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, stderr) = mean_stderr(xs);
        CostEstimate {
            mean,
            stderr,
            paths: xs.len(),
        }
    }
}

/// Sample mean and sample-std / sqrt(M), summed in index order.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Pathwise costs Σ l_i Δt + h(x_N, y_N, z_N), in path order.
pub fn pathwise_costs(spec: &ProblemSpec, control: &ControlProcess, bundle: &BrownianBundle) -> Result<Vec<f64>> {
    let ctx = SimContext::new(spec, bundle)?;
    ctx.check_control(control)?;
    (0..bundle.paths())
        .into_par_iter()
        .map(|p| ctx.path(control, bundle, p).map(|(_, c)| c))
        .collect()
}

pub fn evaluate_cost(spec: &ProblemSpec, control: &ControlProcess, bundle: &BrownianBundle) -> Result<CostEstimate> {
    Ok(CostEstimate::from_samples(&pathwise_costs(spec, control, bundle)?))
}
