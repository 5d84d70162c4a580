//! Problem data: coefficient maps with their (x, y, z) derivatives, delay
//! parameters, the control set and the initial paths.
//!
//! Coefficients write into flat node buffers so that the simulation loops do
//! not allocate per node. The argument `s` passed to every map is the stacked
//! state `(x, y, z)` of length `3n`; derivative blocks are ordered the same way.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, DVectorView, DVectorViewMut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{ControlProcess, StatePath};
use crate::noise::TimeGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dims {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Brownian dimension.
    pub d: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize, d: usize) -> Self {
        Dims { n, m, d }
    }
}

/// How many derivative levels a coefficient evaluation must fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    First,
    Second,
}

/// Offsets of the coefficient blocks inside one flat node buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub dims: Dims,
    drift: usize,
    diffusion: usize,
    running: usize,
    jac_b: usize,
    hess_b: usize,
    jac_sigma: usize,
    hess_sigma: usize,
    grad_l: usize,
    hess_l: usize,
    stride: usize,
}

impl Layout {
    pub fn new(dims: Dims) -> Self {
        let Dims { n, d, .. } = dims;
        let w = 3 * n;
        let mut off = 0;
        let mut take = |len: usize| {
            let o = off;
            off += len;
            o
        };
        let drift = take(n);
        let diffusion = take(n * d);
        let running = take(1);
        let jac_b = take(n * w);
        let hess_b = take(n * w * w);
        let jac_sigma = take(d * n * w);
        let hess_sigma = take(d * n * w * w);
        let grad_l = take(w);
        let hess_l = take(w * w);
        let stride = off;
        Layout {
            dims,
            drift,
            diffusion,
            running,
            jac_b,
            hess_b,
            jac_sigma,
            hess_sigma,
            grad_l,
            hess_l,
            stride,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// Read access to one evaluated node.
#[derive(Clone, Copy)]
pub struct NodeRef<'a> {
    layout: Layout,
    data: &'a [f64],
}

macro_rules! vec_at {
    ($data:expr, $off:expr, $len:expr) => {
        DVectorView::from_slice(&$data[$off..$off + $len], $len)
    };
}

macro_rules! mat_at {
    ($data:expr, $off:expr, $r:expr, $c:expr) => {
        DMatrixView::from_slice(&$data[$off..$off + $r * $c], $r, $c)
    };
}

impl<'a> NodeRef<'a> {
    pub fn new(layout: Layout, data: &'a [f64]) -> Self {
        debug_assert_eq!(data.len(), layout.stride);
        NodeRef { layout, data }
    }

    fn n(&self) -> usize {
        self.layout.dims.n
    }

    pub fn drift(&self) -> DVectorView<'a, f64> {
        vec_at!(self.data, self.layout.drift, self.n())
    }

    pub fn diffusion(&self) -> DMatrixView<'a, f64> {
        mat_at!(self.data, self.layout.diffusion, self.n(), self.layout.dims.d)
    }

    /// Column `j` of the diffusion, i.e. σʲ.
    pub fn sigma(&self, j: usize) -> DVectorView<'a, f64> {
        let n = self.n();
        vec_at!(self.data, self.layout.diffusion + j * n, n)
    }

    pub fn running(&self) -> f64 {
        self.data[self.layout.running]
    }

    /// `[b_x b_y b_z]`, n × 3n.
    pub fn jac_b(&self) -> DMatrixView<'a, f64> {
        let n = self.n();
        mat_at!(self.data, self.layout.jac_b, n, 3 * n)
    }

    /// One n × n block of the drift Jacobian; `kappa` is 0 for x, 1 for y, 2 for z.
    pub fn b_block(&self, kappa: usize) -> DMatrixView<'a, f64> {
        let n = self.n();
        mat_at!(self.data, self.layout.jac_b + kappa * n * n, n, n)
    }

    /// Hessian of the k-th drift component, 3n × 3n.
    pub fn hess_b(&self, k: usize) -> DMatrixView<'a, f64> {
        let w = 3 * self.n();
        mat_at!(self.data, self.layout.hess_b + k * w * w, w, w)
    }

    pub fn jac_sigma(&self, j: usize) -> DMatrixView<'a, f64> {
        let n = self.n();
        mat_at!(self.data, self.layout.jac_sigma + j * 3 * n * n, n, 3 * n)
    }

    pub fn sigma_block(&self, j: usize, kappa: usize) -> DMatrixView<'a, f64> {
        let n = self.n();
        mat_at!(self.data, self.layout.jac_sigma + j * 3 * n * n + kappa * n * n, n, n)
    }

    /// Hessian of component k of σʲ.
    pub fn hess_sigma(&self, j: usize, k: usize) -> DMatrixView<'a, f64> {
        let n = self.n();
        let w = 3 * n;
        mat_at!(self.data, self.layout.hess_sigma + (j * n + k) * w * w, w, w)
    }

    pub fn grad_l(&self) -> DVectorView<'a, f64> {
        vec_at!(self.data, self.layout.grad_l, 3 * self.n())
    }

    pub fn hess_l(&self) -> DMatrixView<'a, f64> {
        let w = 3 * self.n();
        mat_at!(self.data, self.layout.hess_l, w, w)
    }

    pub fn raw(&self) -> &'a [f64] {
        self.data
    }

    /// Slice holding every κ-derivative (first and second) but no values.
    pub fn derivative_slice(&self) -> &'a [f64] {
        &self.data[self.layout.jac_b..]
    }
}

/// Write access used by coefficient implementations.
pub struct NodeMut<'a> {
    layout: Layout,
    data: &'a mut [f64],
}

macro_rules! vec_mut {
    ($data:expr, $off:expr, $len:expr) => {
        DVectorViewMut::from_slice(&mut $data[$off..$off + $len], $len)
    };
}

macro_rules! mat_mut {
    ($data:expr, $off:expr, $r:expr, $c:expr) => {
        DMatrixViewMut::from_slice(&mut $data[$off..$off + $r * $c], $r, $c)
    };
}

impl<'a> NodeMut<'a> {
    pub fn new(layout: Layout, data: &'a mut [f64]) -> Self {
        debug_assert_eq!(data.len(), layout.stride);
        NodeMut { layout, data }
    }

    fn n(&self) -> usize {
        self.layout.dims.n
    }

    pub fn dims(&self) -> Dims {
        self.layout.dims
    }

    pub fn drift_mut(&mut self) -> DVectorViewMut<'_, f64> {
        let n = self.n();
        vec_mut!(self.data, self.layout.drift, n)
    }

    pub fn sigma_mut(&mut self, j: usize) -> DVectorViewMut<'_, f64> {
        let n = self.n();
        vec_mut!(self.data, self.layout.diffusion + j * n, n)
    }

    pub fn set_running(&mut self, v: f64) {
        self.data[self.layout.running] = v;
    }

    pub fn jac_b_mut(&mut self) -> DMatrixViewMut<'_, f64> {
        let n = self.n();
        mat_mut!(self.data, self.layout.jac_b, n, 3 * n)
    }

    pub fn hess_b_mut(&mut self, k: usize) -> DMatrixViewMut<'_, f64> {
        let w = 3 * self.n();
        mat_mut!(self.data, self.layout.hess_b + k * w * w, w, w)
    }

    pub fn jac_sigma_mut(&mut self, j: usize) -> DMatrixViewMut<'_, f64> {
        let n = self.n();
        mat_mut!(self.data, self.layout.jac_sigma + j * 3 * n * n, n, 3 * n)
    }

    pub fn hess_sigma_mut(&mut self, j: usize, k: usize) -> DMatrixViewMut<'_, f64> {
        let n = self.n();
        let w = 3 * n;
        mat_mut!(self.data, self.layout.hess_sigma + (j * n + k) * w * w, w, w)
    }

    pub fn grad_l_mut(&mut self) -> DVectorViewMut<'_, f64> {
        let w = 3 * self.n();
        vec_mut!(self.data, self.layout.grad_l, w)
    }

    pub fn hess_l_mut(&mut self) -> DMatrixViewMut<'_, f64> {
        let w = 3 * self.n();
        mat_mut!(self.data, self.layout.hess_l, w, w)
    }
}

/// Owned, reusable buffer for a single node evaluation.
#[derive(Clone, Debug)]
pub struct NodeBuf {
    layout: Layout,
    data: Vec<f64>,
}

impl NodeBuf {
    pub fn new(dims: Dims) -> Self {
        let layout = Layout::new(dims);
        NodeBuf {
            layout,
            data: vec![0.0; layout.stride],
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn fill(&mut self, coeffs: &dyn Coefficients, t: f64, s: &[f64], u: &[f64], mu: &[f64], order: Order) {
        self.data.fill(0.0);
        coeffs.eval(t, s, u, mu, order, &mut NodeMut::new(self.layout, &mut self.data));
    }

    pub fn view(&self) -> NodeRef<'_> {
        NodeRef::new(self.layout, &self.data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerminalEval {
    pub value: f64,
    /// `[h_x h_y h_z]` as a column of length 3n.
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl TerminalEval {
    pub fn zeros(n: usize) -> Self {
        TerminalEval {
            value: 0.0,
            grad: DVector::zeros(3 * n),
            hess: DMatrix::zeros(3 * n, 3 * n),
        }
    }
}

/// Coefficient bundle of the control problem.
///
/// `eval` receives a zeroed buffer and must fill at least the levels requested
/// by `order`. Implementations must be pure.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> Dims;

    fn eval(&self, t: f64, s: &[f64], u: &[f64], mu: &[f64], order: Order, out: &mut NodeMut<'_>);

    fn terminal(&self, s: &[f64], order: Order) -> TerminalEval;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DelayModel {
    pub delta: f64,
    pub lambda: f64,
    pub horizon: f64,
}

impl DelayModel {
    pub fn new(delta: f64, lambda: f64, horizon: f64) -> Result<Self> {
        let d = DelayModel { delta, lambda, horizon };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::range("horizon", format!("T = {}", self.horizon)));
        }
        if !(self.delta > 0.0 && self.delta < self.horizon) {
            return Err(Error::range(
                "delta",
                format!(
                    "delta out of range: δ = {} must lie in (0, {})",
                    self.delta, self.horizon
                ),
            ));
        }
        if !self.lambda.is_finite() {
            return Err(Error::range("lambda", format!("λ = {}", self.lambda)));
        }
        Ok(())
    }

    /// e^{−λδ}
    pub fn decay(&self) -> f64 {
        (-self.lambda * self.delta).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ControlSet {
    Finite(Vec<DVector<f64>>),
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
        /// Scan points per axis.
        resolution: usize,
    },
}

const MEMBERSHIP_TOL: f64 = 1e-12;

impl ControlSet {
    pub fn finite_scalar(values: &[f64]) -> Self {
        ControlSet::Finite(values.iter().map(|&v| DVector::from_element(1, v)).collect())
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Finite(pts) => pts.first().map_or(0, |p| p.len()),
            ControlSet::Box { lower, .. } => lower.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Finite(pts) => {
                if pts.is_empty() {
                    return Err(Error::Parameter("control set is empty".into()));
                }
                let m = pts[0].len();
                for p in pts {
                    if p.len() != m {
                        return Err(Error::dim("control set", m, p.len()));
                    }
                }
            }
            ControlSet::Box {
                lower,
                upper,
                resolution,
            } => {
                if lower.len() != upper.len() {
                    return Err(Error::dim("control set", lower.len(), upper.len()));
                }
                if lower.iter().zip(upper.iter()).any(|(a, b)| a > b) || *resolution == 0 {
                    return Err(Error::Parameter("control box is empty".into()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match self {
            ControlSet::Finite(pts) => pts
                .iter()
                .any(|p| p.len() == u.len() && p.iter().zip(u).all(|(a, b)| (a - b).abs() <= MEMBERSHIP_TOL)),
            ControlSet::Box { lower, upper, .. } => {
                lower.len() == u.len()
                    && u.iter()
                        .enumerate()
                        .all(|(i, &x)| x >= lower[i] - MEMBERSHIP_TOL && x <= upper[i] + MEMBERSHIP_TOL)
            }
        }
    }

    /// Deterministic scan enumeration; boxes are gridded lexicographically
    /// with the last coordinate varying fastest.
    pub fn enumerate(&self) -> Vec<DVector<f64>> {
        match self {
            ControlSet::Finite(pts) => pts.clone(),
            ControlSet::Box {
                lower,
                upper,
                resolution,
            } => {
                let m = lower.len();
                let r = *resolution;
                let axis = |i: usize, k: usize| {
                    if r == 1 {
                        0.5 * (lower[i] + upper[i])
                    } else {
                        lower[i] + (upper[i] - lower[i]) * k as f64 / (r - 1) as f64
                    }
                };
                let total = r.pow(m as u32);
                (0..total)
                    .map(|mut idx| {
                        let mut v = DVector::zeros(m);
                        for i in (0..m).rev() {
                            v[i] = axis(i, idx % r);
                            idx /= r;
                        }
                        v
                    })
                    .collect()
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            ControlSet::Finite(pts) => pts[rng.random_range(0..pts.len())].clone(),
            ControlSet::Box { lower, upper, .. } => DVector::from_fn(lower.len(), |i, _| {
                lower[i] + (upper[i] - lower[i]) * rng.random::<f64>()
            }),
        }
    }
}

pub type PathFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Initial state path ξ and initial control path η on [−δ, 0].
#[derive(Clone)]
pub struct InitialPaths {
    pub xi: PathFn,
    pub eta: PathFn,
}

impl InitialPaths {
    pub fn new(xi: PathFn, eta: PathFn) -> Self {
        InitialPaths { xi, eta }
    }

    pub fn constant(xi: DVector<f64>, eta: DVector<f64>) -> Self {
        InitialPaths {
            xi: Arc::new(move |_| xi.clone()),
            eta: Arc::new(move |_| eta.clone()),
        }
    }
}

impl fmt::Debug for InitialPaths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "InitialPaths {{ xi(0) = {:?}, eta(0) = {:?} }}",
            (self.xi)(0.0).as_slice(),
            (self.eta)(0.0).as_slice()
        )
    }
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub delay: DelayModel,
    pub coeffs: Arc<dyn Coefficients>,
    pub controls: ControlSet,
    pub init: InitialPaths,
    /// Number of simulation steps N on [0, T].
    pub steps: usize,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("delay", &self.delay)
            .field("dims", &self.dims())
            .field("controls", &self.controls)
            .field("init", &self.init)
            .field("steps", &self.steps)
            .finish()
    }
}

impl ProblemSpec {
    pub fn dims(&self) -> Dims {
        self.coeffs.dims()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.delay.horizon, self.delay.delta, self.steps)
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        let mut s = self.clone();
        s.steps = steps;
        s
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut s = self.clone();
        s.delay.lambda = lambda;
        s
    }

    /// Checks dimensions of the initial paths and the control set.
    pub fn check_dims(&self) -> Result<()> {
        let dims = self.dims();
        let xi = (self.init.xi)(0.0);
        if xi.len() != dims.n {
            return Err(Error::dim("xi", dims.n, xi.len()));
        }
        let eta = (self.init.eta)(0.0);
        if eta.len() != dims.m {
            return Err(Error::dim("eta", dims.m, eta.len()));
        }
        if self.controls.dim() != dims.m {
            return Err(Error::dim("control set", dims.m, self.controls.dim()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub budget: usize,
    pub seed: u64,
    pub bound: f64,
    pub fd_step: f64,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            budget: 32,
            seed: 0,
            bound: 1e6,
            fd_step: 1e-5,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckLine>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckLine> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckLine {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

/// Largest violation ratio |a − fd| / (tol·(1+|a|)) seen so far, with a label.
struct FdTracker {
    tol: f64,
    worst: f64,
    label: String,
    max_first: f64,
    max_second: f64,
}

impl FdTracker {
    fn cmp(&mut self, analytic: f64, fd: f64, label: impl FnOnce() -> String) {
        let ratio = (analytic - fd).abs() / (self.tol * (1.0 + analytic.abs()));
        if ratio > self.worst || !ratio.is_finite() {
            self.worst = if ratio.is_finite() { ratio } else { f64::INFINITY };
            self.label = label();
        }
    }
}

const BLOCK_NAMES: [&str; 3] = ["x", "y", "z"];

fn block_label(c: usize, n: usize) -> String {
    format!("{}[{}]", BLOCK_NAMES[c / n], c % n)
}

/// Checks the standing assumptions that can be tested numerically.
pub fn validate_problem(spec: &ProblemSpec, probe: &ProbeConfig) -> Result<ValidationReport> {
    spec.check_dims()?;
    spec.controls.validate()?;
    let dims = spec.dims();
    let Dims { n, m: _, d } = dims;
    let w = 3 * n;
    let mut report = ValidationReport { checks: Vec::new() };

    match spec.delay.validate() {
        Ok(()) => report.push(
            "delta-range",
            true,
            format!("δ = {} in (0, {})", spec.delay.delta, spec.delay.horizon),
        ),
        Err(e) => report.push("delta-range", false, e.to_string()),
    }
    let grid = spec.grid();
    match &grid {
        Ok(g) => report.push("grid-divisibility", true, format!("δ = {}·Δt", g.lag)),
        Err(e) => report.push("grid-divisibility", false, e.to_string()),
    }

    // history controls on the grid (or a uniform probe of [−δ, 0] without one)
    let hist_times: Vec<f64> = match &grid {
        Ok(g) => (0..=g.lag).map(|i| -(i as f64) * g.dt).collect(),
        Err(_) => (0..=16).map(|i| -spec.delay.delta * i as f64 / 16.0).collect(),
    };
    let mut eta_ok = true;
    for &t in &hist_times {
        let e = (spec.init.eta)(t);
        if e.len() != dims.m {
            return Err(Error::dim("eta", dims.m, e.len()));
        }
        let x = (spec.init.xi)(t);
        if x.len() != n {
            return Err(Error::dim("xi", n, x.len()));
        }
        if !spec.controls.contains(e.as_slice()) {
            eta_ok = false;
        }
    }
    report.push(
        "eta-in-control-set",
        eta_ok,
        if eta_ok {
            "all history controls lie in U".into()
        } else {
            "eta leaves the control set".into()
        },
    );
    let term = spec.coeffs.terminal(&vec![0.0; 3 * n], Order::Second);
    if term.grad.len() != 3 * n {
        return Err(Error::dim("h gradient", 3 * n, term.grad.len()));
    }
    if term.hess.nrows() != 3 * n || term.hess.ncols() != 3 * n {
        return Err(Error::dim("h Hessian", 3 * n, term.hess.nrows()));
    }
    report.push(
        "dimension-agreement",
        true,
        format!("n = {}, m = {}, d = {}", n, dims.m, d),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let coeffs = spec.coeffs.as_ref();
    let h = probe.fd_step;
    let mut tr = FdTracker {
        tol: probe.tol,
        worst: 0.0,
        label: String::new(),
        max_first: 0.0,
        max_second: 0.0,
    };
    let mut base = NodeBuf::new(dims);
    let mut plus = NodeBuf::new(dims);
    let mut minus = NodeBuf::new(dims);
    for _ in 0..probe.budget {
        let t = spec.delay.horizon * rng.random::<f64>();
        let s: Vec<f64> = (0..w).map(|_| rng.random_range(-1.5..1.5)).collect();
        let u = spec.controls.sample(&mut rng);
        let mu = spec.controls.sample(&mut rng);
        base.fill(coeffs, t, &s, u.as_slice(), mu.as_slice(), Order::Second);
        let term = coeffs.terminal(&s, Order::Second);
        let b = base.view();
        tr.max_first = tr
            .max_first
            .max(b.jac_b().amax())
            .max(b.grad_l().amax())
            .max(term.grad.amax());
        tr.max_second = tr.max_second.max(b.hess_l().amax()).max(term.hess.amax());
        for j in 0..d {
            tr.max_first = tr.max_first.max(b.jac_sigma(j).amax());
            for k in 0..n {
                tr.max_second = tr.max_second.max(b.hess_sigma(j, k).amax());
            }
        }
        for k in 0..n {
            tr.max_second = tr.max_second.max(b.hess_b(k).amax());
        }

        for c in 0..w {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[c] += h;
            sm[c] -= h;
            plus.fill(coeffs, t, &sp, u.as_slice(), mu.as_slice(), Order::First);
            minus.fill(coeffs, t, &sm, u.as_slice(), mu.as_slice(), Order::First);
            let tp = coeffs.terminal(&sp, Order::First);
            let tm = coeffs.terminal(&sm, Order::First);
            let (p, q) = (plus.view(), minus.view());
            let fd = |a: f64, b: f64| (a - b) / (2.0 * h);
            for k in 0..n {
                tr.cmp(b.jac_b()[(k, c)], fd(p.drift()[k], q.drift()[k]), || {
                    format!("b_{} (component {k})", block_label(c, n))
                });
                for r in 0..w {
                    tr.cmp(b.hess_b(k)[(r, c)], fd(p.jac_b()[(k, r)], q.jac_b()[(k, r)]), || {
                        format!(
                            "second derivative of b (component {k}, {}, {})",
                            block_label(r, n),
                            block_label(c, n)
                        )
                    });
                }
                for j in 0..d {
                    tr.cmp(b.jac_sigma(j)[(k, c)], fd(p.sigma(j)[k], q.sigma(j)[k]), || {
                        format!("sigma^{j}_{} (component {k})", block_label(c, n))
                    });
                    for r in 0..w {
                        tr.cmp(
                            b.hess_sigma(j, k)[(r, c)],
                            fd(p.jac_sigma(j)[(k, r)], q.jac_sigma(j)[(k, r)]),
                            || format!("second derivative of sigma^{j} (component {k})"),
                        );
                    }
                }
            }
            tr.cmp(b.grad_l()[c], fd(p.running(), q.running()), || {
                format!("l_{}", block_label(c, n))
            });
            tr.cmp(term.grad[c], fd(tp.value, tm.value), || {
                format!("h_{}", block_label(c, n))
            });
            for r in 0..w {
                tr.cmp(b.hess_l()[(r, c)], fd(p.grad_l()[r], q.grad_l()[r]), || {
                    format!("l_{}{}", block_label(r, n), block_label(c, n))
                });
                tr.cmp(term.hess[(r, c)], fd(tp.grad[r], tm.grad[r]), || {
                    format!("h_{}{}", block_label(r, n), block_label(c, n))
                });
            }
        }
    }
    let consistent = tr.worst <= 1.0;
    report.push(
        "derivative-consistency",
        consistent,
        if consistent {
            format!("{} probes, worst ratio {:.3e}", probe.budget, tr.worst)
        } else {
            format!(
                "{} disagrees with its finite difference (ratio {:.3e})",
                tr.label, tr.worst
            )
        },
    );
    let bounded = tr.max_first <= probe.bound && tr.max_second <= probe.bound;
    report.push(
        "derivative-bound",
        bounded,
        format!(
            "max |first| = {:.3e}, max |second| = {:.3e}, bound {:.1e}",
            tr.max_first, tr.max_second, probe.bound
        ),
    );
    Ok(report)
}

/// Coefficients and their κ-derivatives evaluated along one (state, control) pair,
/// nodes 0..=N. Node N uses the left-continuous extension of the control.
#[derive(Clone, Debug)]
pub struct CoefficientTrace {
    layout: Layout,
    nodes: usize,
    data: Vec<f64>,
    pub terminal: TerminalEval,
}

impl CoefficientTrace {
    pub fn node(&self, i: usize) -> NodeRef<'_> {
        let s = self.layout.stride;
        NodeRef::new(self.layout, &self.data[i * s..(i + 1) * s])
    }

    /// Number of traced nodes (N + 1).
    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes == 0
    }

    pub fn dims(&self) -> Dims {
        self.layout.dims
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Largest absolute difference of all κ-derivatives, node by node, and of the
    /// terminal gradient and Hessian. Used to certify the deterministic regime.
    pub fn derivative_distance(&self, other: &CoefficientTrace, second_order_only: bool) -> f64 {
        let mut worst: f64 = 0.0;
        let (first_a, first_b) = (self.layout.jac_b, self.layout.grad_l);
        for i in 0..self.nodes.min(other.nodes) {
            let a = self.node(i).raw();
            let b = other.node(i).raw();
            for idx in first_a..self.layout.stride {
                if second_order_only && idx >= first_b && idx < self.layout.hess_l {
                    continue;
                }
                worst = worst.max((a[idx] - b[idx]).abs());
            }
        }
        if !second_order_only {
            worst = worst.max((&self.terminal.grad - &other.terminal.grad).amax());
        }
        worst.max((&self.terminal.hess - &other.terminal.hess).amax())
    }
}

/// Evaluates b, σ, l and all κ-derivatives at (x, y, z, u, μ) on every node,
/// and h with its derivatives at the terminal node.
pub fn eval_coefficients_along(
    spec: &ProblemSpec,
    path: &StatePath,
    control: &ControlProcess,
) -> Result<CoefficientTrace> {
    let dims = spec.dims();
    let grid = spec.grid()?;
    if path.lag() != grid.lag || control.lag() != grid.lag {
        return Err(Error::HistoryUnderflow(format!(
            "need {} history nodes, path has {}, control has {}",
            grid.lag,
            path.lag(),
            control.lag()
        )));
    }
    if path.steps() != grid.steps || control.steps() != grid.steps {
        return Err(Error::dim("trace grid", grid.steps, path.steps().min(control.steps())));
    }
    let layout = Layout::new(dims);
    let stride = layout.stride;
    let nodes = grid.steps + 1;
    let mut data = vec![0.0; nodes * stride];
    let mut s = vec![0.0; 3 * dims.n];
    for i in 0..nodes {
        path.fill_stacked(i, &mut s);
        let chunk = &mut data[i * stride..(i + 1) * stride];
        spec.coeffs.eval(
            grid.time(i as isize),
            &s,
            control.at(i as isize),
            control.mu(i as isize),
            Order::Second,
            &mut NodeMut::new(layout, chunk),
        );
    }
    path.fill_stacked(grid.steps, &mut s);
    let terminal = spec.coeffs.terminal(&s, Order::Second);
    Ok(CoefficientTrace {
        layout,
        nodes,
        data,
        terminal,
    })
}
