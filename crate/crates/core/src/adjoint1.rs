//! First-order adjoint: the anticipated backward system for (p, q, p̃, q̃),
//! the equivalent anticipated backward Volterra form for p, and the duality
//! check against the lifted variations.
//!
//! The explicit backward sweep evaluates generators at the later node and
//! leaves the last interval without a generator term. With that convention the
//! scheme is the exact discrete adjoint of the left-endpoint Volterra sums, so
//! the duality identity holds to round-off when the kernels are deterministic.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{ControlProcess, PathBatch};
use crate::linalg::{dot, matvec_t_add};
use crate::model::{eval_coefficients_along, CoefficientTrace, NodeRef, ProblemSpec};
use crate::noise::BrownianBundle;
use crate::variational::{build_kernels, simulate_lifted_path};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjointMode {
    Deterministic,
    Regression,
}

/// (p, q, p̃, q̃) on nodes 0..N. In deterministic mode a single path is stored
/// and every accessor ignores the path index.
#[derive(Clone, Debug)]
pub struct FirstOrderAdjoint {
    pub mode: AdjointMode,
    n: usize,
    d: usize,
    nodes: usize,
    paths: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    pt: Vec<f64>,
    qt: Vec<f64>,
    /// Propagated regression standard error of p per node (zero in deterministic mode).
    pub p_stderr: Vec<f64>,
}

impl FirstOrderAdjoint {
    fn zeros(mode: AdjointMode, n: usize, d: usize, nodes: usize, paths: usize) -> Self {
        FirstOrderAdjoint {
            mode,
            n,
            d,
            nodes,
            paths,
            p: vec![0.0; paths * nodes * n],
            q: vec![0.0; paths * nodes * n * d],
            pt: vec![0.0; paths * nodes * n],
            qt: vec![0.0; paths * nodes * n * d],
            p_stderr: vec![0.0; nodes],
        }
    }

    fn path_index(&self, path: usize) -> usize {
        if self.paths == 1 {
            0
        } else {
            path
        }
    }

    fn off(&self, path: usize, i: usize) -> usize {
        (self.path_index(path) * self.nodes + i) * self.n
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn p(&self, path: usize, i: usize) -> &[f64] {
        let o = self.off(path, i);
        &self.p[o..o + self.n]
    }

    pub fn p_tilde(&self, path: usize, i: usize) -> &[f64] {
        let o = self.off(path, i);
        &self.pt[o..o + self.n]
    }

    /// qʲ at node i.
    pub fn q(&self, path: usize, i: usize, j: usize) -> &[f64] {
        let o = self.off(path, i) * self.d + j * self.n;
        &self.q[o..o + self.n]
    }

    pub fn q_tilde(&self, path: usize, i: usize, j: usize) -> &[f64] {
        let o = self.off(path, i) * self.d + j * self.n;
        &self.qt[o..o + self.n]
    }

    /// n × d matrix with columns qʲ.
    pub fn q_matrix(&self, path: usize, i: usize) -> DMatrix<f64> {
        let o = self.off(path, i) * self.d;
        DMatrix::from_column_slice(self.n, self.d, &self.q[o..o + self.n * self.d])
    }

    /// Path-averaged p per node.
    pub fn mean_p(&self) -> Vec<DVector<f64>> {
        (0..self.nodes)
            .map(|i| {
                let mut acc = DVector::zeros(self.n);
                for path in 0..self.paths {
                    acc += DVector::from_column_slice(self.p(path, i));
                }
                acc / self.paths as f64
            })
            .collect()
    }

    pub fn max_abs_q(&self) -> f64 {
        self.q.iter().chain(&self.qt).fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

/// Generators Y⁰, Y¹, Y² at one node, written into `out` (length 3n):
/// Y⁰ = l_x + b_xᵀp + Σσʲ_xᵀqʲ + p̃, Y¹ = l_y + b_yᵀp + Σσʲ_yᵀqʲ − e^{−λδ}p̃,
/// Y² = l_z + b_zᵀp + Σσʲ_zᵀqʲ − λp̃.
pub(crate) fn generators(
    node: &NodeRef<'_>,
    p: &[f64],
    q: &[f64],
    pt: &[f64],
    decay: f64,
    lambda: f64,
    out: &mut [f64],
) {
    let n = p.len();
    let d = q.len() / n;
    out.copy_from_slice(node.grad_l().as_slice());
    matvec_t_add(&node.jac_b(), p, 1.0, out);
    for j in 0..d {
        matvec_t_add(&node.jac_sigma(j), &q[j * n..(j + 1) * n], 1.0, out);
    }
    for r in 0..n {
        out[r] += pt[r];
        out[n + r] -= decay * pt[r];
        out[2 * n + r] -= lambda * pt[r];
    }
}

fn certify_deterministic(traces: &[CoefficientTrace], second_order_only: bool) -> Result<()> {
    let first = &traces[0];
    for (k, t) in traces.iter().enumerate().skip(1) {
        let dist = first.derivative_distance(t, second_order_only);
        if dist > 1e-10 {
            return Err(Error::Mode(format!(
                "coefficient derivatives differ between paths 0 and {k} (by {dist:.3e}); deterministic mode does not apply"
            )));
        }
    }
    Ok(())
}

/// Traces every path of `optimal` and checks that the derivatives agree across
/// paths; returns the trace of path 0.
pub fn deterministic_trace(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    optimal: &PathBatch,
    second_order_only: bool,
) -> Result<CoefficientTrace> {
    if optimal.paths.is_empty() {
        return Err(Error::Parameter("no reference paths".into()));
    }
    let traces: Vec<CoefficientTrace> = optimal
        .paths
        .par_iter()
        .map(|p| eval_coefficients_along(spec, p, u_star))
        .collect::<Result<_>>()?;
    certify_deterministic(&traces, second_order_only)?;
    Ok(traces.into_iter().next().expect("non-empty"))
}

/// Deterministic backward sweep along a single trace.
pub fn solve_first_adjoint_deterministic(spec: &ProblemSpec, trace: &CoefficientTrace) -> Result<FirstOrderAdjoint> {
    let grid = spec.grid()?;
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let (nn, k) = (grid.steps, grid.lag);
    let dt = grid.dt;
    let (decay, lambda) = (spec.delay.decay(), spec.delay.lambda);
    let mut adj = FirstOrderAdjoint::zeros(AdjointMode::Deterministic, n, d, nn + 1, 1);
    let hg = trace.terminal.grad.as_slice();
    let (hx, hy, hz) = (&hg[..n], &hg[n..2 * n], &hg[2 * n..]);
    let zero_q = vec![0.0; n * d];
    adj.p[nn * n..].copy_from_slice(hx);
    adj.pt[nn * n..].copy_from_slice(hz);
    // Y at nodes 0..N−1, filled as the sweep reaches them
    let mut ys = vec![0.0; nn * 3 * n];
    for m in (0..nn).rev() {
        let mut p = adj.p[(m + 1) * n..(m + 2) * n].to_vec();
        let mut pt = adj.pt[(m + 1) * n..(m + 2) * n].to_vec();
        if m + k + 1 == nn {
            for r in 0..n {
                p[r] += hy[r];
            }
        }
        if m + 1 < nn {
            let y = &ys[(m + 1) * 3 * n..(m + 2) * 3 * n];
            for r in 0..n {
                p[r] += dt * y[r];
                pt[r] += dt * y[2 * n + r];
            }
        }
        if m + k + 1 < nn {
            let y = &ys[(m + k + 1) * 3 * n..(m + k + 2) * 3 * n];
            for r in 0..n {
                p[r] += dt * y[n + r];
            }
        }
        adj.p[m * n..(m + 1) * n].copy_from_slice(&p);
        adj.pt[m * n..(m + 1) * n].copy_from_slice(&pt);
        generators(
            &trace.node(m),
            &p,
            &zero_q,
            &pt,
            decay,
            lambda,
            &mut ys[m * 3 * n..(m + 1) * 3 * n],
        );
    }
    Ok(adj)
}

/// Polynomial features of the state x up to a total degree, including the constant.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionBasis {
    pub n: usize,
    pub degree: usize,
    exponents: Vec<Vec<usize>>,
}

impl RegressionBasis {
    pub fn new(n: usize, degree: usize, paths: usize) -> Result<Self> {
        let mut exponents = Vec::new();
        let mut cur = vec![0; n];
        fn rec(var: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if var == cur.len() {
                out.push(cur.clone());
                return;
            }
            for e in 0..=left {
                cur[var] = e;
                rec(var + 1, left - e, cur, out);
            }
            cur[var] = 0;
        }
        rec(0, degree, &mut cur, &mut exponents);
        exponents.sort_by_key(|e| (e.iter().sum::<usize>(), std::cmp::Reverse(e.clone())));
        let b = RegressionBasis { n, degree, exponents };
        if b.len() * 10 > paths {
            return Err(Error::Basis(format!(
                "{} features need at least {} paths, have {paths}",
                b.len(),
                b.len() * 10
            )));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<usize>] {
        &self.exponents
    }

    /// Features of a standardized state; the constant comes first.
    pub fn features(&self, x: &[f64], active: &[bool], out: &mut [f64]) -> usize {
        let mut k = 0;
        for e in &self.exponents {
            if e.iter().zip(active).any(|(&p, &a)| p > 0 && !a) {
                continue;
            }
            out[k] = e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product();
            k += 1;
        }
        k
    }
}

/// First-order data of one path: [b_κ | σʲ_κ … | l_κ] per node and the terminal gradient.
struct PathData {
    stride: usize,
    nodes: Vec<f64>,
    terminal: Vec<f64>,
    states: Vec<f64>,
}

fn extract(trace: &CoefficientTrace, path: &crate::forward::StatePath, n: usize, d: usize) -> PathData {
    let stride = 3 * n * n * (1 + d) + 3 * n;
    let mut nodes = Vec::with_capacity(trace.len() * stride);
    let mut states = Vec::with_capacity(trace.len() * n);
    for i in 0..trace.len() {
        let node = trace.node(i);
        nodes.extend(node.jac_b().iter());
        for j in 0..d {
            nodes.extend(node.jac_sigma(j).iter());
        }
        nodes.extend_from_slice(node.grad_l().as_slice());
        states.extend_from_slice(path.x(i as isize));
    }
    PathData {
        stride,
        nodes,
        terminal: trace.terminal.grad.as_slice().to_vec(),
        states,
    }
}

impl PathData {
    /// Same generators as [`generators`], from the compact layout.
    #[allow(clippy::too_many_arguments)]
    fn generators(
        &self,
        i: usize,
        n: usize,
        d: usize,
        p: &[f64],
        q: &[f64],
        pt: &[f64],
        decay: f64,
        lambda: f64,
        out: &mut [f64],
    ) {
        let w = 3 * n;
        let base = &self.nodes[i * self.stride..(i + 1) * self.stride];
        let jb = nalgebra::DMatrixView::from_slice(&base[..n * w], n, w);
        out.copy_from_slice(&base[n * w * (1 + d)..]);
        matvec_t_add(&jb, p, 1.0, out);
        for j in 0..d {
            let off = n * w * (1 + j);
            let js = nalgebra::DMatrixView::from_slice(&base[off..off + n * w], n, w);
            matvec_t_add(&js, &q[j * n..(j + 1) * n], 1.0, out);
        }
        for r in 0..n {
            out[r] += pt[r];
            out[n + r] -= decay * pt[r];
            out[2 * n + r] -= lambda * pt[r];
        }
    }

    fn norms(&self, i: usize, n: usize, d: usize) -> (f64, f64) {
        let w = 3 * n;
        let base = &self.nodes[i * self.stride..(i + 1) * self.stride];
        let bx: f64 = base[..n * n].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut sx = 0.0;
        for j in 0..d {
            let off = n * w * (1 + j);
            sx += base[off..off + n * n].iter().map(|v| v * v).sum::<f64>();
        }
        (bx, sx.sqrt())
    }
}

/// Least-squares fit of several targets on the state features at one node.
/// Returns fitted values (paths × cols) and the fit standard error per column.
fn regress(basis: &RegressionBasis, states: &[Vec<f64>], targets: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let m = states.len();
    let n = basis.n;
    let mut mean = vec![0.0; n];
    let mut sd = vec![0.0; n];
    for c in 0..n {
        let xs: Vec<f64> = states.iter().map(|s| s[c]).collect();
        let mu = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        mean[c] = mu;
        sd[c] = var.sqrt();
    }
    let active: Vec<bool> = (0..n).map(|c| sd[c] > 1e-12 * (1.0 + mean[c].abs())).collect();
    let mut row = vec![0.0; basis.len()];
    let mut z = vec![0.0; n];
    let mut k = 0;
    let mut design = Vec::with_capacity(m * basis.len());
    for s in states {
        for c in 0..n {
            z[c] = if active[c] { (s[c] - mean[c]) / sd[c] } else { 0.0 };
        }
        k = basis.features(&z, &active, &mut row);
        design.extend_from_slice(&row[..k]);
    }
    let phi = DMatrix::from_row_slice(m, k, &design);
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Basis(format!(
            "rank-deficient design ({k} features, condition {:.3e})",
            smax / smin
        )));
    }
    let coef = svd.solve(targets, 0.0).map_err(|e| Error::Basis(e.to_string()))?;
    let fitted = &phi * coef;
    let resid = targets - &fitted;
    let dof = (m as f64 - k as f64).max(1.0);
    let se = (0..targets.ncols())
        .map(|c| {
            let rss: f64 = resid.column(c).iter().map(|v| v * v).sum();
            (rss / dof * k as f64 / m as f64).sqrt()
        })
        .collect();
    Ok((fitted, se))
}

fn regression_sweep(
    spec: &ProblemSpec,
    data: &[PathData],
    bundle: &BrownianBundle,
    basis: &RegressionBasis,
) -> Result<FirstOrderAdjoint> {
    let grid = spec.grid()?;
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let (nn, k, dt) = (grid.steps, grid.lag, grid.dt);
    let (decay, lambda) = (spec.delay.decay(), spec.delay.lambda);
    let mp = data.len();
    let w = 3 * n;
    let mut adj = FirstOrderAdjoint::zeros(AdjointMode::Regression, n, d, nn + 1, mp);
    let mut ys = vec![0.0; mp * nn * w];
    for (path, pd) in data.iter().enumerate() {
        let o = adj.off(path, nn);
        adj.p[o..o + n].copy_from_slice(&pd.terminal[..n]);
        adj.pt[o..o + n].copy_from_slice(&pd.terminal[2 * n..]);
    }
    let mut se_p = 0.0;
    let mut se_q_prev = 0.0;
    let cols = 2 * n * (1 + d);
    for m in (0..nn).rev() {
        let mut targets = DMatrix::zeros(mp, cols);
        let mut states = Vec::with_capacity(mp);
        for (path, pd) in data.iter().enumerate() {
            let o = adj.off(path, m + 1);
            let mut p = adj.p[o..o + n].to_vec();
            let mut pt = adj.pt[o..o + n].to_vec();
            if m + k + 1 == nn {
                for r in 0..n {
                    p[r] += pd.terminal[n + r];
                }
            }
            if m + 1 < nn {
                let y = &ys[(path * nn + m + 1) * w..(path * nn + m + 2) * w];
                for r in 0..n {
                    p[r] += dt * y[r];
                    pt[r] += dt * y[2 * n + r];
                }
            }
            if m + k + 1 < nn {
                let y = &ys[(path * nn + m + k + 1) * w..(path * nn + m + k + 2) * w];
                for r in 0..n {
                    p[r] += dt * y[n + r];
                }
            }
            let dw = bundle.increment(path, m);
            for r in 0..n {
                targets[(path, r)] = p[r];
                targets[(path, n + r)] = pt[r];
                for j in 0..d {
                    targets[(path, 2 * n + j * n + r)] = p[r] * dw[j] / dt;
                    targets[(path, 2 * n + n * d + j * n + r)] = pt[r] * dw[j] / dt;
                }
            }
            states.push(pd.states[m * n..(m + 1) * n].to_vec());
        }
        let (fit, se) = regress(basis, &states, &targets)?;
        for (path, pd) in data.iter().enumerate() {
            let o = adj.off(path, m);
            for r in 0..n {
                adj.p[o + r] = fit[(path, r)];
                adj.pt[o + r] = fit[(path, n + r)];
                for j in 0..d {
                    adj.q[o * d + j * n + r] = fit[(path, 2 * n + j * n + r)];
                    adj.qt[o * d + j * n + r] = fit[(path, 2 * n + n * d + j * n + r)];
                }
            }
            let (p, q, pt) = (
                adj.p[o..o + n].to_vec(),
                adj.q[o * d..o * d + n * d].to_vec(),
                adj.pt[o..o + n].to_vec(),
            );
            pd.generators(
                m,
                n,
                d,
                &p,
                &q,
                &pt,
                decay,
                lambda,
                &mut ys[(path * nn + m) * w..(path * nn + m + 1) * w],
            );
        }
        let (bx, sx) = data[0].norms(m, n, d);
        let fit_p = se[..n].iter().fold(0.0_f64, |a, v| a.max(*v));
        let fit_q = se[2 * n..2 * n + n * d].iter().fold(0.0_f64, |a, v| a.max(*v));
        se_p = ((se_p * (1.0 + dt * bx)).powi(2) + fit_p * fit_p + (dt * sx * se_q_prev).powi(2)).sqrt();
        se_q_prev = fit_q;
        adj.p_stderr[m] = se_p;
    }
    Ok(adj)
}

/// Solves the anticipated backward system along the reference paths in `optimal`.
pub fn solve_first_adjoint(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    optimal: &PathBatch,
    bundle: &BrownianBundle,
    mode: AdjointMode,
) -> Result<FirstOrderAdjoint> {
    if optimal.bundle_id != bundle.fingerprint() {
        return Err(Error::BundleIdentity(
            "reference paths were simulated on a different bundle".into(),
        ));
    }
    match mode {
        AdjointMode::Deterministic => {
            let trace = deterministic_trace(spec, u_star, optimal, false)?;
            solve_first_adjoint_deterministic(spec, &trace)
        }
        AdjointMode::Regression => solve_first_adjoint_regression(spec, u_star, optimal, bundle, 2),
    }
}

pub fn solve_first_adjoint_regression(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    optimal: &PathBatch,
    bundle: &BrownianBundle,
    degree: usize,
) -> Result<FirstOrderAdjoint> {
    let dims = spec.dims();
    let basis = RegressionBasis::new(dims.n, degree, optimal.paths.len())?;
    let data: Vec<PathData> = optimal
        .paths
        .par_iter()
        .map(|p| eval_coefficients_along(spec, p, u_star).map(|t| extract(&t, p, dims.n, dims.d)))
        .collect::<Result<_>>()?;
    regression_sweep(spec, &data, bundle, &basis)
}

/// Coefficient of h_z(T) after eliminating p̃: (1/λ)(1 − e^{λ((−δ)∨(t−T))}),
/// with the limit δ∧(T−t) at λ = 0.
pub fn hz_coefficient(lambda: f64, delta: f64, horizon: f64, t: f64) -> f64 {
    let a = (-delta).max(t - horizon);
    if lambda == 0.0 {
        -a
    } else {
        -(lambda * a).exp_m1() / lambda
    }
}

/// p from the anticipated backward Volterra form, deterministic regime.
pub fn solve_first_adjoint_svie(spec: &ProblemSpec, trace: &CoefficientTrace) -> Result<Vec<DVector<f64>>> {
    let grid = spec.grid()?;
    let n = spec.dims().n;
    let (nn, k, dt) = (grid.steps, grid.lag, grid.dt);
    let lambda = spec.delay.lambda;
    let hg = trace.terminal.grad.as_slice();
    let (hx, hy, hz) = (&hg[..n], &hg[n..2 * n], &hg[2 * n..]);
    let mut p = vec![vec![0.0; n]; nn + 1];
    // g_κ(i) = b_κ(i)ᵀ p_i + l_κ(i), filled once p_i is known
    let mut gy = vec![vec![0.0; n]; nn + 1];
    let mut gz = vec![vec![0.0; n]; nn + 1];
    let mut gx = vec![vec![0.0; n]; nn + 1];
    let weights: Vec<f64> = (0..k).map(|j| (-lambda * j as f64 * dt).exp()).collect();
    let mut sum = vec![0.0; n];
    for m in (0..=nn).rev() {
        if m + 1 < nn {
            let i = m + 1;
            for r in 0..n {
                let mut term = gx[i][r];
                if i + k < nn {
                    term += gy[i + k][r];
                }
                let reach = k.min(nn - i);
                for (j, wj) in weights.iter().enumerate().take(reach) {
                    term += dt * wj * gz[i + j][r];
                }
                sum[r] += term;
            }
        }
        let c = hz_coefficient(lambda, grid.delta, grid.horizon, grid.time(m as isize));
        for r in 0..n {
            let jump = if m + k < nn { hy[r] } else { 0.0 };
            p[m][r] = hx[r] + jump + c * hz[r] + dt * sum[r];
        }
        if m < nn {
            let node = trace.node(m);
            for (kappa, g) in [&mut gx, &mut gy, &mut gz].into_iter().enumerate() {
                let l = node.grad_l();
                for r in 0..n {
                    g[m][r] = l[kappa * n + r];
                }
                matvec_t_add(&node.b_block(kappa), &p[m], 1.0, &mut g[m]);
            }
        }
    }
    Ok(p.into_iter().map(DVector::from_vec).collect())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub difference: f64,
    /// sqrt(se(LHS)² + se(RHS)²)
    pub stderr_combined: f64,
    /// Standard error of the pathwise difference (common random numbers).
    pub stderr_paired: f64,
    pub paths: usize,
}

/// Compares E∫L̄(X1+X2) + E[H̄(X1+X2)(T)] with E∫⟨φ, Y⟩ + E[H̄φ(T)], where Y is
/// rebuilt from a deterministic-mode adjoint.
pub fn duality_check(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    u_eps: &ControlProcess,
    bundle: &BrownianBundle,
    optimal: &PathBatch,
    adjoint: &FirstOrderAdjoint,
) -> Result<DualityReport> {
    if adjoint.mode != AdjointMode::Deterministic {
        return Err(Error::Mode("duality check needs a deterministic-mode adjoint".into()));
    }
    if optimal.bundle_id != bundle.fingerprint() {
        return Err(Error::BundleIdentity(
            "reference paths were simulated on a different bundle".into(),
        ));
    }
    let grid = spec.grid()?;
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let w = 3 * n;
    let (nn, dt) = (grid.steps, grid.dt);
    let (decay, lambda) = (spec.delay.decay(), spec.delay.lambda);
    let zero_q = vec![0.0; n * d];
    let per: Vec<(f64, f64)> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| -> Result<(f64, f64)> {
            let path = &optimal.paths[p];
            let trace = eval_coefficients_along(spec, path, u_star)?;
            let kern = build_kernels(spec, &trace, path, u_star, u_eps)?;
            let lifted = simulate_lifted_path(&kern, bundle, p);
            let hbar = trace.terminal.grad.as_slice();
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            let mut phi = vec![0.0; w];
            let mut y = vec![0.0; w];
            let mut sum = vec![0.0; w];
            for i in 0..=nn {
                phi.fill(0.0);
                for m in 0..i {
                    let x1 = lifted.x1(m);
                    kern.add_b(i, m, dt, &mut phi);
                    kern.add_b_bar(i, m, x1, dt, &mut phi);
                    for (j, &wj) in bundle.increment(p, m).iter().enumerate() {
                        kern.add_d(j, i, m, wj, &mut phi);
                        kern.add_d_bar(j, i, m, x1, wj, &mut phi);
                    }
                }
                for c in 0..w {
                    sum[c] = lifted.x1(i)[c] + lifted.x2(i)[c];
                }
                if i < nn {
                    let node = trace.node(i);
                    lhs += dot(node.grad_l().as_slice(), &sum) * dt;
                    generators(
                        &node,
                        adjoint.p(p, i),
                        &zero_q,
                        adjoint.p_tilde(p, i),
                        decay,
                        lambda,
                        &mut y,
                    );
                    rhs += dot(&phi, &y) * dt;
                } else {
                    lhs += dot(hbar, &sum);
                    rhs += dot(hbar, &phi);
                }
            }
            Ok((lhs, rhs))
        })
        .collect::<Result<_>>()?;
    let l: Vec<f64> = per.iter().map(|x| x.0).collect();
    let r: Vec<f64> = per.iter().map(|x| x.1).collect();
    let diff: Vec<f64> = per.iter().map(|x| x.0 - x.1).collect();
    let (lhs, sl) = bundle.mean_stderr(&l);
    let (rhs, sr) = bundle.mean_stderr(&r);
    let (dm, sd) = bundle.mean_stderr(&diff);
    Ok(DualityReport {
        lhs,
        rhs,
        difference: dm,
        stderr_combined: (sl * sl + sr * sr).sqrt(),
        stderr_paired: sd,
        paths: per.len(),
    })
}
