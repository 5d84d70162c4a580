//! The function G, the Hamiltonian ℋ, the two-part maximum condition and the
//! spike expansion of the cost.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint1::FirstOrderAdjoint;
use crate::adjoint2::{CurlyP, SecondOrderKernels};
use crate::error::{Error, Result};
use crate::forward::{mean_stderr, pathwise_costs, spike_perturb, ControlProcess, PathBatch};
use crate::model::{CoefficientTrace, Coefficients, NodeBuf, Order, ProblemSpec};
use crate::noise::BrownianBundle;

/// H̄, L̄(t), H, L(t) along a reference trace.
#[derive(Clone, Debug)]
pub struct ExpansionData {
    pub hbar: DVector<f64>,
    pub lbar: Vec<DVector<f64>>,
    pub h: DMatrix<f64>,
    pub l: Vec<DMatrix<f64>>,
}

impl ExpansionData {
    pub fn from_trace(trace: &CoefficientTrace) -> Self {
        let nodes = trace.len();
        ExpansionData {
            hbar: trace.terminal.grad.clone(),
            lbar: (0..nodes).map(|i| trace.node(i).grad_l().into_owned()).collect(),
            h: trace.terminal.hess.clone(),
            l: (0..nodes).map(|i| trace.node(i).hess_l().into_owned()).collect(),
        }
    }
}

fn stack(x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(3 * x.len());
    s.extend_from_slice(x);
    s.extend_from_slice(y);
    s.extend_from_slice(z);
    s
}

/// G and σ at one point, reusing a node buffer.
struct PointEval {
    buf: NodeBuf,
}

impl PointEval {
    fn new(coeffs: &dyn Coefficients) -> Self {
        PointEval {
            buf: NodeBuf::new(coeffs.dims()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn g(
        &mut self,
        coeffs: &dyn Coefficients,
        t: f64,
        s: &[f64],
        p: &[f64],
        q: &DMatrix<f64>,
        u: &[f64],
        mu: &[f64],
    ) -> (f64, DMatrix<f64>) {
        self.buf.fill(coeffs, t, s, u, mu, Order::Value);
        let node = self.buf.view();
        let sigma = node.diffusion().into_owned();
        let mut g = node.running() + node.drift().dot(&DVector::from_column_slice(p));
        for j in 0..sigma.ncols() {
            g += sigma.column(j).dot(&q.column(j));
        }
        (g, sigma)
    }
}

fn penalty(diff: &DMatrix<f64>, curly: &DMatrix<f64>) -> f64 {
    (diff.transpose() * curly * diff).trace()
}

/// G = l + ⟨p, b⟩ + Σ_j ⟨qʲ, σʲ⟩; `q` is n × d with columns qʲ.
#[allow(clippy::too_many_arguments)]
pub fn eval_g(
    coeffs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    p: &[f64],
    q: &DMatrix<f64>,
    u: &[f64],
    mu: &[f64],
) -> Result<f64> {
    let dims = coeffs.dims();
    for (what, len) in [
        ("x", x.len()),
        ("y", y.len()),
        ("z", z.len()),
        ("p", p.len()),
        ("q rows", q.nrows()),
    ] {
        if len != dims.n {
            return Err(Error::dim(what, dims.n, len));
        }
    }
    if q.ncols() != dims.d {
        return Err(Error::dim("q columns", dims.d, q.ncols()));
    }
    if u.len() != dims.m || mu.len() != dims.m {
        return Err(Error::dim("control", dims.m, u.len().max(mu.len())));
    }
    Ok(PointEval::new(coeffs).g(coeffs, t, &stack(x, y, z), p, q, u, mu).0)
}

#[derive(Clone, Debug)]
pub struct HamiltonianInputs {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    /// n × d
    pub q: DMatrix<f64>,
    pub curly_p: DMatrix<f64>,
    pub u: Vec<f64>,
    pub mu: Vec<f64>,
    /// σ(τ, Θ(τ)) on the reference, n × d.
    pub sigma_ref: DMatrix<f64>,
}

/// ℋ = G + Σ_j Tr[(σʲ − σʲ(Θ))ᵀ 𝒫 (σʲ − σʲ(Θ))].
pub fn eval_hamiltonian(coeffs: &dyn Coefficients, inp: &HamiltonianInputs) -> Result<f64> {
    let g = eval_g(coeffs, inp.t, &inp.x, &inp.y, &inp.z, &inp.p, &inp.q, &inp.u, &inp.mu)?;
    let n = coeffs.dims().n;
    if inp.curly_p.shape() != (n, n) {
        return Err(Error::dim("curvature", n, inp.curly_p.nrows()));
    }
    let mut buf = NodeBuf::new(coeffs.dims());
    buf.fill(
        coeffs,
        inp.t,
        &stack(&inp.x, &inp.y, &inp.z),
        &inp.u,
        &inp.mu,
        Order::Value,
    );
    let diff = buf.view().diffusion() - &inp.sigma_ref;
    Ok(g + penalty(&diff, &inp.curly_p))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScanRow {
    pub node: usize,
    pub tau: f64,
    pub v_index: usize,
    /// Δℋ(τ) + Δℋ̃(τ+δ)·1, path mean.
    pub value: f64,
    pub stderr: f64,
    pub instant: f64,
    pub delayed: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    pub rows: Vec<ScanRow>,
    pub min_value: f64,
    pub argmin_node: usize,
    pub argmin_v: usize,
    /// Fixed part of the tolerance; each pair adds 3 standard errors.
    pub tol_floor: f64,
    pub violations: usize,
    pub delayed_exercised: bool,
    pub passed: bool,
}

impl ScanReport {
    pub fn worst(&self) -> Option<&ScanRow> {
        self.rows
            .iter()
            .find(|r| r.node == self.argmin_node && r.v_index == self.argmin_v)
    }
}

/// Δℋ(τ) + E_τ[Δℋ̃(τ+δ)·1_{[0,T−δ)}(τ)] over every node τ < N and every v in
/// the enumerated control set. The conditional expectation is replaced by the
/// path average, which is exact when the adjoints and the state are deterministic.
pub fn max_condition_scan(
    spec: &ProblemSpec,
    candidate: &ControlProcess,
    optimal: &PathBatch,
    adjoint: &FirstOrderAdjoint,
    curly: &CurlyP,
    tol_floor: f64,
) -> Result<ScanReport> {
    let grid = spec.grid()?;
    let dims = spec.dims();
    let (nn, k) = (grid.steps, grid.lag);
    if curly.len() != nn + 1 {
        return Err(Error::dim("curvature nodes", nn + 1, curly.len()));
    }
    let vs = spec.controls.enumerate();
    let nv = vs.len();
    let coeffs = spec.coeffs.as_ref();
    let per_path = |p: usize| -> Vec<(f64, f64)> {
        let path = &optimal.paths[p];
        let mut ev = PointEval::new(coeffs);
        let mut s = vec![0.0; 3 * dims.n];
        let mut out = vec![(0.0, 0.0); nn * nv];
        // instantaneous part at node i, delayed part credited to node i − k
        for i in 0..nn {
            let ii = i as isize;
            let t = grid.time(ii);
            path.fill_stacked(i, &mut s);
            let pv = adjoint.p(p, i);
            let q = adjoint.q_matrix(p, i);
            let (u, mu) = (candidate.at(ii), candidate.mu(ii));
            let (g0, sig0) = ev.g(coeffs, t, &s, pv, &q, u, mu);
            for (vi, v) in vs.iter().enumerate() {
                let (g1, sig1) = ev.g(coeffs, t, &s, pv, &q, v.as_slice(), mu);
                out[i * nv + vi].0 = g1 - g0 + penalty(&(sig1 - &sig0), curly.at(i));
                if i >= k {
                    let (g2, sig2) = ev.g(coeffs, t, &s, pv, &q, u, v.as_slice());
                    out[(i - k) * nv + vi].1 = g2 - g0 + penalty(&(sig2 - &sig0), curly.at(i));
                }
            }
        }
        out
    };
    let m = optimal.paths.len();
    let cells = nn * nv;
    let mut s1 = vec![0.0; cells];
    let mut s2 = vec![0.0; cells];
    let mut si = vec![0.0; cells];
    let mut sd = vec![0.0; cells];
    const CHUNK: usize = 256;
    for start in (0..m).step_by(CHUNK) {
        let block: Vec<Vec<(f64, f64)>> = (start..(start + CHUNK).min(m)).into_par_iter().map(per_path).collect();
        for vals in &block {
            for c in 0..cells {
                let (a, b) = vals[c];
                let v = a + b;
                s1[c] += v;
                s2[c] += v * v;
                si[c] += a;
                sd[c] += b;
            }
        }
    }
    let mf = m as f64;
    let mut rows = Vec::with_capacity(cells);
    let mut best = (f64::INFINITY, 0, 0);
    let mut violations = 0;
    let mut delayed_exercised = false;
    for i in 0..nn {
        for vi in 0..nv {
            let c = i * nv + vi;
            let mean = s1[c] / mf;
            let se = if m > 1 {
                ((s2[c] - mf * mean * mean).max(0.0) / (mf - 1.0) / mf).sqrt()
            } else {
                0.0
            };
            let delayed = sd[c] / mf;
            if delayed.abs() > 1e-12 {
                delayed_exercised = true;
            }
            if mean < -(tol_floor + 3.0 * se) {
                violations += 1;
            }
            if mean < best.0 {
                best = (mean, i, vi);
            }
            rows.push(ScanRow {
                node: i,
                tau: grid.time(i as isize),
                v_index: vi,
                value: mean,
                stderr: se,
                instant: si[c] / mf,
                delayed,
            });
        }
    }
    Ok(ScanReport {
        rows,
        min_value: best.0,
        argmin_node: best.1,
        argmin_v: best.2,
        tol_floor,
        violations,
        delayed_exercised,
        passed: violations == 0,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpansionRow {
    pub tau: f64,
    pub eps: f64,
    /// Ĵ(u^ε) − Ĵ(u*)
    pub cost_difference: f64,
    pub prediction: f64,
    /// Same prediction with 𝒫 replaced by the raw kernel contraction.
    pub prediction_raw: Option<f64>,
    pub residual: f64,
    pub stderr: f64,
    pub residual_over_eps: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionReport {
    pub rows: Vec<ExpansionRow>,
}

impl ExpansionReport {
    /// |residual|/ε for one τ, in schedule order.
    pub fn ratios(&self, tau: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| (r.tau - tau).abs() < 1e-12)
            .map(|r| r.residual_over_eps.abs())
            .collect()
    }
}

/// Finite differences Ĵ(u^ε) − Ĵ(u*) on common random numbers against
/// ∫ΔG + ∫ΔG̃·1 + ½Σ_j∫Tr[Δσʲᵀ𝒫Δσʲ].
#[allow(clippy::too_many_arguments)]
pub fn spike_expansion_check(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    v: &ControlProcess,
    taus: &[f64],
    eps_schedule: &[f64],
    bundle: &BrownianBundle,
    optimal: &PathBatch,
    adjoint: &FirstOrderAdjoint,
    curly: &CurlyP,
    kernels: Option<&SecondOrderKernels>,
) -> Result<ExpansionReport> {
    if optimal.bundle_id != bundle.fingerprint() {
        return Err(Error::BundleIdentity(
            "reference paths were simulated on a different bundle".into(),
        ));
    }
    let grid = spec.grid()?;
    let nn = grid.steps;
    let dt = grid.dt;
    let coeffs = spec.coeffs.as_ref();
    let n = spec.dims().n;
    let mut rows = Vec::new();
    for &tau in taus {
        for &eps in eps_schedule {
            let u_eps = spike_perturb(u_star, tau, eps, v)?;
            let nodes: Vec<usize> = u_eps.differing_nodes(u_star).into_iter().filter(|&i| i < nn).collect();
            let raw: Option<Vec<DMatrix<f64>>> = kernels.map(|kk| nodes.iter().map(|&i| kk.raw_matrix(i)).collect());
            let costs = pathwise_costs(spec, &u_eps, bundle)?;
            let per: Vec<(f64, f64, f64)> = (0..bundle.paths())
                .into_par_iter()
                .map(|p| {
                    let path = &optimal.paths[p];
                    let mut ev = PointEval::new(coeffs);
                    let mut s = vec![0.0; 3 * n];
                    let (mut pred, mut pred_raw) = (0.0, 0.0);
                    for (slot, &i) in nodes.iter().enumerate() {
                        let ii = i as isize;
                        let t = grid.time(ii);
                        path.fill_stacked(i, &mut s);
                        let pv = adjoint.p(p, i);
                        let q = adjoint.q_matrix(p, i);
                        let (g0, s0) = ev.g(coeffs, t, &s, pv, &q, u_star.at(ii), u_star.mu(ii));
                        let (g1, s1) = ev.g(coeffs, t, &s, pv, &q, u_eps.at(ii), u_eps.mu(ii));
                        let diff = s1 - s0;
                        pred += (g1 - g0 + 0.5 * penalty(&diff, curly.at(i))) * dt;
                        if let Some(r) = &raw {
                            pred_raw += (g1 - g0 + 0.5 * penalty(&diff, &r[slot])) * dt;
                        }
                    }
                    (costs[p] - optimal.costs[p], pred, pred_raw)
                })
                .collect();
            let fd: Vec<f64> = per.iter().map(|x| x.0).collect();
            let pr: Vec<f64> = per.iter().map(|x| x.1).collect();
            let prr: Vec<f64> = per.iter().map(|x| x.2).collect();
            let res: Vec<f64> = per.iter().map(|x| x.0 - x.1).collect();
            let (residual, stderr) = bundle.mean_stderr(&res);
            rows.push(ExpansionRow {
                tau,
                eps,
                cost_difference: mean_stderr(&fd).0,
                prediction: mean_stderr(&pr).0,
                prediction_raw: raw.as_ref().map(|_| mean_stderr(&prr).0),
                residual,
                stderr,
                residual_over_eps: residual / eps,
            });
        }
    }
    Ok(ExpansionReport { rows })
}
