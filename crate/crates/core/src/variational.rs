//! First and second variational equations of a spike perturbation, their
//! lift to delay-free Volterra equations, and the order / expansion diagnostics.
//!
//! Lifted vectors are stacked as (x-block, y-block, z-block), each of length n.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{mean_stderr, spike_perturb, ControlProcess, PathBatch, SimContext, StatePath};
use crate::linalg::{dot, loglog_slope, matvec_add, norm2, quad};
use crate::model::{eval_coefficients_along, CoefficientTrace, NodeBuf, Order, ProblemSpec};
use crate::noise::{BrownianBundle, TimeGrid};

/// Coefficient differences Δb, Δσʲ, Δσʲ_κ, Δl at one node where the perturbed
/// control (u or μ) departs from the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeDiff {
    pub node: usize,
    pub db: DVector<f64>,
    /// n × d, column j is Δσʲ.
    pub dsigma: DMatrix<f64>,
    /// ΔΞʲ = [Δσʲ_x Δσʲ_y Δσʲ_z], n × 3n.
    pub dxi: Vec<DMatrix<f64>>,
    pub dl: f64,
}

/// Node-indexed lookup of the spike differences.
#[derive(Clone, Debug, Default)]
pub struct SpikeDiffs {
    items: Vec<SpikeDiff>,
    slot: Vec<Option<usize>>,
}

impl SpikeDiffs {
    pub fn get(&self, node: usize) -> Option<&SpikeDiff> {
        self.slot.get(node).copied().flatten().map(|k| &self.items[k])
    }

    pub fn items(&self) -> &[SpikeDiff] {
        &self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Evaluates the perturbed coefficients along the reference state at every
/// node in 0..N−1 where `u_eps` or its delayed copy differs from `u_star`.
pub fn spike_differences(
    spec: &ProblemSpec,
    path: &StatePath,
    trace: &CoefficientTrace,
    u_star: &ControlProcess,
    u_eps: &ControlProcess,
) -> Result<SpikeDiffs> {
    let dims = spec.dims();
    let grid = spec.grid()?;
    let (n, d) = (dims.n, dims.d);
    let mut buf = NodeBuf::new(dims);
    let mut s = vec![0.0; 3 * n];
    let mut items = Vec::new();
    let mut slot = vec![None; grid.steps + 1];
    for i in u_eps.differing_nodes(u_star) {
        if i >= grid.steps {
            continue;
        }
        path.fill_stacked(i, &mut s);
        let ii = i as isize;
        buf.fill(
            spec.coeffs.as_ref(),
            grid.time(ii),
            &s,
            u_eps.at(ii),
            u_eps.mu(ii),
            Order::First,
        );
        let pert = buf.view();
        let base = trace.node(i);
        let db = pert.drift() - base.drift();
        let dsigma = pert.diffusion() - base.diffusion();
        let dxi = (0..d).map(|j| pert.jac_sigma(j) - base.jac_sigma(j)).collect();
        slot[i] = Some(items.len());
        items.push(SpikeDiff {
            node: i,
            db,
            dsigma,
            dxi,
            dl: pert.running() - base.running(),
        });
    }
    Ok(SpikeDiffs { items, slot })
}

/// First and second variations on the SDDE route; zero on the history segment.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationPair {
    pub x1: StatePath,
    pub x2: StatePath,
}

pub(crate) fn variation_path(
    ctx: &SimContext<'_>,
    trace: &CoefficientTrace,
    diffs: &SpikeDiffs,
    bundle: &BrownianBundle,
    p: usize,
) -> VariationPair {
    let dims = ctx.spec.dims();
    let (n, d) = (dims.n, dims.d);
    let g = &ctx.grid;
    let w = 3 * n;
    let mut x1 = StatePath::zeros(g, n);
    let mut x2 = StatePath::zeros(g, n);
    let mut s1 = vec![0.0; w];
    let mut s2 = vec![0.0; w];
    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    for i in 0..g.steps {
        x1.update_z(i, &ctx.weights);
        x2.update_z(i, &ctx.weights);
        x1.fill_stacked(i, &mut s1);
        x2.fill_stacked(i, &mut s2);
        let node = trace.node(i);
        let diff = diffs.get(i);
        let dw = bundle.increment(p, i);

        f1.fill(0.0);
        f2.fill(0.0);
        matvec_add(&node.jac_b(), &s1, g.dt, &mut f1);
        matvec_add(&node.jac_b(), &s2, g.dt, &mut f2);
        for k in 0..n {
            f2[k] += 0.5 * quad(&node.hess_b(k), &s1) * g.dt;
        }
        if let Some(df) = diff {
            for k in 0..n {
                f1[k] += df.db[k] * g.dt;
            }
        }
        for (j, &wj) in dw.iter().enumerate().take(d) {
            matvec_add(&node.jac_sigma(j), &s1, wj, &mut f1);
            matvec_add(&node.jac_sigma(j), &s2, wj, &mut f2);
            for k in 0..n {
                f2[k] += 0.5 * quad(&node.hess_sigma(j, k), &s1) * wj;
            }
            if let Some(df) = diff {
                for k in 0..n {
                    f1[k] += df.dsigma[(k, j)] * wj;
                }
                matvec_add(&df.dxi[j].as_view(), &s1, wj, &mut f2);
            }
        }
        let ii = i as isize;
        let (a1, a2) = (x1.x(ii).to_vec(), x2.x(ii).to_vec());
        for k in 0..n {
            x1.x_mut(ii + 1)[k] = a1[k] + f1[k];
            x2.x_mut(ii + 1)[k] = a2[k] + f2[k];
        }
    }
    x1.update_z(g.steps, &ctx.weights);
    x2.update_z(g.steps, &ctx.weights);
    VariationPair { x1, x2 }
}

fn check_identity(batch: &PathBatch, bundle: &BrownianBundle) -> Result<()> {
    if batch.bundle_id != bundle.fingerprint() || batch.paths.len() != bundle.paths() {
        return Err(Error::BundleIdentity(
            "reference paths were simulated on a different Brownian bundle".into(),
        ));
    }
    Ok(())
}

/// Simulates (x1, x2) for every path of `optimal`, which must come from `bundle`.
pub fn simulate_variations(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    u_eps: &ControlProcess,
    bundle: &BrownianBundle,
    optimal: &PathBatch,
) -> Result<Vec<VariationPair>> {
    check_identity(optimal, bundle)?;
    let ctx = SimContext::new(spec, bundle)?;
    (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let path = &optimal.paths[p];
            let trace = eval_coefficients_along(spec, path, u_star)?;
            let diffs = spike_differences(spec, path, &trace, u_star, u_eps)?;
            Ok(variation_path(&ctx, &trace, &diffs, bundle, p))
        })
        .collect()
}

/// Kernels A, Cʲ, B, Dʲ, B̄, D̄ʲ of the lifted Volterra equations along one
/// reference path.
#[derive(Clone, Debug)]
pub struct KernelSet<'a> {
    trace: &'a CoefficientTrace,
    diffs: SpikeDiffs,
    n: usize,
    d: usize,
    lag: usize,
    lambda: f64,
    decay: f64,
    dt: f64,
}

pub fn build_kernels<'a>(
    spec: &ProblemSpec,
    trace: &'a CoefficientTrace,
    path: &StatePath,
    u_star: &ControlProcess,
    u_eps: &ControlProcess,
) -> Result<KernelSet<'a>> {
    let diffs = spike_differences(spec, path, trace, u_star, u_eps)?;
    KernelSet::with_diffs(spec, trace, diffs)
}

impl<'a> KernelSet<'a> {
    pub fn with_diffs(spec: &ProblemSpec, trace: &'a CoefficientTrace, diffs: SpikeDiffs) -> Result<Self> {
        let grid = spec.grid()?;
        let dims = spec.dims();
        Ok(KernelSet {
            trace,
            diffs,
            n: dims.n,
            d: dims.d,
            lag: grid.lag,
            lambda: spec.delay.lambda,
            decay: spec.delay.decay(),
            dt: grid.dt,
        })
    }

    pub fn diffs(&self) -> &SpikeDiffs {
        &self.diffs
    }

    pub fn trace(&self) -> &CoefficientTrace {
        self.trace
    }

    /// 1_{(δ,∞)}(t_i − t_m); zero on the boundary t_i − t_m = δ.
    pub fn delayed(&self, i: usize, m: usize) -> bool {
        i > m + self.lag
    }

    /// out += scale · A(t_i, t_m) x
    pub fn add_a(&self, i: usize, m: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.n;
        let jb = self.trace.node(m).jac_b();
        matvec_add(&jb, x, scale, &mut out[..n]);
        if self.delayed(i, m) {
            matvec_add(&jb, x, scale, &mut out[n..2 * n]);
        }
        for r in 0..n {
            out[2 * n + r] += scale * (x[r] - self.decay * x[n + r] - self.lambda * x[2 * n + r]);
        }
    }

    /// out += scale · Cʲ(t_i, t_m) x
    pub fn add_c(&self, j: usize, i: usize, m: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.n;
        let js = self.trace.node(m).jac_sigma(j);
        matvec_add(&js, x, scale, &mut out[..n]);
        if self.delayed(i, m) {
            matvec_add(&js, x, scale, &mut out[n..2 * n]);
        }
    }

    fn add_top(&self, i: usize, m: usize, top: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.n;
        let mid = self.delayed(i, m);
        for r in 0..n {
            out[r] += scale * top[r];
            if mid {
                out[n + r] += scale * top[r];
            }
        }
    }

    /// out += scale · B(t_i, t_m)
    pub fn add_b(&self, i: usize, m: usize, scale: f64, out: &mut [f64]) {
        if let Some(df) = self.diffs.get(m) {
            self.add_top(i, m, df.db.as_slice(), scale, out);
        }
    }

    /// out += scale · Dʲ(t_i, t_m)
    pub fn add_d(&self, j: usize, i: usize, m: usize, scale: f64, out: &mut [f64]) {
        if let Some(df) = self.diffs.get(m) {
            self.add_top(i, m, df.dsigma.column(j).as_slice(), scale, out);
        }
    }

    /// out += scale · B̄(t_i, t_m), with X1(t_m) = `x1`.
    pub fn add_b_bar(&self, i: usize, m: usize, x1: &[f64], scale: f64, out: &mut [f64]) {
        let node = self.trace.node(m);
        let top: Vec<f64> = (0..self.n).map(|k| 0.5 * quad(&node.hess_b(k), x1)).collect();
        self.add_top(i, m, &top, scale, out);
    }

    /// out += scale · D̄ʲ(t_i, t_m), with X1(t_m) = `x1`.
    pub fn add_d_bar(&self, j: usize, i: usize, m: usize, x1: &[f64], scale: f64, out: &mut [f64]) {
        let node = self.trace.node(m);
        let mut top: Vec<f64> = (0..self.n).map(|k| 0.5 * quad(&node.hess_sigma(j, k), x1)).collect();
        if let Some(df) = self.diffs.get(m) {
            matvec_add(&df.dxi[j].as_view(), x1, 1.0, &mut top);
        }
        self.add_top(i, m, &top, scale, out);
    }

    fn columns(&self, f: impl Fn(&[f64], &mut [f64])) -> DMatrix<f64> {
        let w = 3 * self.n;
        let mut out = DMatrix::zeros(w, w);
        let mut e = vec![0.0; w];
        let mut col = vec![0.0; w];
        for c in 0..w {
            e.fill(0.0);
            e[c] = 1.0;
            col.fill(0.0);
            f(&e, &mut col);
            out.column_mut(c).copy_from_slice(&col);
        }
        out
    }

    pub fn a(&self, i: usize, m: usize) -> DMatrix<f64> {
        self.columns(|x, o| self.add_a(i, m, x, 1.0, o))
    }

    pub fn c(&self, j: usize, i: usize, m: usize) -> DMatrix<f64> {
        self.columns(|x, o| self.add_c(j, i, m, x, 1.0, o))
    }

    pub fn b(&self, i: usize, m: usize) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.n);
        self.add_b(i, m, 1.0, v.as_mut_slice());
        v
    }

    pub fn d(&self, j: usize, i: usize, m: usize) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.n);
        self.add_d(j, i, m, 1.0, v.as_mut_slice());
        v
    }

    pub fn b_bar(&self, i: usize, m: usize, x1: &[f64]) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.n);
        self.add_b_bar(i, m, x1, 1.0, v.as_mut_slice());
        v
    }

    pub fn d_bar(&self, j: usize, i: usize, m: usize, x1: &[f64]) -> DVector<f64> {
        let mut v = DVector::zeros(3 * self.n);
        self.add_d_bar(j, i, m, x1, 1.0, v.as_mut_slice());
        v
    }

    /// ΔΞʲ(t_m); zero away from the spike.
    pub fn delta_xi(&self, j: usize, m: usize) -> DMatrix<f64> {
        match self.diffs.get(m) {
            Some(df) => df.dxi[j].clone(),
            None => DMatrix::zeros(self.n, 3 * self.n),
        }
    }
}

/// Lifted first and second variations X1, X2 on nodes 0..N.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedState {
    w: usize,
    x1: Vec<f64>,
    x2: Vec<f64>,
}

impl LiftedState {
    pub fn x1(&self, i: usize) -> &[f64] {
        &self.x1[i * self.w..(i + 1) * self.w]
    }

    pub fn x2(&self, i: usize) -> &[f64] {
        &self.x2[i * self.w..(i + 1) * self.w]
    }

    pub fn nodes(&self) -> usize {
        self.x1.len() / self.w
    }
}

/// Direct O(N²) summation of the lifted Volterra equations for path `p`.
pub fn simulate_lifted_path(k: &KernelSet<'_>, bundle: &BrownianBundle, p: usize) -> LiftedState {
    let w = 3 * k.n;
    let nodes = k.trace.len();
    let mut x1 = vec![0.0; nodes * w];
    let mut x2 = vec![0.0; nodes * w];
    for i in 1..nodes {
        let (done1, rest1) = x1.split_at_mut(i * w);
        let (done2, rest2) = x2.split_at_mut(i * w);
        let out1 = &mut rest1[..w];
        let out2 = &mut rest2[..w];
        for m in 0..i {
            let a1 = &done1[m * w..(m + 1) * w];
            let a2 = &done2[m * w..(m + 1) * w];
            let dw = bundle.increment(p, m);
            k.add_a(i, m, a1, k.dt, out1);
            k.add_b(i, m, k.dt, out1);
            k.add_a(i, m, a2, k.dt, out2);
            k.add_b_bar(i, m, a1, k.dt, out2);
            for (j, &wj) in dw.iter().enumerate().take(k.d) {
                k.add_c(j, i, m, a1, wj, out1);
                k.add_d(j, i, m, wj, out1);
                k.add_c(j, i, m, a2, wj, out2);
                k.add_d_bar(j, i, m, a1, wj, out2);
            }
        }
    }
    LiftedState { w, x1, x2 }
}

/// Lifted states for every path of `optimal`, which must come from `bundle`.
pub fn simulate_lifted(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    u_eps: &ControlProcess,
    bundle: &BrownianBundle,
    optimal: &PathBatch,
) -> Result<Vec<LiftedState>> {
    check_identity(optimal, bundle)?;
    (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let path = &optimal.paths[p];
            let trace = eval_coefficients_along(spec, path, u_star)?;
            let k = build_kernels(spec, &trace, path, u_star, u_eps)?;
            Ok(simulate_lifted_path(&k, bundle, p))
        })
        .collect()
}

/// 𝒳1(t, r_j) for j = 0..=i where t = t_i: the Volterra sums of X1 frozen at t
/// and truncated at r_j.
pub fn auxiliary_process(
    k: &KernelSet<'_>,
    lifted: &LiftedState,
    bundle: &BrownianBundle,
    p: usize,
    grid: &TimeGrid,
    t: f64,
) -> Result<Vec<DVector<f64>>> {
    let i = grid.node(t)?;
    let w = 3 * k.n;
    let mut acc = vec![0.0; w];
    let mut out = Vec::with_capacity(i + 1);
    out.push(DVector::from_column_slice(&acc));
    for m in 0..i {
        let xm = lifted.x1(m);
        let dw = bundle.increment(p, m);
        k.add_a(i, m, xm, k.dt, &mut acc);
        k.add_b(i, m, k.dt, &mut acc);
        for (j, &wj) in dw.iter().enumerate().take(k.d) {
            k.add_c(j, i, m, xm, wj, &mut acc);
            k.add_d(j, i, m, wj, &mut acc);
        }
        out.push(DVector::from_column_slice(&acc));
    }
    Ok(out)
}

/// max over nodes of |X1 − (x1; y1·1_{(δ,∞)}(t); z1)| and max |x1|.
pub fn lift_distance(lifted: &LiftedState, pair: &VariationPair) -> (f64, f64) {
    let n = pair.x1.dim();
    let lag = pair.x1.lag();
    let mut dist: f64 = 0.0;
    let mut size: f64 = 0.0;
    for i in 0..lifted.nodes() {
        let big = lifted.x1(i);
        let x = pair.x1.x(i as isize);
        let y = pair.x1.y(i);
        let z = pair.x1.z(i);
        for r in 0..n {
            let ymask = if i > lag { y[r] } else { 0.0 };
            dist = dist
                .max((big[r] - x[r]).abs())
                .max((big[n + r] - ymask).abs())
                .max((big[2 * n + r] - z[r]).abs());
            size = size.max(x[r].abs());
        }
    }
    (dist, size)
}

pub const ORDER_QUANTITIES: [&str; 5] = [
    "E sup|xe-x*|^2",
    "E sup|x1|^2",
    "E sup|x2|",
    "E sup|xe-x*-x1|^2",
    "E sup|xe-x*-x1-x2|",
];

#[derive(Clone, Debug, Serialize)]
pub struct OrderRow {
    pub eps: f64,
    pub quantity: String,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderReport {
    pub eps: Vec<f64>,
    pub rows: Vec<OrderRow>,
    /// Fitted log-log slope per quantity; `None` when some estimate is zero.
    pub slopes: Vec<(String, Option<f64>)>,
}

impl OrderReport {
    pub fn slope(&self, quantity: &str) -> Option<f64> {
        self.slopes.iter().find(|(q, _)| q == quantity).and_then(|(_, s)| *s)
    }

    pub fn estimates(&self, quantity: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.quantity == quantity)
            .map(|r| r.estimate)
            .collect()
    }
}

fn check_schedule(eps: &[f64], delta: f64) -> Result<()> {
    if eps.is_empty() {
        return Err(Error::Parameter("empty ε schedule".into()));
    }
    if eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Parameter("ε schedule must be strictly decreasing".into()));
    }
    if eps.iter().any(|&e| !(e > 0.0 && e < delta)) {
        return Err(Error::Parameter(format!("every ε must lie in (0, δ = {delta})")));
    }
    Ok(())
}

/// Moment-order diagnostics of the variations against the exact
/// perturbation, on common random numbers.
pub fn empirical_order_check(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    v: &ControlProcess,
    tau: f64,
    eps_schedule: &[f64],
    bundle: &BrownianBundle,
) -> Result<OrderReport> {
    check_schedule(eps_schedule, spec.delay.delta)?;
    let ctx = SimContext::new(spec, bundle)?;
    let perturbed: Vec<ControlProcess> = eps_schedule
        .iter()
        .map(|&e| spike_perturb(u_star, tau, e, v))
        .collect::<Result<_>>()?;
    let n = spec.dims().n;
    let per_path: Vec<Vec<[f64; 5]>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| -> Result<Vec<[f64; 5]>> {
            let (star, _) = ctx.path(u_star, bundle, p)?;
            let trace = eval_coefficients_along(spec, &star, u_star)?;
            perturbed
                .iter()
                .map(|ue| {
                    let (pert, _) = ctx.path(ue, bundle, p)?;
                    let diffs = spike_differences(spec, &star, &trace, u_star, ue)?;
                    let var = variation_path(&ctx, &trace, &diffs, bundle, p);
                    let mut q = [0.0_f64; 5];
                    let mut r = vec![0.0; n];
                    for i in 0..=ctx.grid.steps {
                        let ii = i as isize;
                        let (xe, xs) = (pert.x(ii), star.x(ii));
                        let (a, b) = (var.x1.x(ii), var.x2.x(ii));
                        for c in 0..n {
                            r[c] = xe[c] - xs[c];
                        }
                        q[0] = q[0].max(norm2(&r));
                        q[1] = q[1].max(norm2(a));
                        q[2] = q[2].max(norm2(b).sqrt());
                        for c in 0..n {
                            r[c] -= a[c];
                        }
                        q[3] = q[3].max(norm2(&r));
                        for c in 0..n {
                            r[c] -= b[c];
                        }
                        q[4] = q[4].max(norm2(&r).sqrt());
                    }
                    Ok(q)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for (qi, name) in ORDER_QUANTITIES.iter().enumerate() {
        let mut est = Vec::new();
        for (ei, &eps) in eps_schedule.iter().enumerate() {
            let xs: Vec<f64> = per_path.iter().map(|v| v[ei][qi]).collect();
            let (mean, se) = bundle.mean_stderr(&xs);
            est.push(mean);
            rows.push(OrderRow {
                eps,
                quantity: name.to_string(),
                estimate: mean,
                stderr: se,
            });
        }
        slopes.push((name.to_string(), loglog_slope(eps_schedule, &est)));
    }
    Ok(OrderReport {
        eps: eps_schedule.to_vec(),
        rows,
        slopes,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResidualEstimate {
    /// Ĵ(u^ε) − Ĵ(u*)
    pub cost_difference: f64,
    /// Second-order expansion without the o(ε) term.
    pub prediction: f64,
    pub residual: f64,
    pub stderr: f64,
}

/// Pathwise second-order expansion of the cost difference on the SDDE route.
pub(crate) fn expansion_prediction(trace: &CoefficientTrace, diffs: &SpikeDiffs, var: &VariationPair, dt: f64) -> f64 {
    let n = var.x1.dim();
    let w = 3 * n;
    let steps = trace.len() - 1;
    let mut s1 = vec![0.0; w];
    let mut s12 = vec![0.0; w];
    let mut total = 0.0;
    for i in 0..steps {
        let node = trace.node(i);
        var.x1.fill_stacked(i, &mut s1);
        var.x2.fill_stacked(i, &mut s12);
        for c in 0..w {
            s12[c] += s1[c];
        }
        let dl = diffs.get(i).map_or(0.0, |d| d.dl);
        total += (dl + dot(node.grad_l().as_slice(), &s12) + 0.5 * quad(&node.hess_l(), &s1)) * dt;
    }
    var.x1.fill_stacked(steps, &mut s1);
    var.x2.fill_stacked(steps, &mut s12);
    for c in 0..w {
        s12[c] += s1[c];
    }
    let term = &trace.terminal;
    total + dot(term.grad.as_slice(), &s12) + 0.5 * quad(&term.hess.as_view(), &s1)
}

/// Ĵ(u^ε) − Ĵ(u*) minus the second-order expansion, with common random numbers.
pub fn expansion_residual(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    u_eps: &ControlProcess,
    bundle: &BrownianBundle,
) -> Result<ResidualEstimate> {
    let ctx = SimContext::new(spec, bundle)?;
    let dt = ctx.grid.dt;
    let per: Vec<(f64, f64)> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| -> Result<(f64, f64)> {
            let (star, c0) = ctx.path(u_star, bundle, p)?;
            let (_, c1) = ctx.path(u_eps, bundle, p)?;
            let trace = eval_coefficients_along(spec, &star, u_star)?;
            let diffs = spike_differences(spec, &star, &trace, u_star, u_eps)?;
            let var = variation_path(&ctx, &trace, &diffs, bundle, p);
            Ok((c1 - c0, expansion_prediction(&trace, &diffs, &var, dt)))
        })
        .collect::<Result<_>>()?;
    let fd: Vec<f64> = per.iter().map(|x| x.0).collect();
    let pred: Vec<f64> = per.iter().map(|x| x.1).collect();
    let res: Vec<f64> = per.iter().map(|x| x.0 - x.1).collect();
    let (residual, stderr) = bundle.mean_stderr(&res);
    Ok(ResidualEstimate {
        cost_difference: mean_stderr(&fd).0,
        prediction: mean_stderr(&pred).0,
        residual,
        stderr,
    })
}
