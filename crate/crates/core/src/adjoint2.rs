//! Second-order adjoint kernels P1..P4 in the deterministic-coefficient regime,
//! the curvature 𝒫(r) built from them, and the closed-form special cases
//! (delay-free matrix Riccati-type ODE, LQ method-of-steps ODE).
//!
//! Kernel integrals over (r, T] use the nodes r+1..N−1, and r+k+1..N−1 when the
//! lower limit is r+δ. With that rule every quantity at node r only reads data
//! at later nodes, so one backward sweep resolves the P3 ↔ 𝒫 coupling.

use nalgebra::{DMatrix, DMatrixView};

use crate::adjoint1::{deterministic_trace, solve_first_adjoint_deterministic, FirstOrderAdjoint};
use crate::error::{Error, Result};
use crate::forward::{ControlProcess, PathBatch};
use crate::linalg::asymmetry;
use crate::model::{CoefficientTrace, NodeRef, ProblemSpec};
use crate::noise::TimeGrid;

/// P4 on the triangle θ ≥ r, column-major in r.
#[derive(Clone, Debug)]
struct Triangle {
    nodes: usize,
    data: Vec<DMatrix<f64>>,
}

impl Triangle {
    fn new(nodes: usize, w: usize) -> Self {
        Triangle {
            nodes,
            data: vec![DMatrix::zeros(w, w); nodes * (nodes + 1) / 2],
        }
    }

    fn idx(&self, theta: usize, r: usize) -> usize {
        debug_assert!(theta >= r && theta < self.nodes);
        // column c holds nodes − c entries
        r * self.nodes - r * r.saturating_sub(1) / 2 + (theta - r)
    }

    fn get(&self, theta: usize, r: usize) -> &DMatrix<f64> {
        &self.data[self.idx(theta, r)]
    }

    fn set(&mut self, theta: usize, r: usize, m: DMatrix<f64>) {
        let i = self.idx(theta, r);
        self.data[i] = m;
    }
}

/// Kernels P1..P4 and the curvature 𝒫 on nodes 0..N.
///
/// P2, P3 live on nodes 0..N−1 and P4 on 0 ≤ r ≤ θ ≤ N−1; node N is only
/// reached through 𝒫(N) = h_xx.
#[derive(Clone, Debug)]
pub struct SecondOrderKernels {
    n: usize,
    steps: usize,
    lag: usize,
    dt: f64,
    pub p1: DMatrix<f64>,
    p2: Vec<DMatrix<f64>>,
    p3: Vec<DMatrix<f64>>,
    p4: Triangle,
    curly: Vec<DMatrix<f64>>,
    compact: Vec<DMatrix<f64>>,
}

/// 𝒫(r) ∈ 𝕊ⁿ on nodes 0..N.
#[derive(Clone, Debug, PartialEq)]
pub struct CurlyP {
    pub values: Vec<DMatrix<f64>>,
}

impl CurlyP {
    pub fn at(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros(n: usize, nodes: usize) -> Self {
        CurlyP {
            values: vec![DMatrix::zeros(n, n); nodes],
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.values.iter().map(asymmetry).fold(0.0, f64::max)
    }

    /// Scalar entry (a, b) per node.
    pub fn entry(&self, a: usize, b: usize) -> Vec<f64> {
        self.values.iter().map(|m| m[(a, b)]).collect()
    }
}

fn block(m: &DMatrix<f64>, n: usize, i: usize, l: usize) -> DMatrix<f64> {
    m.view((i * n, l * n), (n, n)).into_owned()
}

fn row_strip(m: &DMatrix<f64>, n: usize, i: usize) -> DMatrixView<'_, f64> {
    m.rows(i * n, n)
}

impl SecondOrderKernels {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn p2(&self, r: usize) -> &DMatrix<f64> {
        &self.p2[r]
    }

    pub fn p3(&self, r: usize) -> &DMatrix<f64> {
        &self.p3[r]
    }

    /// P4(θ, r) for any θ, r in 0..N−1, using P4(θ, r) = P4(r, θ)ᵀ below the diagonal.
    pub fn p4(&self, theta: usize, r: usize) -> DMatrix<f64> {
        if theta >= r {
            self.p4.get(theta, r).clone()
        } else {
            self.p4.get(r, theta).transpose()
        }
    }

    /// Block P_k^{(iℓ)}, k ∈ {1, 2, 3}, blocks indexed from 0.
    pub fn block(&self, k: usize, r: usize, i: usize, l: usize) -> DMatrix<f64> {
        let m = match k {
            1 => &self.p1,
            2 => &self.p2[r],
            3 => &self.p3[r],
            _ => panic!("kernel index {k} has no single-time form"),
        };
        block(m, self.n, i, l)
    }

    pub fn p4_block(&self, theta: usize, r: usize, i: usize, l: usize) -> DMatrix<f64> {
        block(&self.p4(theta, r), self.n, i, l)
    }

    /// Largest |P4^{(iℓ)}(θ, r)| over the stored triangle.
    pub fn p4_block_max(&self, i: usize, l: usize) -> f64 {
        self.p4
            .data
            .iter()
            .map(|m| block(m, self.n, i, l).amax())
            .fold(0.0, f64::max)
    }

    /// Largest entry outside the (1,1) blocks of P1..P4.
    pub fn off_xx_max(&self) -> f64 {
        let n = self.n;
        let off = |m: &DMatrix<f64>| {
            let mut c = m.clone();
            c.view_mut((0, 0), (n, n)).fill(0.0);
            c.amax()
        };
        let mut worst = off(&self.p1);
        for m in self.p2.iter().chain(&self.p3).chain(&self.p4.data) {
            worst = worst.max(off(m));
        }
        worst
    }

    /// 𝒫 assembled term by term from the kernel integrals.
    pub fn curly_p(&self) -> CurlyP {
        CurlyP {
            values: self.curly.clone(),
        }
    }

    /// 𝒫 from 𝒢₂^{(1)} + ∫𝒢₄^{(1)} + [𝒢₂^{(2)} + ∫_{r+δ}𝒢₄^{(2)}]·1.
    pub fn compact_curly_p(&self) -> CurlyP {
        CurlyP {
            values: self.compact.clone(),
        }
    }

    /// Raw contraction of the kernel terms against D(θ, τ) = (I; I·1_{(δ,∞)}(θ−τ); 0):
    /// D(T)ᵀP1D(T) + ∫[D(T)ᵀP2ᵀD(θ) + D(θ)ᵀP2D(T)] + ∫∫D(θ)ᵀP4(θ',θ)D(θ') + ∫D(θ)ᵀP3D(θ).
    /// Equals 𝒫(τ) up to quadrature when the kernels are consistent.
    pub fn raw_matrix(&self, tau: usize) -> DMatrix<f64> {
        let (n, nn, k, dt) = (self.n, self.steps, self.lag, self.dt);
        let lift = |delayed: bool| {
            let mut m = DMatrix::zeros(3 * n, n);
            for c in 0..n {
                m[(c, c)] = 1.0;
                if delayed {
                    m[(n + c, c)] = 1.0;
                }
            }
            m
        };
        let d_t = lift(nn > tau + k);
        let mut total = d_t.transpose() * &self.p1 * &d_t;
        let ds: Vec<_> = (0..nn).map(|th| lift(th > tau + k)).collect();
        for th in tau + 1..nn {
            let cross = d_t.transpose() * self.p2[th].transpose() * &ds[th];
            total += (&cross + cross.transpose()) * dt;
            total += ds[th].transpose() * &self.p3[th] * &ds[th] * dt;
            for thp in tau + 1..nn {
                total += ds[th].transpose() * self.p4(thp, th) * &ds[thp] * (dt * dt);
            }
        }
        total
    }
}

/// Second derivatives of G: l_κκ + Σ_k p_k b^k_κκ + Σ_{j,k} qʲ_k σʲ^k_κκ.
fn hess_g(node: &NodeRef<'_>, p: &[f64], q: &[f64]) -> DMatrix<f64> {
    let n = p.len();
    let d = q.len() / n;
    let mut m = node.hess_l().into_owned();
    for (k, &pk) in p.iter().enumerate() {
        if pk != 0.0 {
            m += node.hess_b(k) * pk;
        }
    }
    for j in 0..d {
        for k in 0..n {
            let qk = q[j * n + k];
            if qk != 0.0 {
                m += node.hess_sigma(j, k) * qk;
            }
        }
    }
    m
}

/// Bᵀ G + (c₁K; c₂K; c₃K) with B = [b_x b_y b_z] and c = (1, −e^{−λδ}, −λ).
fn combine(node: &NodeRef<'_>, g: &DMatrix<f64>, kk: &DMatrix<f64>, c: [f64; 3]) -> DMatrix<f64> {
    let n = g.nrows();
    let mut out = node.jac_b().transpose() * g;
    for (i, ci) in c.iter().enumerate() {
        if *ci != 0.0 {
            let mut rows = out.rows_mut(i * n, n);
            rows += kk * *ci;
        }
    }
    out
}

/// Kernels along the reference paths. The second-order coefficients must be
/// path-independent; the first-order ones may be random only if b and σ have
/// no state curvature, since p and q then never enter the kernels.
pub fn kernels_along(spec: &ProblemSpec, u_star: &ControlProcess, optimal: &PathBatch) -> Result<SecondOrderKernels> {
    match deterministic_trace(spec, u_star, optimal, false) {
        Ok(trace) => solve_kernels(spec, &trace, None),
        Err(Error::Mode(_)) => {
            let trace = deterministic_trace(spec, u_star, optimal, true)?;
            let d = spec.dims().d;
            let n = spec.dims().n;
            let curved = (0..trace.len()).any(|i| {
                let node = trace.node(i);
                (0..n).any(|k| {
                    node.hess_b(k).iter().any(|v| *v != 0.0)
                        || (0..d).any(|j| node.hess_sigma(j, k).iter().any(|v| *v != 0.0))
                })
            });
            if curved {
                return Err(Error::Mode(
                    "first-order adjoint is random and b or σ has state curvature".into(),
                ));
            }
            solve_kernels(spec, &trace, None)
        }
        Err(e) => Err(e),
    }
}

/// Backward sweep for P1..P4 and 𝒫 along a deterministic trace. When
/// `adjoint` is `None` the first-order adjoint is solved along the same trace.
pub fn solve_kernels(
    spec: &ProblemSpec,
    trace: &CoefficientTrace,
    adjoint: Option<&FirstOrderAdjoint>,
) -> Result<SecondOrderKernels> {
    let grid = spec.grid()?;
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let w = 3 * n;
    let (nn, k, dt) = (grid.steps, grid.lag, grid.dt);
    let owned;
    let adj = match adjoint {
        Some(a) => a,
        None => {
            owned = solve_first_adjoint_deterministic(spec, trace)?;
            &owned
        }
    };
    if adj.nodes() != nn + 1 {
        return Err(Error::dim("first-order adjoint nodes", nn + 1, adj.nodes()));
    }
    let c = [1.0, -spec.delay.decay(), -spec.delay.lambda];
    let h = trace.terminal.hess.clone();
    let h11 = block(&h, n, 0, 0);
    let hdelay = block(&h, n, 1, 0) + block(&h, n, 0, 1) + block(&h, n, 1, 1);

    let mut p2 = vec![DMatrix::zeros(w, w); nn];
    let mut p3 = vec![DMatrix::zeros(w, w); nn];
    let mut p4 = Triangle::new(nn, w);
    let mut curly = vec![DMatrix::zeros(n, n); nn + 1];
    let mut compact = vec![DMatrix::zeros(n, n); nn + 1];
    curly[nn] = h11.clone();
    compact[nn] = h11.clone();

    // Δt Σ over θ = r+1..N−1 and θ = r+k+1..N−1
    let mut s1p2 = DMatrix::zeros(w, w);
    let mut skp2 = DMatrix::zeros(w, w);
    let mut s1p3 = DMatrix::zeros(w, w);
    let mut skp3 = DMatrix::zeros(w, w);
    // Σ_{θ'} P4(θ, θ') over the same two ranges, per θ
    let mut row1 = vec![DMatrix::zeros(w, w); nn];
    let mut row2 = vec![DMatrix::zeros(w, w); nn];

    let full = |p4: &Triangle, a: usize, b: usize| -> DMatrix<f64> {
        if a >= b {
            p4.get(a, b).clone()
        } else {
            p4.get(b, a).transpose()
        }
    };

    for r in (0..nn).rev() {
        let t = r + 1;
        if t < nn {
            s1p2 += &p2[t] * dt;
            s1p3 += &p3[t] * dt;
            for th in t..nn {
                row1[th] += p4.get(th, t);
            }
        }
        let t = r + k + 1;
        if t < nn {
            skp2 += &p2[t] * dt;
            skp3 += &p3[t] * dt;
            for th in r + 1..nn {
                let m = full(&p4, th, t);
                row2[th] += m;
            }
        }
        let ind = r + k < nn;
        let node = trace.node(r);

        // 𝒫(r), display form
        let mut cp = h11.clone();
        let b11 = block(&s1p2, n, 0, 0);
        cp += &b11 + b11.transpose();
        cp += block(&s1p3, n, 0, 0);
        let mut d11 = DMatrix::zeros(n, n);
        for th in r + 1..nn {
            d11 += block(&row1[th], n, 0, 0);
        }
        cp += d11 * (dt * dt);
        if ind {
            cp += &hdelay;
            let b12 = block(&s1p2, n, 0, 1);
            cp += &b12 + b12.transpose();
            let b21 = block(&skp2, n, 1, 0);
            let b22 = block(&skp2, n, 1, 1);
            cp += &b21 + b21.transpose() + &b22 + b22.transpose();
            cp += block(&skp3, n, 1, 0) + block(&skp3, n, 0, 1) + block(&skp3, n, 1, 1);
            let mut dd = DMatrix::zeros(n, n);
            for th in r + 1..nn {
                dd += block(&row2[th], n, 1, 0);
                if th > r + k {
                    dd += block(&row1[th], n, 0, 1) + block(&row2[th], n, 1, 1);
                }
            }
            cp += dd * (dt * dt);
        }
        curly[r] = cp;

        // P3(r)
        let mut m3 = hess_g(&node, adj.p(0, r), adj.q_matrix(0, r).as_slice());
        for j in 0..d {
            let xi = node.jac_sigma(j);
            m3 += xi.transpose() * &curly[r] * xi;
        }
        p3[r] = m3;

        // P2(r)
        let mut g2 = row_strip(&h, n, 0) + row_strip(&s1p2, n, 0);
        if ind {
            g2 += row_strip(&h, n, 1) + row_strip(&skp2, n, 1);
        }
        let k2 = row_strip(&h, n, 2) + row_strip(&s1p2, n, 2);
        p2[r] = combine(&node, &g2, &k2, c);

        // P4(θ, r) for θ > r, then the diagonal
        let g4_at =
            |th: usize, p2: &[DMatrix<f64>], p3: &[DMatrix<f64>], row1: &[DMatrix<f64>], row2: &[DMatrix<f64>]| {
                let p2t = p2[th].transpose();
                let mut g4 = row_strip(&p2t, n, 0) + row_strip(&p3[th], n, 0) + row_strip(&row1[th], n, 0) * dt;
                if th > r + k {
                    g4 += row_strip(&p3[th], n, 1);
                }
                if ind {
                    g4 += row_strip(&p2t, n, 1) + row_strip(&row2[th], n, 1) * dt;
                }
                let k4 = row_strip(&p2t, n, 2) + row_strip(&p3[th], n, 2) + row_strip(&row1[th], n, 2) * dt;
                (g4, k4)
            };
        let mut comp = g2.columns(0, n).into_owned();
        if ind {
            comp += g2.columns(n, n);
        }
        for th in r + 1..nn {
            let (g4, k4) = g4_at(th, &p2, &p3, &row1, &row2);
            comp += g4.columns(0, n) * dt;
            if ind && th > r + k {
                comp += g4.columns(n, n) * dt;
            }
            p4.set(th, r, combine(&node, &g4, &k4, c));
        }
        compact[r] = comp;
        let mut s1 = DMatrix::zeros(w, w);
        let mut s2 = DMatrix::zeros(w, w);
        for th in r + 1..nn {
            let m = p4.get(th, r).transpose();
            if th > r + k {
                s2 += &m;
            }
            s1 += m;
        }
        row1[r] = s1;
        row2[r] = s2;
        let (g4, k4) = g4_at(r, &p2, &p3, &row1, &row2);
        let diag = combine(&node, &g4, &k4, c);
        // P4(r, r) is its own transpose under the extension rule
        p4.set(r, r, (&diag + diag.transpose()) * 0.5);
    }

    Ok(SecondOrderKernels {
        n,
        steps: nn,
        lag: k,
        dt,
        p1: h,
        p2,
        p3,
        p4,
        curly,
        compact,
    })
}

pub fn assemble_curly_p(kernels: &SecondOrderKernels) -> CurlyP {
    kernels.curly_p()
}

fn linear(a: &DMatrix<f64>, b: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    a * (1.0 - s) + b * s
}

/// P̄ for the delay-free case: −dP̄ = [b_xᵀP̄ + P̄b_x + Σσʲ_xᵀP̄σʲ_x + ∂²_xxG]dt,
/// P̄(T) = h_xx, by classical RK4 on the trace grid with linearly interpolated
/// coefficients.
pub fn solve_classical_p_bsde(
    spec: &ProblemSpec,
    trace: &CoefficientTrace,
    adjoint: &FirstOrderAdjoint,
) -> Result<Vec<DMatrix<f64>>> {
    let grid = spec.grid()?;
    let dims = spec.dims();
    let (n, d) = (dims.n, dims.d);
    let (nn, dt) = (grid.steps, grid.dt);
    const TOL: f64 = 1e-14;
    let check = |what: &str, v: f64| -> Result<()> {
        if v > TOL {
            Err(Error::Mode(format!(
                "delay-free solver needs {what} ≡ 0 (found {v:.3e})"
            )))
        } else {
            Ok(())
        }
    };
    let tail = |m: DMatrixView<'_, f64>| m.columns(n, 2 * n).amax();
    let term = &trace.terminal;
    check("h_y, h_z", term.grad.rows(n, 2 * n).amax())?;
    check("delayed terminal Hessian blocks", {
        let mut hh = term.hess.clone();
        hh.view_mut((0, 0), (n, n)).fill(0.0);
        hh.amax()
    })?;
    let mut bx = Vec::with_capacity(nn + 1);
    let mut sx = Vec::with_capacity(nn + 1);
    let mut f = Vec::with_capacity(nn + 1);
    for i in 0..=nn {
        let node = trace.node(i);
        check("b_y, b_z", tail(node.jac_b()))?;
        check("l_y, l_z", node.grad_l().rows(n, 2 * n).amax())?;
        check("delayed running Hessian blocks", {
            let mut hl = node.hess_l().clone_owned();
            hl.view_mut((0, 0), (n, n)).fill(0.0);
            hl.amax()
        })?;
        for j in 0..d {
            check("σ_y, σ_z", tail(node.jac_sigma(j)))?;
        }
        let (p, q) = if i < adjoint.nodes() {
            (adjoint.p(0, i).to_vec(), adjoint.q_matrix(0, i))
        } else {
            (vec![0.0; n], DMatrix::zeros(n, d))
        };
        let g = hess_g(&node, &p, q.as_slice());
        f.push(block(&g, n, 0, 0));
        bx.push(node.b_block(0).into_owned());
        sx.push((0..d).map(|j| node.sigma_block(j, 0).into_owned()).collect::<Vec<_>>());
    }
    // coefficients at node i + s, s ∈ [0, 1]
    let rhs = |i: usize, s: f64, p: &DMatrix<f64>| -> DMatrix<f64> {
        let i1 = (i + 1).min(nn);
        let b = linear(&bx[i], &bx[i1], s);
        let mut out = b.transpose() * p + p * &b + linear(&f[i], &f[i1], s);
        for j in 0..d {
            let sj = linear(&sx[i][j], &sx[i1][j], s);
            out += sj.transpose() * p * &sj;
        }
        out
    };
    let mut vals = vec![DMatrix::zeros(n, n); nn + 1];
    vals[nn] = block(&term.hess, n, 0, 0);
    for i in (0..nn).rev() {
        // −dP/dt = F(t, P); step from t_{i+1} back to t_i
        let p = &vals[i + 1];
        let k1 = rhs(i, 1.0, p);
        let k2 = rhs(i, 0.5, &(p + &k1 * (0.5 * dt)));
        let k3 = rhs(i, 0.5, &(p + &k2 * (0.5 * dt)));
        let k4 = rhs(i, 0.0, &(p + &k3 * dt));
        vals[i] = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    Ok(vals)
}

/// Constant coefficients of the LQ curvature ODE
/// −𝒫̇(s) = Aᵀ𝒫 + 𝒫A + Q₀₀ + [Q₁₁ + C̄ᵀ𝒫(s+δ)C̄]·1_{[0,T−δ)}(s), 𝒫(T) = G.
#[derive(Clone, Debug, PartialEq)]
pub struct LqParams {
    pub a: DMatrix<f64>,
    pub cbar: DMatrix<f64>,
    pub q00: DMatrix<f64>,
    pub q11: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub horizon: f64,
    pub delta: f64,
}

impl LqParams {
    pub fn scalar(a: f64, cbar: f64, q00: f64, q11: f64, g: f64, horizon: f64, delta: f64) -> Self {
        let s = |v| DMatrix::from_element(1, 1, v);
        LqParams {
            a: s(a),
            cbar: s(cbar),
            q00: s(q00),
            q11: s(q11),
            g: s(g),
            horizon,
            delta,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LqSolution {
    pub step: f64,
    pub values: Vec<DMatrix<f64>>,
}

impl LqSolution {
    /// 𝒫³ at a node time of the solver grid.
    pub fn at(&self, t: f64) -> Result<&DMatrix<f64>> {
        let r = t / self.step;
        let i = r.round();
        if i < 0.0 || i as usize >= self.values.len() || (r - i).abs() > 1e-9 * r.abs().max(1.0) {
            return Err(Error::Alignment(format!("t = {t} is not a node of step {}", self.step)));
        }
        Ok(&self.values[i as usize])
    }
}

/// Method of steps, backwards from T, RK4 inside each step; advanced values at
/// half steps come from cubic Hermite interpolation of the solved segment.
pub fn solve_lq_p_ode(params: &LqParams, step: f64) -> Result<LqSolution> {
    let steps = (params.horizon / step).round();
    if !(steps >= 1.0) || ((params.horizon / step) - steps).abs() > 1e-9 * steps {
        return Err(Error::Alignment(format!(
            "T = {} is not a multiple of step {step}",
            params.horizon
        )));
    }
    let grid = TimeGrid::new(params.horizon, params.delta, steps as usize)?;
    let (m, kh, h) = (grid.steps, grid.lag, grid.dt);
    let n = params.g.nrows();
    for (name, mat) in [
        ("A", &params.a),
        ("C̄", &params.cbar),
        ("Q00", &params.q00),
        ("Q11", &params.q11),
    ] {
        if mat.shape() != (n, n) {
            return Err(Error::dim(name, n, mat.nrows()));
        }
    }
    let rhs = |p: &DMatrix<f64>, adv: Option<&DMatrix<f64>>| -> DMatrix<f64> {
        let mut out = params.a.transpose() * p + p * &params.a + &params.q00;
        if let Some(pa) = adv {
            out += &params.q11 + params.cbar.transpose() * pa * &params.cbar;
        }
        out
    };
    let mut vals = vec![DMatrix::zeros(n, n); m + 1];
    vals[m] = params.g.clone();
    for i in (0..m).rev() {
        let advanced = i + 1 + kh <= m;
        let (a0, am, a1) = if advanced {
            // interval [i+kh, i+kh+1], its own indicator for the end slopes
            let (j0, j1) = (i + kh, i + kh + 1);
            let ind = j1 + kh <= m;
            let s0 = -rhs(&vals[j0], ind.then(|| &vals[j0 + kh]));
            let s1 = -rhs(&vals[j1], ind.then(|| &vals[(j1 + kh).min(m)]));
            let mid = (&vals[j0] + &vals[j1]) * 0.5 + (s0 - s1) * (h / 8.0);
            (Some(vals[j0].clone()), Some(mid), Some(vals[j1].clone()))
        } else {
            (None, None, None)
        };
        let p = vals[i + 1].clone();
        let k1 = rhs(&p, a1.as_ref());
        let k2 = rhs(&(&p + &k1 * (0.5 * h)), am.as_ref());
        let k3 = rhs(&(&p + &k2 * (0.5 * h)), am.as_ref());
        let k4 = rhs(&(&p + &k3 * h), a0.as_ref());
        vals[i] = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(LqSolution { step: h, values: vals })
}

/// Sup-norm distance between two node sequences sampled every `stride` nodes of `b`.
pub fn sup_distance(a: &[DMatrix<f64>], b: &[DMatrix<f64>], stride: usize) -> f64 {
    a.iter()
        .enumerate()
        .map(|(i, m)| (m - &b[i * stride]).amax())
        .fold(0.0, f64::max)
}
