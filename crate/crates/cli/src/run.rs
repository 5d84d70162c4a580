//! Pipeline orchestration and artifact writing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use sdde_mp::adjoint1::{
    deterministic_trace, duality_check, solve_first_adjoint, solve_first_adjoint_deterministic,
    solve_first_adjoint_svie, AdjointMode, FirstOrderAdjoint,
};
use sdde_mp::adjoint2::{
    assemble_curly_p, kernels_along, solve_classical_p_bsde, solve_lq_p_ode, sup_distance, CurlyP, SecondOrderKernels,
};
use sdde_mp::forward::{simulate_sdde, spike_perturb, CostEstimate, PathBatch};
use sdde_mp::model::eval_coefficients_along;
use sdde_mp::mp::{max_condition_scan, spike_expansion_check};
use sdde_mp::noise::{generate, generate_antithetic, BrownianBundle, TimeGrid};
use sdde_mp::scenarios::Scenario;
use sdde_mp::variational::{empirical_order_check, spike_differences};

use crate::config::{Case, ConfigError, ModeChoice, ScenarioConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    OrderCheck,
    Expansion,
    Adjoint1,
    Adjoint2,
    Duality,
    VerifyMp,
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::OrderCheck => "order-check",
            Command::Expansion => "expansion",
            Command::Adjoint1 => "adjoint1",
            Command::Adjoint2 => "adjoint2",
            Command::Duality => "duality",
            Command::VerifyMp => "verify-mp",
            Command::All => "all",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub module: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub runtime_s: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvStamp {
    pub seed: u64,
    pub steps: usize,
    pub paths: usize,
    pub dt: f64,
    pub delta: f64,
    pub lambda: f64,
    pub horizon: f64,
    pub version: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Skipped {
    pub pipeline: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub command: String,
    pub env: EnvStamp,
    pub checks: Vec<CheckRecord>,
    pub skipped: Vec<Skipped>,
    pub artifacts: Vec<String>,
    pub passed: bool,
}

impl RunReport {
    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Module {
        module: String,
        check: String,
        source: sdde_mp::Error,
    },
    Io(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Module { module, check, source } => write!(f, "{module}/{check}: {source}"),
            RunError::Io(e) => write!(f, "i/o: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        2
    }
}

type Pipeline = Box<dyn Fn(&mut Ctx<'_>) -> Result<Step<()>, RunError>>;

type Step<T> = std::result::Result<T, (String, sdde_mp::Error)>;

fn at<T>(check: &str, r: sdde_mp::Result<T>) -> Step<T> {
    r.map_err(|e| (check.to_string(), e))
}

fn io(e: impl fmt::Display) -> RunError {
    RunError::Io(e.to_string())
}

struct Ctx<'a> {
    cfg: &'a ScenarioConfig,
    sc: Scenario,
    grid: TimeGrid,
    bundle: BrownianBundle,
    reference: PathBatch,
    checks: Vec<CheckRecord>,
    artifacts: Vec<String>,
    adjoint: Option<FirstOrderAdjoint>,
    kernels: Option<Option<SecondOrderKernels>>,
}

impl<'a> Ctx<'a> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        module: &str,
        name: &str,
        passed: bool,
        value: f64,
        tolerance: f64,
        t0: Instant,
        detail: String,
    ) {
        self.checks.push(CheckRecord {
            name: name.to_string(),
            module: module.to_string(),
            passed,
            value,
            tolerance,
            runtime_s: t0.elapsed().as_secs_f64(),
            detail,
        });
    }

    fn path(&self, file: &str) -> PathBuf {
        self.cfg.out.join(file)
    }

    fn write_csv(&mut self, file: &str, header: &[String], rows: &[Vec<f64>]) -> Result<(), RunError> {
        let p = self.path(file);
        let mut w = csv::Writer::from_path(&p).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.artifacts.push(file.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(value).map_err(io)?;
        fs::write(self.path(file), text).map_err(io)?;
        self.artifacts.push(file.to_string());
        Ok(())
    }

    fn adjoint(&mut self) -> Step<FirstOrderAdjoint> {
        if let Some(a) = &self.adjoint {
            return Ok(a.clone());
        }
        let (spec, u) = (&self.sc.spec, &self.sc.reference);
        let solve = |mode| solve_first_adjoint(spec, u, &self.reference, &self.bundle, mode);
        let adj = match self.cfg.mode {
            ModeChoice::Deterministic => at("adjoint", solve(AdjointMode::Deterministic))?,
            ModeChoice::Regression => at("adjoint", solve(AdjointMode::Regression))?,
            ModeChoice::Auto => match solve(AdjointMode::Deterministic) {
                Err(sdde_mp::Error::Mode(_)) => at("adjoint", solve(AdjointMode::Regression))?,
                other => at("adjoint", other)?,
            },
        };
        self.adjoint = Some(adj.clone());
        Ok(adj)
    }

    fn kernels(&mut self) -> Step<SecondOrderKernels> {
        if self.kernels.is_none() {
            let k = at(
                "kernels",
                kernels_along(&self.sc.spec, &self.sc.reference, &self.reference),
            )?;
            self.kernels = Some(Some(k));
        }
        Ok(self.kernels.as_ref().and_then(|k| k.clone()).expect("set above"))
    }

    fn tau0(&self) -> f64 {
        self.cfg.taus_or(self.sc.tau)[0]
    }
}

fn n_cols(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}

fn matrix_cols(prefix: &str, n: usize) -> Vec<String> {
    let mut v = Vec::new();
    for a in 0..n {
        for b in 0..n {
            v.push(format!("{prefix}_{a}{b}"));
        }
    }
    v
}

fn flatten(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |a| (0..m.ncols()).map(move |b| m[(a, b)]))
}

fn simulate(ctx: &mut Ctx<'_>) -> Result<Step<()>, RunError> {
    let t0 = Instant::now();
    let n = ctx.sc.spec.dims().n;
    let nn = ctx.grid.steps as isize;
    let mut header = vec!["path".to_string()];
    header.extend(n_cols("x_T", n));
    header.push("pathwise_cost".into());
    let rows: Vec<Vec<f64>> = ctx
        .reference
        .paths
        .iter()
        .zip(&ctx.reference.costs)
        .enumerate()
        .map(|(p, (path, c))| {
            let mut r = vec![p as f64];
            r.extend_from_slice(path.x(nn));
            r.push(*c);
            r
        })
        .collect();
    ctx.write_csv("simulate.csv", &header, &rows)?;
    let (mean, stderr) = ctx.bundle.mean_stderr(&ctx.reference.costs);
    let est = CostEstimate {
        mean,
        stderr,
        paths: ctx.reference.costs.len(),
    };
    ctx.write_json("simulate.json", &est)?;
    if ctx.cfg.dump_noise {
        ctx.bundle.dump(&ctx.path("noise.bin")).map_err(io)?;
        ctx.artifacts.push("noise.bin".into());
    }
    ctx.record(
        "sdde-forward",
        "cost-estimate",
        est.mean.is_finite(),
        est.mean,
        est.stderr,
        t0,
        format!("J = {} ± {} over {} paths", est.mean, est.stderr, est.paths),
    );
    Ok(Ok(()))
}

fn order_check(ctx: &mut Ctx<'_>) -> Result<Step<()>, RunError> {
    let t0 = Instant::now();
    let sc = &ctx.sc;
    let r = match at(
        "order-check",
        empirical_order_check(
            &sc.spec,
            &sc.reference,
            &sc.spike,
            ctx.tau0(),
            &ctx.cfg.eps,
            &ctx.bundle,
        ),
    ) {
        Ok(r) => r,
        Err(e) => return Ok(Err(e)),
    };
    let p = ctx.path("order.csv");
    let mut w = csv::Writer::from_path(&p).map_err(io)?;
    w.write_record(["eps", "quantity", "estimate", "stderr", "slope"])
        .map_err(io)?;
    for row in &r.rows {
        let slope = r.slope(&row.quantity).unwrap_or(f64::NAN);
        w.write_record([
            row.eps.to_string(),
            row.quantity.clone(),
            row.estimate.to_string(),
            row.stderr.to_string(),
            slope.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(io)?;
    ctx.artifacts.push("order.csv".into());
    ctx.write_json("order.json", &r)?;

    // below round-off relative to E sup|xe-x*|^2 counts as identically zero
    let negligible = |q: &str| {
        r.rows.iter().filter(|row| row.quantity == q).all(|row| {
            let scale = r
                .rows
                .iter()
                .find(|o| o.eps == row.eps && o.quantity == sdde_mp::variational::ORDER_QUANTITIES[0])
                .map_or(0.0, |o| o.estimate);
            row.estimate <= 1e-12 * scale
        })
    };
    let sharp = match diffusion_spiked(ctx) {
        Ok(b) => b,
        Err(e) => return Ok(Err(e)),
    };
    let first = sdde_mp::variational::ORDER_QUANTITIES[1];
    let rem = sdde_mp::variational::ORDER_QUANTITIES[3];
    if negligible(first) {
        ctx.record(
            "variational",
            "order-first-variation",
            true,
            0.0,
            0.0,
            t0,
            "x1 vanishes identically".into(),
        );
    } else {
        let s = r.slope(first).unwrap_or(f64::NAN);
        if sharp {
            let ok = (0.85..=1.15).contains(&s);
            ctx.record(
                "variational",
                "order-first-variation",
                ok,
                s,
                0.15,
                t0,
                format!("slope of {first} in [0.85, 1.15]"),
            );
        } else {
            // Δσ ≡ 0 on the spike: x1 is O(ε) pathwise and the O(ε) bound is not attained
            ctx.record(
                "variational",
                "order-first-variation",
                s >= 0.85,
                s,
                0.85,
                t0,
                format!("slope of {first} at least 0.85 (spike leaves σ unchanged)"),
            );
        }
    }
    if negligible(rem) {
        ctx.record(
            "variational",
            "order-remainder",
            true,
            0.0,
            1.3,
            t0,
            "remainder vanishes identically".into(),
        );
    } else {
        let s = r.slope(rem).unwrap_or(f64::NAN);
        ctx.record(
            "variational",
            "order-remainder",
            s >= 1.3,
            s,
            1.3,
            t0,
            format!("slope of {rem} at least 1.3"),
        );
    }
    Ok(Ok(()))
}

/// Whether the spike changes σ anywhere along reference path 0.
fn diffusion_spiked(ctx: &Ctx<'_>) -> Step<bool> {
    let sc = &ctx.sc;
    let path = &ctx.reference.paths[0];
    let trace = at("order-check", eval_coefficients_along(&sc.spec, path, &sc.reference))?;
    let ue = at(
        "order-check",
        spike_perturb(&sc.reference, ctx.tau0(), ctx.cfg.eps[0], &sc.spike),
    )?;
    let diffs = at(
        "order-check",
        spike_differences(&sc.spec, path, &trace, &sc.reference, &ue),
    )?;
    Ok(diffs.items().iter().any(|d| d.dsigma.amax() > 0.0))
}

fn expansion(ctx: &mut Ctx<'_>) -> Result<Step<()>, RunError> {
    let t0 = Instant::now();
    let adj = match ctx.adjoint() {
        Ok(a) => a,
        Err(e) => return Ok(Err(e)),
    };
    let kernels = match ctx.kernels() {
        Ok(k) => k,
        Err(e) => return Ok(Err(e)),
    };
    let curly = assemble_curly_p(&kernels);
    let taus = ctx.cfg.taus_or(ctx.sc.tau);
    let sc = &ctx.sc;
    let raw = (adj.mode == AdjointMode::Deterministic).then_some(&kernels);
    let r = match at(
        "expansion",
        spike_expansion_check(
            &sc.spec,
            &sc.reference,
            &sc.spike,
            &taus,
            &ctx.cfg.eps,
            &ctx.bundle,
            &ctx.reference,
            &adj,
            &curly,
            raw,
        ),
    ) {
        Ok(r) => r,
        Err(e) => return Ok(Err(e)),
    };
    let header: Vec<String> = [
        "tau",
        "eps",
        "cost_difference",
        "prediction",
        "prediction_raw",
        "residual",
        "stderr",
        "residual_over_eps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<f64>> = r
        .rows
        .iter()
        .map(|x| {
            vec![
                x.tau,
                x.eps,
                x.cost_difference,
                x.prediction,
                x.prediction_raw.unwrap_or(f64::NAN),
                x.residual,
                x.stderr,
                x.residual_over_eps,
            ]
        })
        .collect();
    ctx.write_csv("expansion.csv", &header, &rows)?;
    ctx.write_json("expansion.json", &r)?;
    for &tau in &taus {
        let ratios = r.ratios(tau);
        let exact = r
            .rows
            .iter()
            .filter(|x| (x.tau - tau).abs() < 1e-12)
            .all(|x| x.residual.abs() <= 3.0 * x.stderr + 1e-12);
        let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
        let last = ratios.last().copied().unwrap_or(f64::NAN);
        // residuals of order εΔt come from the time discretization, not the expansion
        let slope_scale = r
            .rows
            .iter()
            .filter(|x| (x.tau - tau).abs() < 1e-12)
            .map(|x| (x.cost_difference / x.eps).abs())
            .fold(0.0, f64::max);
        let floor = 0.1 * ctx.grid.dt * (1.0 + slope_scale);
        let below_floor = ratios.iter().all(|&q| q <= floor);
        ctx.record(
            "mp-verify",
            &format!("expansion-trend@{tau}"),
            decreasing || exact || below_floor,
            last,
            floor,
            t0,
            format!("|residual|/ε over the schedule: {ratios:?}; within 3 se of zero: {exact}; discretization floor {floor:.3e}"),
        );
    }
    if raw.is_some() {
        let worst = r
            .rows
            .iter()
            .filter_map(|x| x.prediction_raw.map(|p| (p - x.prediction).abs()))
            .fold(0.0, f64::max);
        let tol = 10.0 * ctx.grid.dt;
        ctx.record(
            "mp-verify",
            "expansion-coherence",
            worst <= tol,
            worst,
            tol,
            t0,
            "assembled vs raw kernel prediction".into(),
        );
    }
    Ok(Ok(()))
}

fn adjoint1(ctx: &mut Ctx<'_>) -> Result<Step<()>, RunError> {
    let t0 = Instant::now();
    let adj = match ctx.adjoint() {
        Ok(a) => a,
        Err(e) => return Ok(Err(e)),
    };
    let n = ctx.sc.spec.dims().n;
    let mean_p = adj.mean_p();
    let mut header = vec!["t".to_string()];
    header.extend(n_cols("p", n));
    header.extend(n_cols("p_tilde", n));
    header.push("p_stderr".into());
    header.push("q_zero".into());
    let paths = adj.paths();
    let rows: Vec<Vec<f64>> = (0..adj.nodes())
        .map(|i| {
            let mut r = vec![ctx.grid.time(i as isize)];
            r.extend(mean_p[i].iter());
            let mut pt = vec![0.0; n];
            let mut qmax: f64 = 0.0;
            for p in 0..paths {
                for (a, v) in pt.iter_mut().zip(adj.p_tilde(p, i)) {
                    *a += v / paths as f64;
                }
                qmax = qmax.max(adj.q_matrix(p, i).amax());
            }
            r.extend(pt);
            r.push(adj.p_stderr[i]);
            r.push(if qmax == 0.0 { 1.0 } else { 0.0 });
            r
        })
        .collect();
    ctx.write_csv("adjoint1.csv", &header, &rows)?;

    #[derive(Serialize)]
    struct Routes {
        mode: AdjointMode,
        route_distance: Option<f64>,
        lambda_limit_distance: Option<f64>,
    }
    let mut routes = Routes {
        mode: adj.mode,
        route_distance: None,
        lambda_limit_distance: None,
    };
    if adj.mode == AdjointMode::Deterministic {
        let spec = &ctx.sc.spec.clone();
        let trace = match at(
            "route-equivalence",
            deterministic_trace(spec, &ctx.sc.reference, &ctx.reference, false),
        ) {
            Ok(t) => t,
            Err(e) => return Ok(Err(e)),
        };
        let svie = match at("route-equivalence", solve_first_adjoint_svie(spec, &trace)) {
            Ok(v) => v,
            Err(e) => return Ok(Err(e)),
        };
        let mut dist: f64 = 0.0;
        let mut sup: f64 = 0.0;
        for (i, s) in svie.iter().enumerate() {
            let p = adj.p(0, i);
            for c in 0..n {
                dist = dist.max((p[c] - s[c]).abs());
                sup = sup.max(p[c].abs());
            }
        }
        let tol = 10.0 * ctx.grid.dt * (1.0 + sup);
        ctx.record(
            "adjoint-first",
            "route-equivalence",
            dist <= tol,
            dist,
            tol,
            t0,
            "anticipated BSDE vs SVIE route".into(),
        );
        routes.route_distance = Some(dist);

        let t1 = Instant::now();
        let limit = |lambda: f64| -> sdde_mp::Result<Vec<nalgebra::DVector<f64>>> {
            let s = spec.with_lambda(lambda);
            let b = simulate_sdde(&s, &ctx.sc.reference, &ctx.bundle)?;
            let tr = deterministic_trace(&s, &ctx.sc.reference, &b, false)?;
            solve_first_adjoint_svie(&s, &tr)
        };
        let (a, b) = match (at("lambda-limit", limit(0.0)), at("lambda-limit", limit(1e-6))) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Ok(Err(e)),
        };
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
        ctx.record(
            "adjoint-first",
            "lambda-limit",
            d <= 1e-4,
            d,
            1e-4,
            t1,
            "λ = 0 branch vs λ = 1e-6".into(),
        );
        routes.lambda_limit_distance = Some(d);
    } else {
        let se = adj.p_stderr.iter().copied().fold(0.0, f64::max);
        ctx.record(
            "adjoint-first",
            "adjoint-regression",
            se.is_finite(),
            se,
            0.0,
            t0,
            "largest propagated regression standard error of p".into(),
        );
    }
    ctx.write_json("adjoint1.json", &routes)?;
    Ok(Ok(()))
}

fn adjoint2(ctx: &mut Ctx<'_>, case: Case) -> Result<Step<()>, RunError> {
    let t0 = Instant::now();
    let kernels = match ctx.kernels() {
        Ok(k) => k,
        Err(e) => return Ok(Err(e)),
    };
    let curly = assemble_curly_p(&kernels);
    let n = kernels.dim();
    let dt = ctx.grid.dt;
    let times: Vec<f64> = (0..curly.len()).map(|i| ctx.grid.time(i as isize)).collect();
    let curly_rows = |extra: &[&[DMatrix<f64>]]| -> Vec<Vec<f64>> {
        (0..curly.len())
            .map(|i| {
                let mut r = vec![times[i]];
                r.extend(flatten(curly.at(i)));
                for e in extra {
                    r.extend(flatten(&e[i]));
                }
                r
            })
            .collect()
    };
    let sup_of = |v: &[DMatrix<f64>]| v.iter().map(|m| m.amax()).fold(0.0, f64::max);
    match case {
        Case::General => {
            let mut header = vec!["t".to_string()];
            header.extend(matrix_cols("curly_p", n));
            ctx.write_csv("curly_p.csv", &header, &curly_rows(&[]))?;
            let scale = 1.0 + sup_of(&curly.values);
            let asym = curly.max_asymmetry();
            ctx.record(
                "adjoint-second",
                "curly-symmetry",
                asym <= 1e-10 * scale,
                asym,
                1e-10 * scale,
                t0,
                String::new(),
            );
            let compact = kernels.compact_curly_p();
            let d = sup_distance(&curly.values, &compact.values, 1);
            ctx.record(
                "adjoint-second",
                "compact-identity",
                d <= 1e-10 * scale,
                d,
                1e-10 * scale,
                t0,
                String::new(),
            );
            #[derive(Serialize)]
            struct Summary {
                max_asymmetry: f64,
                compact_distance: f64,
                curly_p_at_0: Vec<f64>,
            }
            let s = Summary {
                max_asymmetry: asym,
                compact_distance: d,
                curly_p_at_0: flatten(curly.at(0)).collect(),
            };
            ctx.write_json("adjoint2.json", &s)?;
        }
        Case::Lq => {
            let lq = match ctx.sc.lq.clone() {
                Some(l) => l,
                None => {
                    return Ok(Err((
                        "lq-ode".into(),
                        sdde_mp::Error::Mode(format!("scenario {} has no LQ form", ctx.sc.name)),
                    )))
                }
            };
            let ode = match at("lq-ode", solve_lq_p_ode(&lq, dt)) {
                Ok(o) => o,
                Err(e) => return Ok(Err(e)),
            };
            // with A = C̄ = 0 the ODE integrates in closed form
            let t1 = Instant::now();
            if lq.a.amax() == 0.0 && lq.cbar.amax() == 0.0 {
                let mut worst: f64 = 0.0;
                for (i, m) in ode.values.iter().enumerate() {
                    let s = times[i];
                    let exact = &lq.g + &lq.q00 * (lq.horizon - s) + &lq.q11 * (lq.horizon - lq.delta - s).max(0.0);
                    worst = worst.max((m - exact).amax());
                }
                ctx.record(
                    "adjoint-second",
                    "lq-ode",
                    worst <= 1e-6,
                    worst,
                    1e-6,
                    t1,
                    "method of steps vs closed form".into(),
                );
            } else {
                let fine = match at("lq-ode", solve_lq_p_ode(&lq, dt / 2.0)) {
                    Ok(o) => o,
                    Err(e) => return Ok(Err(e)),
                };
                let d = sup_distance(&ode.values, &fine.values, 1);
                let coarse: Vec<_> = fine.values.iter().step_by(2).cloned().collect();
                let d = d.min(sup_distance(&ode.values, &coarse, 1));
                let tol = 1e-6 * (1.0 + sup_of(&ode.values));
                ctx.record(
                    "adjoint-second",
                    "lq-ode",
                    d <= tol,
                    d,
                    tol,
                    t1,
                    "step-halving self-consistency".into(),
                );
            }
            let sup = sup_of(&ode.values);
            let d = sup_distance(&curly.values, &ode.values, 1);
            let tol = 0.02 * (1.0 + sup);
            ctx.record(
                "adjoint-second",
                "curly-consistency",
                d <= tol,
                d,
                tol,
                t0,
                "kernel assembly vs LQ ODE".into(),
            );
            let mut header = vec!["t".to_string()];
            header.extend(matrix_cols("curly_p", n));
            header.extend(matrix_cols("lq_ode", n));
            ctx.write_csv("lq.csv", &header, &curly_rows(&[&ode.values]))?;
        }
        Case::Classical => {
            let spec = &ctx.sc.spec;
            let trace = match at(
                "classical-consistency",
                deterministic_trace(spec, &ctx.sc.reference, &ctx.reference, true),
            ) {
                Ok(t) => t,
                Err(e) => return Ok(Err(e)),
            };
            let adj = match at("classical-consistency", solve_first_adjoint_deterministic(spec, &trace)) {
                Ok(a) => a,
                Err(e) => return Ok(Err(e)),
            };
            let pbar = match at("classical-consistency", solve_classical_p_bsde(spec, &trace, &adj)) {
                Ok(p) => p,
                Err(e) => return Ok(Err(e)),
            };
            let sup = sup_of(&pbar);
            let d = sup_distance(&curly.values, &pbar, 1);
            let tol = 0.02 * (1.0 + sup);
            ctx.record(
                "adjoint-second",
                "classical-consistency",
                d <= tol,
                d,
                tol,
                t0,
                "kernel assembly vs delay-free matrix ODE".into(),
            );
            let off = kernels.off_xx_max();
            ctx.record(
                "adjoint-second",
                "classical-cross-blocks",
                off == 0.0,
                off,
                0.0,
                t0,
                "kernel entries outside the x-x blocks".into(),
            );
            let mut header = vec!["t".to_string()];
            header.extend(matrix_cols("curly_p", n));
            header.extend(matrix_cols("p_bar", n));
            ctx.write_csv("classical.csv", &header, &curly_rows(&[&pbar]))?;
        }
    }
    Ok(Ok(()))
}

fn duality(ctx: &mut Ctx<'_>) -> Result<Step<()>, RunError> {
    let t0 = Instant::now();
    let sc = &ctx.sc;
    let adj = match at(
        "duality",
        solve_first_adjoint(
            &sc.spec,
            &sc.reference,
            &ctx.reference,
            &ctx.bundle,
            AdjointMode::Deterministic,
        ),
    ) {
        Ok(a) => a,
        Err(e) => return Ok(Err(e)),
    };
    let ue = match at(
        "duality",
        spike_perturb(&sc.reference, ctx.tau0(), ctx.cfg.eps[0], &sc.spike),
    ) {
        Ok(u) => u,
        Err(e) => return Ok(Err(e)),
    };
    let r = match at(
        "duality",
        duality_check(&sc.spec, &sc.reference, &ue, &ctx.bundle, &ctx.reference, &adj),
    ) {
        Ok(r) => r,
        Err(e) => return Ok(Err(e)),
    };
    let tol = if r.stderr_combined > 0.0 {
        3.0 * r.stderr_combined
    } else {
        1e-3
    };
    ctx.write_json("duality.json", &r)?;
    ctx.record(
        "adjoint-first",
        "duality",
        r.difference.abs() <= tol,
        r.difference,
        tol,
        t0,
        format!("LHS = {}, RHS = {}", r.lhs, r.rhs),
    );
    Ok(Ok(()))
}

fn verify_mp(ctx: &mut Ctx<'_>) -> Result<Step<()>, RunError> {
    let t0 = Instant::now();
    let adj = match ctx.adjoint() {
        Ok(a) => a,
        Err(e) => return Ok(Err(e)),
    };
    let curly: CurlyP = match ctx.kernels() {
        Ok(k) => assemble_curly_p(&k),
        Err(e) => return Ok(Err(e)),
    };
    let sc = &ctx.sc;
    let r = match at(
        "max-condition",
        max_condition_scan(&sc.spec, &sc.reference, &ctx.reference, &adj, &curly, ctx.cfg.tol),
    ) {
        Ok(r) => r,
        Err(e) => return Ok(Err(e)),
    };
    let header: Vec<String> = ["tau", "v_index", "value", "stderr", "instant", "delayed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<f64>> = r
        .rows
        .iter()
        .map(|x| vec![x.tau, x.v_index as f64, x.value, x.stderr, x.instant, x.delayed])
        .collect();
    ctx.write_csv("scan.csv", &header, &rows)?;
    #[derive(Serialize)]
    struct Summary {
        passed: bool,
        min_value: f64,
        argmin_tau: f64,
        argmin_v: usize,
        violations: usize,
        delayed_exercised: bool,
        tol_floor: f64,
    }
    let worst_se = r.worst().map_or(0.0, |w| w.stderr);
    let s = Summary {
        passed: r.passed,
        min_value: r.min_value,
        argmin_tau: ctx.grid.time(r.argmin_node as isize),
        argmin_v: r.argmin_v,
        violations: r.violations,
        delayed_exercised: r.delayed_exercised,
        tol_floor: r.tol_floor,
    };
    ctx.write_json("scan.json", &s)?;
    ctx.record(
        "mp-verify",
        "max-condition",
        r.passed,
        r.min_value,
        r.tol_floor + 3.0 * worst_se,
        t0,
        format!(
            "{} violating pairs; delayed term exercised: {}",
            r.violations, r.delayed_exercised
        ),
    );
    Ok(Ok(()))
}

/// Runs one pipeline (or all of them), writing artifacts under `cfg.out`.
pub fn run_scenario(cfg: &ScenarioConfig, cmd: Command) -> Result<RunReport, RunError> {
    run_with_case(cfg, cmd, cfg.case)
}

pub fn run_with_case(cfg: &ScenarioConfig, cmd: Command, case: Case) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let sc = cfg.build()?;
    let module_err = |module: &str, check: &str, e: sdde_mp::Error| RunError::Module {
        module: module.into(),
        check: check.into(),
        source: e,
    };
    let grid = sc.spec.grid().map_err(|e| module_err("noise-paths", "grid", e))?;
    let d = sc.spec.dims().d;
    let bundle = if cfg.antithetic {
        generate_antithetic(cfg.seed, &grid, cfg.paths / 2, d)
    } else {
        generate(cfg.seed, &grid, cfg.paths, d)
    }
    .map_err(|e| module_err("noise-paths", "generate", e))?;
    let reference =
        simulate_sdde(&sc.spec, &sc.reference, &bundle).map_err(|e| module_err("sdde-forward", "simulate", e))?;
    fs::create_dir_all(&cfg.out).map_err(io)?;

    let env = EnvStamp {
        seed: cfg.seed,
        steps: grid.steps,
        paths: cfg.paths,
        dt: grid.dt,
        delta: sc.spec.delay.delta,
        lambda: sc.spec.delay.lambda,
        horizon: sc.spec.delay.horizon,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut ctx = Ctx {
        cfg,
        sc,
        grid,
        bundle,
        reference,
        checks: Vec::new(),
        artifacts: Vec::new(),
        adjoint: None,
        kernels: None,
    };
    let mut skipped = Vec::new();

    let mut plan: Vec<(&str, &str, Pipeline)> = Vec::new();
    let single = cmd != Command::All;
    let want = |c: Command| single && cmd == c || !single;
    if want(Command::Simulate) {
        plan.push(("simulate", "sdde-forward", Box::new(simulate)));
    }
    if want(Command::OrderCheck) {
        plan.push(("order-check", "variational", Box::new(order_check)));
    }
    if want(Command::Expansion) {
        plan.push(("expansion", "mp-verify", Box::new(expansion)));
    }
    if want(Command::Adjoint1) {
        plan.push(("adjoint1", "adjoint-first", Box::new(adjoint1)));
    }
    if single && cmd == Command::Adjoint2 {
        plan.push((
            "adjoint2",
            "adjoint-second",
            Box::new(move |c: &mut Ctx<'_>| adjoint2(c, case)),
        ));
    } else if !single {
        plan.push((
            "adjoint2 general",
            "adjoint-second",
            Box::new(|c: &mut Ctx<'_>| adjoint2(c, Case::General)),
        ));
        if ctx.sc.lq.is_some() {
            plan.push((
                "adjoint2 lq",
                "adjoint-second",
                Box::new(|c: &mut Ctx<'_>| adjoint2(c, Case::Lq)),
            ));
        }
        plan.push((
            "adjoint2 classical",
            "adjoint-second",
            Box::new(|c: &mut Ctx<'_>| adjoint2(c, Case::Classical)),
        ));
    }
    if want(Command::Duality) {
        plan.push(("duality", "adjoint-first", Box::new(duality)));
    }
    if single && cmd == Command::VerifyMp {
        plan.push(("verify-mp", "mp-verify", Box::new(verify_mp)));
    } else if !single {
        if ctx.sc.optimal {
            plan.push(("verify-mp", "mp-verify", Box::new(verify_mp)));
        } else {
            skipped.push(Skipped {
                pipeline: "verify-mp".into(),
                reason: "reference control is not declared optimal".into(),
            });
        }
    }

    for (name, module, step) in plan {
        match step(&mut ctx)? {
            Ok(()) => {}
            Err((check, e)) => {
                // inside `all`, a pipeline whose preconditions do not hold is skipped
                let precondition = matches!(e, sdde_mp::Error::Mode(_) | sdde_mp::Error::Basis(_));
                if single || !precondition {
                    return Err(module_err(module, &check, e));
                }
                skipped.push(Skipped {
                    pipeline: name.to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }

    let passed = ctx.checks.iter().all(|c| c.passed);
    let mut report = RunReport {
        scenario: ctx.sc.name.clone(),
        command: cmd.name().to_string(),
        env,
        checks: ctx.checks,
        skipped,
        artifacts: ctx.artifacts,
        passed,
    };
    report.artifacts.push("report.json".into());
    let text = serde_json::to_string_pretty(&report).map_err(io)?;
    fs::write(ctx.cfg.out.join("report.json"), text).map_err(io)?;
    Ok(report)
}

/// Loads `path`, applies CLI overrides and runs.
pub fn run_from_file(
    path: &Path,
    cmd: Command,
    seed: Option<u64>,
    out: Option<PathBuf>,
    case: Option<Case>,
) -> Result<RunReport, RunError> {
    let mut cfg = crate::config::load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    run_with_case(&cfg, cmd, case.unwrap_or(cfg.case))
}
