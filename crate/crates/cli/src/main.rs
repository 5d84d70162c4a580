use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdde_mp_cli::{run_from_file, Case, Command, RunReport};

#[derive(Parser)]
#[command(
    name = "sdde-mp",
    version,
    about = "Spike-variation maximum principle checks for stochastic delay equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Forward simulation and cost estimate.
    Simulate(Common),
    /// Moment orders of the first and second variations.
    OrderCheck(Common),
    /// Second-order spike expansion against finite differences.
    Expansion(Common),
    /// First-order adjoint and its route/limit checks.
    Adjoint1(Common),
    /// Second-order curvature process.
    Adjoint2 {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        case: Option<Case>,
    },
    /// First-order duality identity.
    Duality(Common),
    /// Maximum-condition scan over (τ, v).
    VerifyMp(Common),
    /// Every pipeline that applies to the scenario.
    All(Common),
}

fn print_report(r: &RunReport) {
    let mut out = std::io::stdout().lock();
    // a closed pipe is not an error worth reporting
    let _ = write_report(&mut out, r);
}

fn write_report(out: &mut impl Write, r: &RunReport) -> std::io::Result<()> {
    for c in &r.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "[{tag}] {:<24} {:<16} value={:.6e} tol={:.3e} ({:.2}s) {}",
            c.name, c.module, c.value, c.tolerance, c.runtime_s, c.detail
        )?;
    }
    for s in &r.skipped {
        writeln!(out, "[SKIP] {}: {}", s.pipeline, s.reason)?;
    }
    writeln!(
        out,
        "{} {}: {}",
        r.scenario,
        r.command,
        if r.passed { "passed" } else { "FAILED" }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common, case) = match cli.command {
        Sub::Simulate(c) => (Command::Simulate, c, None),
        Sub::OrderCheck(c) => (Command::OrderCheck, c, None),
        Sub::Expansion(c) => (Command::Expansion, c, None),
        Sub::Adjoint1(c) => (Command::Adjoint1, c, None),
        Sub::Adjoint2 { common, case } => (Command::Adjoint2, common, case),
        Sub::Duality(c) => (Command::Duality, c, None),
        Sub::VerifyMp(c) => (Command::VerifyMp, c, None),
        Sub::All(c) => (Command::All, c, None),
    };
    match run_from_file(&common.config, cmd, common.seed, common.out, case) {
        Ok(report) => {
            print_report(&report);
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
