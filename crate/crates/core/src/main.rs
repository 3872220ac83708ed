use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use fbdsdej::config::{self, apply_overrides, parse_config, Overrides, EXIT_CONFIG};

#[derive(Parser)]
#[command(
    name = "fbdsdej",
    version,
    about = "Solver and verification toolkit for coupled forward-backward doubly stochastic systems with jumps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of time steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<String>,
    /// Continuation case: auto, 1 or 2.
    #[arg(long)]
    case: Option<String>,
    /// Picard convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Initial continuation step.
    #[arg(long)]
    delta: Option<f64>,
    /// Worker count; affects wall time only, never results.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify/estimate the monotonicity and Lipschitz hypotheses.
    Check(CommonArgs),
    /// Run the continuation ladder to alpha = 1.
    Solve(CommonArgs),
    /// Residual report for a closed form or a fresh solve.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Verify a named closed form instead of solving.
        #[arg(long)]
        closed_form: Option<String>,
    },
    /// Contraction ratios of the step map over an alpha grid.
    Probe {
        #[command(flatten)]
        common: CommonArgs,
        /// Random ensemble pairs per alpha.
        #[arg(long, default_value_t = 3)]
        pairs: usize,
        /// Explicit alpha grid (repeatable).
        #[arg(long = "alpha")]
        alphas: Vec<f64>,
    },
}

fn overrides_of(a: &CommonArgs) -> Overrides {
    Overrides {
        seed: a.seed,
        steps: a.steps,
        paths: a.paths,
        out: a.out.clone(),
        case: a.case.clone(),
        tol: a.tol,
        delta: a.delta,
        workers: a.workers,
    }
}

fn load(a: &CommonArgs) -> Result<(fbdsdej::config::RunConfig, Overrides), i32> {
    let ov = overrides_of(a);
    match parse_config(&a.config) {
        Ok(mut cfg) => {
            apply_overrides(&mut cfg, &ov);
            Ok((cfg, ov))
        }
        Err(e) => {
            eprintln!("config error: {e}");
            Err(EXIT_CONFIG)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Check(a) => run(a, |cfg, ov| config::run_check(cfg, ov)),
        Command::Solve(a) => run(a, |cfg, ov| config::run_solve(cfg, ov)),
        Command::Verify {
            common,
            closed_form,
        } => run(common, |cfg, ov| {
            config::run_verify(cfg, ov, closed_form.as_deref())
        }),
        Command::Probe {
            common,
            pairs,
            alphas,
        } => {
            let grid = if alphas.is_empty() {
                None
            } else {
                Some(alphas.clone())
            };
            run(common, move |cfg, ov| {
                config::run_probe(cfg, ov, *pairs, grid.clone())
            })
        }
    };
    ExitCode::from(code as u8)
}

fn run(
    a: &CommonArgs,
    f: impl Fn(&fbdsdej::config::RunConfig, &Overrides) -> Result<i32, config::ConfigError>,
) -> i32 {
    match load(a) {
        Ok((cfg, ov)) => match f(&cfg, &ov) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("config error: {e}");
                EXIT_CONFIG
            }
        },
        Err(code) => code,
    }
}
