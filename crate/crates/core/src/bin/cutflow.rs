use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cutflow::driver::{run_analysis, run_gradcheck, run_optimization, run_sweep, RunConfig, RunOptions};
use cutflow::{Error, Result};

#[derive(Parser)]
#[command(name = "cutflow", version, about = "CutFEM level-set topology optimization for laminar flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a fixed geometry and evaluate its criteria.
    Analyze(Common),
    /// Run the GCMMA design loop.
    Optimize(Common),
    /// Compare adjoint design gradients with finite differences.
    Gradcheck(Common),
    /// Repeat the analysis over the values of the [sweep] block.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Resume an optimization from a checkpoint file.
    #[arg(long)]
    restart: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Sequential factorization for bit-reproducible results.
    #[arg(long)]
    strict_order: bool,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Analyze(c) | Command::Optimize(c) | Command::Gradcheck(c) | Command::Sweep(c)) = &cli.command;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot set up {n} threads: {e}")))?;
    }
    cutflow::linalg::set_sequential_factorization(c.strict_order);
    let config = RunConfig::load(&c.config)?;
    if c.restart.is_some() && !matches!(cli.command, Command::Optimize(_)) {
        return Err(Error::Config("--restart only applies to optimize".into()));
    }
    let opts = RunOptions { output: c.output.clone(), restart: c.restart.clone() };
    match cli.command {
        Command::Analyze(_) => {
            let s = run_analysis(&config, &opts)?;
            for (name, v) in &s.criteria {
                println!("{name} = {v:.10e}");
            }
            println!("interface_mass_flow = {:.3e}", s.interface_mass_flow);
        }
        Command::Optimize(_) => {
            let r = run_optimization(&config, &opts)?;
            println!(
                "iterations = {}, objective = {:.10e}, converged = {}, feasible = {}",
                r.iterations, r.values.objective, r.converged, r.feasible
            );
        }
        Command::Gradcheck(_) => {
            for row in run_gradcheck(&config, &opts)? {
                println!(
                    "{} s[{}]: adjoint {:.10e} fd {:.10e} rel {:.2e}",
                    row.function,
                    row.variable,
                    row.analytic,
                    row.finite_difference,
                    row.relative_error()
                );
            }
        }
        Command::Sweep(_) => {
            let names: Vec<&str> = config.criteria.iter().map(|c| c.name.as_str()).collect();
            for (v, a) in run_sweep(&config, &opts)? {
                let vals: Vec<String> = names.iter().zip(&a.values).map(|(n, x)| format!("{n} = {x:.6e}")).collect();
                println!("{v:e}: {}", vals.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
