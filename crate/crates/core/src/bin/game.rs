use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use stackelberg_lq::cli::{run, Command, RunConfig};

#[derive(Clone, Copy, ValueEnum)]
enum Cmd {
    Solve,
    Simulate,
    Verify,
    ExampleRd,
    ExampleOpenloop,
}

/// Closed-loop Stackelberg solver for linear-quadratic stochastic games.
#[derive(Parser)]
#[command(name = "game", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// Problem JSON (not needed for the example commands).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Solver grid steps.
    #[arg(long, default_value_t = 2000)]
    grid: usize,
    /// Monte Carlo paths.
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Euler steps per grid step.
    #[arg(long, default_value_t = 1)]
    substeps: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Override the horizon T.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Monte Carlo worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Write this many sample paths to trajectories.csv.
    #[arg(long)]
    dump: Option<usize>,
}

fn main() -> ExitCode {
    let a = Args::parse();
    let command = match a.command {
        Cmd::Solve => Command::Solve,
        Cmd::Simulate => Command::Simulate,
        Cmd::Verify => Command::Verify,
        Cmd::ExampleRd => Command::ExampleRd,
        Cmd::ExampleOpenloop => Command::ExampleOpenloop,
    };
    let cfg = RunConfig {
        command,
        input: a.input,
        grid: a.grid,
        paths: a.paths,
        substeps: a.substeps,
        seed: a.seed,
        horizon: a.horizon,
        out: a.out,
        threads: a.threads,
        dump: a.dump,
    };
    ExitCode::from(run(&cfg) as u8)
}
