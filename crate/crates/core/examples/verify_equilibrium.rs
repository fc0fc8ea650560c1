//! Numerical optimality checks of the R&D equilibrium: stationarity residual,
//! Gateaux derivatives, best-response inequalities and convexity probes.

use stackelberg_lq::leader::solve_equilibrium;
use stackelberg_lq::presets::{rd_competition, RdParams};
use stackelberg_lq::simulate::SimConfig;
use stackelberg_lq::verify::{verify_equilibrium, VerifyOptions};
use stackelberg_lq::TimeGrid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let paths: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let spec = rd_competition(&RdParams::default());
    let eq = solve_equilibrium(&spec, &TimeGrid::new(spec.horizon, 1000)?)?;
    let start = std::time::Instant::now();
    let report = verify_equilibrium(&eq, &VerifyOptions::new(SimConfig::new(paths, 1, 7)))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("{:.2?}", start.elapsed());
    Ok(())
}
