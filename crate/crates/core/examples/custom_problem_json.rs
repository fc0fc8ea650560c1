//! Load a problem from JSON (a built-in two-dimensional game if no path is
//! given), solve it, write the CSV artifacts and simulate the closed loop.
//!
//! `cargo run --release --example custom_problem_json -- problem.json out/`

use serde_json::json;
use stackelberg_lq::cli::emit_csv;
use stackelberg_lq::leader::solve_equilibrium;
use stackelberg_lq::model::{load_spec, spec_from_json};
use stackelberg_lq::simulate::{simulate_closed_loop, SimConfig};
use stackelberg_lq::TimeGrid;

fn main() -> stackelberg_lq::Result<()> {
    let mut args = std::env::args().skip(1);
    let spec = match args.next() {
        Some(p) => load_spec(p.as_ref())?,
        None => spec_from_json(&json!({
            "horizon": 2.0,
            "dims": { "n": 2, "m1": 1, "m2": 1 },
            "x0": [1.0, -0.5],
            "dynamics": {
                "A": [[0.0, 1.0], [-1.0, -0.2]],
                "B1": [[0.0], [1.0]],
                "B2": [[1.0], [0.0]],
                "C": [[0.1, 0.0], [0.0, 0.1]],
                "D1": [[0.0], [0.2]],
                "b": [0.0, 0.1]
            },
            "player1": { "Q": [[1.0, 0.0], [0.0, 0.5]], "R11": [[1.0]], "G": [[1.0, 0.0], [0.0, 1.0]], "q": [0.1, 0.0] },
            "player2": { "Q": [[0.5, 0.0], [0.0, 0.0]], "R22": [[2.0]], "R12": [[0.1]], "G": [[0.5, 0.0], [0.0, 0.0]] }
        }))?,
    };
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "custom_out".into()));
    std::fs::create_dir_all(&out)?;

    let grid = TimeGrid::new(spec.horizon, 1000)?;
    let eq = solve_equilibrium(&spec, &grid)?;
    emit_csv(&eq.follower.p1, "P1_", &out.join("follower_P1.csv"))?;
    emit_csv(&eq.leader.p, "P", &out.join("leader_P.csv"))?;
    emit_csv(&eq.leader.eta, "eta", &out.join("eta.csv"))?;
    println!("P(0) =\n{}", eq.leader.p.get(0));
    println!("leader certificates: {:?}", eq.leader.certificates);

    let r = simulate_closed_loop(&eq, &SimConfig::new(20_000, 1, 1))?;
    println!("J1 = {:.6} +- {:.1e}, J2 = {:.6} +- {:.1e}", r.j1.mean, r.j1.se, r.j2.mean, r.j2.se);
    println!("wrote {}", out.display());
    Ok(())
}
