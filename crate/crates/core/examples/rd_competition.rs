//! R&D competition: the Riccati trajectories P1 (follower) and the leader
//! blocks P1, P2, P4, printed every 0.1 time units. Pass a horizon as the
//! first argument to change T.

use stackelberg_lq::leader::solve_equilibrium;
use stackelberg_lq::presets::{rd_competition, RdParams};
use stackelberg_lq::TimeGrid;

fn main() -> stackelberg_lq::Result<()> {
    let horizon = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let spec = rd_competition(&RdParams { horizon, ..Default::default() });
    let grid = TimeGrid::new(horizon, 2000)?;
    let eq = solve_equilibrium(&spec, &grid)?;

    println!("{:>6} {:>12} {:>12} {:>12} {:>12}", "t", "P1 follower", "P1", "P2", "P4");
    for k in (0..grid.len()).step_by(200) {
        println!(
            "{:>6.3} {:>12.8} {:>12.8} {:>12.8} {:>12.8}",
            grid.t(k),
            eq.follower.p1.get(k)[(0, 0)],
            eq.leader.block(k, 0, 0)[(0, 0)],
            eq.leader.block(k, 0, 1)[(0, 0)],
            eq.leader.block(k, 1, 1)[(0, 0)],
        );
    }
    let eta = eq.leader.eta.get(0);
    let th = eq.leader.theta2.get(0);
    println!("eta(0) = {:?}, v2(0) = {:e}", eta.as_slice(), eq.leader.v2.get(0)[(0, 0)]);
    println!(
        "Theta2(0) = {:.10} = -P1(0); Theta2~(0) = {:.10} = -(P2 + P1 follower)(0)",
        th[(0, 0)],
        th[(0, 1)]
    );
    println!("leader value at x0 = 1: {:.10}", eq.leader.p.get(0)[(0, 0)]);
    Ok(())
}
