//! A game with open-loop but no closed-loop Stackelberg equilibrium: the
//! follower's Riccati solution is P1 = 1 but R11 + D1' P1 D1 = 0 cannot
//! absorb B1' P1 = 1, so the range certificate fails.

use stackelberg_lq::follower::solve_follower_riccati;
use stackelberg_lq::leader::solve_equilibrium;
use stackelberg_lq::presets::open_loop_only;
use stackelberg_lq::TimeGrid;

fn main() -> stackelberg_lq::Result<()> {
    let spec = open_loop_only();
    let grid = TimeGrid::new(1.0, 100)?;
    let sol = solve_follower_riccati(&spec, &grid)?;
    let p1 = sol.p1.entry_series(0, 0);
    let dev = p1.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    println!("max |P1 - 1| over the grid: {dev:e}");
    println!("{:#?}", sol.certificates);
    match solve_equilibrium(&spec, &grid) {
        Ok(_) => println!("unexpected: equilibrium found"),
        Err(e) => println!("solve_equilibrium: {e} (unsolvable: {})", e.is_unsolvable()),
    }
    Ok(())
}
