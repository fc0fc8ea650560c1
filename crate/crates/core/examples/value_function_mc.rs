//! Monte Carlo costs of the R&D game under the equilibrium policy, against
//! the leader value <P1(0) x, x> and the follower value formula.

use stackelberg_lq::leader::solve_equilibrium;
use stackelberg_lq::presets::{rd_competition, RdParams};
use stackelberg_lq::simulate::{closed_loop_model, run_paths, SimConfig};
use stackelberg_lq::TimeGrid;

fn main() -> stackelberg_lq::Result<()> {
    let paths: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let spec = rd_competition(&RdParams::default());
    let grid = TimeGrid::new(spec.horizon, 1000)?;
    let eq = solve_equilibrium(&spec, &grid)?;
    let model = closed_loop_model(&eq, 1)?;
    let exact = model.expected();
    let v2 = eq.leader.p.get(0)[(0, 0)];

    let mut cfg = SimConfig::new(paths, 1, std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2024));
    cfg.richardson = true;
    let start = std::time::Instant::now();
    let r = run_paths(&model, &cfg)?;
    let ex = r.extrapolated.expect("richardson requested");
    println!("paths {paths}, dt {}, {:.2?}", r.dt, start.elapsed());
    println!("leader:   V2 = {v2:.8}  MC {:.8} +- {:.2e}  extrapolated {:.8} +- {:.2e}", r.j2.mean, r.j2.se, ex[1].mean, ex[1].se);
    println!("follower: V1 = {:.8}  MC {:.8} +- {:.2e}  extrapolated {:.8} +- {:.2e}", exact[2], r.j1.mean, r.j1.se, ex[0].mean, ex[0].se);
    println!("value formula along paths: {:.8} +- {:.2e}", r.aux.mean, r.aux.se);
    Ok(())
}
