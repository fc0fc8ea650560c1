//! Sampled convexity of the follower's and the leader's homogeneous costs:
//! J(0; u) / |u|^2 along random piecewise constant directions. Positive
//! ratios are consistent with the uniform convexity the solver assumes.

use stackelberg_lq::presets::{rd_competition, RdParams};
use stackelberg_lq::simulate::SimConfig;
use stackelberg_lq::verify::{convexity_probe, ProbeProblem};
use stackelberg_lq::TimeGrid;

fn main() -> stackelberg_lq::Result<()> {
    let spec = rd_competition(&RdParams::default());
    let grid = TimeGrid::new(spec.horizon, 500)?;
    let cfg = SimConfig::new(2000, 1, 3);
    for problem in [ProbeProblem::Follower, ProbeProblem::Leader] {
        let r = convexity_probe(&spec, problem, 10, &cfg, &grid)?;
        println!("{problem:?}: min ratio {:.4}", r.min_ratio);
        for (x, se) in r.ratios.iter().zip(&r.ratio_se) {
            println!("  {x:.5} +- {se:.1e}");
        }
    }
    Ok(())
}
