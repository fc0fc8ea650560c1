//! Follower Riccati solver on the scalar instance with P1(t) = tanh(1 - t):
//! error at t = 0 and observed convergence order.

use stackelberg_lq::follower::solve_follower_riccati;
use stackelberg_lq::presets::tanh_follower;
use stackelberg_lq::TimeGrid;

fn main() -> stackelberg_lq::Result<()> {
    let spec = tanh_follower();
    let exact = 1f64.tanh();
    let mut prev: Option<f64> = None;
    println!("{:>6} {:>22} {:>10} {:>6}", "N", "P1(0)", "error", "order");
    for n in [10, 20, 40, 80, 160, 1000] {
        let sol = solve_follower_riccati(&spec, &TimeGrid::new(1.0, n)?)?;
        let p0 = sol.p1.get(0)[(0, 0)];
        let err = (p0 - exact).abs();
        let order = match prev {
            Some(e) if n != 1000 => format!("{:.2}", (e / err).log2()),
            _ => String::new(),
        };
        println!("{n:>6} {p0:>22.16} {err:>10.2e} {order:>6}");
        prev = Some(err);
    }
    let sol = solve_follower_riccati(&spec, &TimeGrid::new(1.0, 1000)?)?;
    println!("certificates: {}", sol.certificates.describe());
    println!("gain at t = 0: {:.10} (expected -tanh(1))", sol.theta1.get(0)[(0, 0)]);
    Ok(())
}
