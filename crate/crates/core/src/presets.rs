//! Built-in problems used by the examples, the CLI and the tests.

use nalgebra::DVector;

use crate::model::{CoefficientPath, Dims, GameSpec};

fn scalar_game(horizon: f64) -> GameSpec {
    GameSpec::zeros(Dims::new(1, 1, 1), horizon)
}

/// Scalar follower problem `dx = u1 dt`, `J1 = int x^2 + u1^2`, whose Riccati
/// solution is `P1(t) = tanh(1 - t)`. The leader has no influence (`B2 = 0`)
/// and pays `int u2^2`.
pub fn tanh_follower() -> GameSpec {
    let mut s = scalar_game(1.0);
    s.x0 = DVector::from_element(1, 1.0);
    s.dynamics.b1 = CoefficientPath::scalar(1.0);
    s.player1.q = CoefficientPath::scalar(1.0);
    s.player1.r11 = CoefficientPath::scalar(1.0);
    s.player2.r22 = CoefficientPath::scalar(1.0);
    s
}

/// `dx = (u1 + u2) ds` on `[0, 1]`, `J1 = |x(1)|^2`,
/// `J2 = |x(1)|^2 + int |u2|^2`: open-loop solvable, not closed-loop solvable.
pub fn open_loop_only() -> GameSpec {
    let mut s = scalar_game(1.0);
    s.x0 = DVector::from_element(1, 1.0);
    s.dynamics.b1 = CoefficientPath::scalar(1.0);
    s.dynamics.b2 = CoefficientPath::scalar(1.0);
    s.player1.g_mat[(0, 0)] = 1.0;
    s.player2.g_mat[(0, 0)] = 1.0;
    s.player2.r22 = CoefficientPath::scalar(1.0);
    s
}

/// Parameters of the R&D competition game between two firms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdParams {
    /// Depreciation rate of the knowledge stock.
    pub gamma: f64,
    /// Squared effectiveness of the follower's effort.
    pub alpha2: f64,
    /// Squared volatility.
    pub beta2: f64,
    /// Normalized revenue weight `V / (2 x0^2)`.
    pub revenue: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Default for RdParams {
    fn default() -> Self {
        RdParams { gamma: 0.05, alpha2: 2.5, beta2: 0.000065, revenue: 0.8, horizon: 1.0, x0: 1.0 }
    }
}

/// R&D competition written as a minimization: the follower maximizes revenue
/// (weight `revenue` on `x^2`, cost on effort), the leader gains when the
/// follower's stock is small.
pub fn rd_competition(p: &RdParams) -> GameSpec {
    let mut s = scalar_game(p.horizon);
    s.x0 = DVector::from_element(1, p.x0);
    s.dynamics.a = CoefficientPath::scalar(-p.gamma / 2.0);
    s.dynamics.b1 = CoefficientPath::scalar(-p.alpha2.sqrt());
    s.dynamics.b2 = CoefficientPath::scalar(1.0);
    s.dynamics.c = CoefficientPath::scalar(p.beta2.sqrt());
    s.player1.q = CoefficientPath::scalar(p.revenue);
    s.player1.r11 = CoefficientPath::scalar(1.0);
    s.player2.q = CoefficientPath::scalar(-p.revenue);
    s.player2.r22 = CoefficientPath::scalar(1.0);
    s
}
