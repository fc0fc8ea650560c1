//! Linear-quadratic leader-follower (Stackelberg) stochastic differential
//! games: closed-loop equilibria by backward Riccati integration, Monte Carlo
//! evaluation and numerical verification.
//!
//! The follower's Riccati equation is solved first ([`follower`]); the leader
//! then faces a 2n-dimensional augmented problem ([`leader`]) whose solution
//! yields feedback policies for both players. [`simulate`] runs the closed
//! loop and [`verify`] checks optimality numerically. [`cli`] is the pipeline
//! behind the `game` binary.
//!
//! Runnable examples:
//!
//! ```text
//! cargo run --release --example follower_riccati
//! cargo run --release --example open_loop_only
//! cargo run --release --example rd_competition
//! cargo run --release --example value_function_mc
//! cargo run --release --example verify_equilibrium
//! cargo run --release --example custom_problem_json
//! cargo run --release --example convexity_probe
//! ```

pub mod cli;
pub mod error;
pub mod follower;
pub mod leader;
pub mod model;
pub mod numerics;
pub mod presets;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Dims, GameSpec, TimeGrid};
