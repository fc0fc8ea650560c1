#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stackelberg_lq::follower::follower_riccati_field;
use stackelberg_lq::leader::{leader_riccati_field, AugmentedSystem};
use stackelberg_lq::model::{CoefficientPath, Dims, GameSpec};
use stackelberg_lq::numerics::MatrixPath;

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

fn spd(rng: &mut ChaCha8Rng, n: usize, s: f64, shift: f64) -> DMatrix<f64> {
    let l = gauss(rng, n, n, s);
    &l * l.transpose() + DMatrix::identity(n, n) * shift
}

fn path(m: DMatrix<f64>) -> CoefficientPath {
    CoefficientPath::Constant(m)
}

/// Random small game with definite control weights. `restricted` removes
/// `B1`, `D1` and `D2`, which makes the leader's augmented problem a plain
/// state-feedback LQR problem.
pub fn random_game(seed: u64, restricted: bool) -> GameSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let m1 = rng.random_range(1..=3);
    let m2 = rng.random_range(1..=3);
    let mut s = GameSpec::zeros(Dims::new(n, m1, m2), 1.0);
    s.x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let r = &mut rng;
    s.dynamics.a = path(gauss(r, n, n, 0.5));
    s.dynamics.b2 = path(gauss(r, n, m2, 0.5));
    s.dynamics.c = path(gauss(r, n, n, 0.2));
    s.dynamics.b = path(gauss(r, n, 1, 0.2));
    s.dynamics.sigma = path(gauss(r, n, 1, 0.2));
    if !restricted {
        s.dynamics.b1 = path(gauss(r, n, m1, 0.5));
        s.dynamics.d1 = path(gauss(r, n, m1, 0.2));
        s.dynamics.d2 = path(gauss(r, n, m2, 0.2));
    }
    for p in [&mut s.player1, &mut s.player2] {
        p.q = path(spd(r, n, 0.5, 0.0));
        p.s1 = path(gauss(r, m1, n, 0.1));
        p.s2 = path(gauss(r, m2, n, 0.1));
        p.r11 = path(spd(r, m1, 0.3, 1.0));
        let r12 = gauss(r, m1, m2, 0.1);
        p.r21 = path(r12.transpose());
        p.r12 = path(r12);
        p.r22 = path(spd(r, m2, 0.3, 1.0));
        p.q_lin = path(gauss(r, n, 1, 0.2));
        p.rho1 = path(gauss(r, m1, 1, 0.2));
        p.rho2 = path(gauss(r, m2, 1, 0.2));
        p.g_mat = spd(r, n, 0.5, 0.0);
        p.g_lin = DVector::from_column_slice(gauss(r, n, 1, 0.2).as_slice());
    }
    s
}

/// Largest Simpson residual `|P(t+2h) - P(t) - h/3 (F0 + 4 F1 + F2)| / 2h` over
/// consecutive node pairs, where `F` is `dP/dt` at a node.
pub fn simpson_residual(p: &MatrixPath, field: impl Fn(usize, &DMatrix<f64>) -> DMatrix<f64>) -> f64 {
    let h = p.grid().dt();
    let f: Vec<DMatrix<f64>> = (0..p.len()).map(|k| field(k, &p.get(k))).collect();
    (0..p.len() - 2)
        .step_by(2)
        .map(|k| {
            let r = p.get(k + 2) - p.get(k) - (&f[k] + &f[k + 1] * 4.0 + &f[k + 2]) * (h / 3.0);
            r.amax() / (2.0 * h)
        })
        .fold(0.0, f64::max)
}

pub fn follower_residual(spec: &GameSpec, p1: &MatrixPath) -> f64 {
    let g = *p1.grid();
    simpson_residual(p1, |k, p| follower_riccati_field(&spec.coefficients_at(g.t(k)).unwrap(), p))
}

pub fn leader_residual(aug: &AugmentedSystem, p: &MatrixPath) -> f64 {
    let g = *p.grid();
    simpson_residual(p, |k, pk| {
        let t = g.t(k);
        leader_riccati_field(&aug.at(t).unwrap(), pk, t).unwrap()
    })
}
