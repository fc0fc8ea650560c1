//! The follower's closed-loop problem for a given leader control: Riccati
//! equation, solvability certificates, gain, auxiliary backward equation and
//! value.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Coefficients, GameSpec, TimeGrid};
use crate::numerics::{
    integrate_backward_rk4_with, min_eigenvalue, pinv_matrix, range_defect_with, symmetrize, MatrixPath, CERT_TOL,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificates {
    /// `R11 + D1' P1 D1 >= 0` at every node.
    pub psd_ok: bool,
    /// Range inclusion of `B1' P1 + D1' P1 C + S11` in that of `R11 + D1' P1 D1`.
    pub range_ok: bool,
    pub min_eigenvalue: f64,
    pub max_range_defect: f64,
    /// First node time at which a certificate failed.
    pub first_failure: Option<f64>,
}

impl Certificates {
    pub fn passed(&self) -> bool {
        self.psd_ok && self.range_ok
    }

    pub fn describe(&self) -> String {
        match (self.psd_ok, self.range_ok) {
            (true, true) => "certificates passed".into(),
            (false, true) => "positivity condition violated".into(),
            (true, false) => "range condition violated".into(),
            (false, false) => "positivity condition violated; range condition violated".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FollowerSolution {
    pub p1: MatrixPath,
    /// Minimal-norm gain `-Rhat11^† Shat11`, filled even when certificates fail.
    pub theta1: MatrixPath,
    /// `R11 + D1' P1 D1` per node.
    pub rhat11: MatrixPath,
    pub certificates: Certificates,
}

impl FollowerSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.p1.grid()
    }

    /// The same solution on a grid with `1/factor` as many steps.
    pub fn subsample(&self, factor: usize) -> Result<FollowerSolution> {
        Ok(FollowerSolution {
            p1: self.p1.subsample(factor)?,
            theta1: self.theta1.subsample(factor)?,
            rhat11: self.rhat11.subsample(factor)?,
            certificates: self.certificates.clone(),
        })
    }
}

/// `R11 + D1' P D1`.
pub fn rhat11(c: &Coefficients, p: &DMatrix<f64>) -> DMatrix<f64> {
    &c.players[0].r11 + c.d1.transpose() * p * &c.d1
}

/// `B1' P + D1' P C + S11`.
pub fn shat11(c: &Coefficients, p: &DMatrix<f64>) -> DMatrix<f64> {
    c.b1.transpose() * p + c.d1.transpose() * p * &c.c + &c.players[0].s1
}

/// Right side `dP1/dt` of the follower Riccati equation.
pub fn follower_riccati_field(c: &Coefficients, p: &DMatrix<f64>) -> DMatrix<f64> {
    let w = &c.players[0];
    let s = shat11(c, p);
    let rp = pinv_matrix(&rhat11(c, p));
    let core = p * &c.a + c.a.transpose() * p + c.c.transpose() * p * &c.c + &w.q - s.transpose() * rp * &s;
    -core
}

pub fn solve_follower_riccati(spec: &GameSpec, grid: &TimeGrid) -> Result<FollowerSolution> {
    let frozen = if spec.is_constant() { Some(spec.coefficients_at(0.0)?) } else { None };
    let coef = |t: f64| -> Result<std::borrow::Cow<'_, Coefficients>> {
        match &frozen {
            Some(c) => Ok(std::borrow::Cow::Borrowed(c)),
            None => Ok(std::borrow::Cow::Owned(spec.coefficients_at(t)?)),
        }
    };
    let p1 = integrate_backward_rk4_with(
        |_, t, p| Ok(follower_riccati_field(&*coef(t)?, p)),
        spec.player1.g_mat.clone(),
        grid,
        symmetrize,
    )?;

    let (m1, n) = (spec.dims.m1, spec.dims.n);
    let mut theta1 = MatrixPath::zeros(*grid, m1, n);
    let mut rhat = MatrixPath::zeros(*grid, m1, m1);
    let mut cert = Certificates {
        psd_ok: true,
        range_ok: true,
        min_eigenvalue: f64::INFINITY,
        max_range_defect: 0.0,
        first_failure: None,
    };
    for k in 0..grid.len() {
        let t = grid.t(k);
        let c = coef(t)?;
        let p = p1.get(k);
        let r = rhat11(&c, &p);
        let s = shat11(&c, &p);
        let lam = min_eigenvalue(&r);
        let rp = pinv_matrix(&r);
        let defect = range_defect_with(&s, &r, &rp);
        let psd = lam >= -CERT_TOL;
        let range = defect <= CERT_TOL * s.norm().max(1.0);
        cert.min_eigenvalue = cert.min_eigenvalue.min(lam);
        cert.max_range_defect = cert.max_range_defect.max(defect);
        if !(psd && range) && cert.first_failure.is_none() {
            cert.first_failure = Some(t);
        }
        cert.psd_ok &= psd;
        cert.range_ok &= range;
        theta1.set(k, &-(rp * s));
        rhat.set(k, &r);
    }
    Ok(FollowerSolution { p1, theta1, rhat11: rhat, certificates: cert })
}

fn require_certificates(sol: &FollowerSolution) -> Result<()> {
    if sol.certificates.passed() {
        Ok(())
    } else {
        Err(Error::Certificate(sol.certificates.describe()))
    }
}

/// Minimal-norm follower gain path.
pub fn follower_gain(sol: &FollowerSolution) -> Result<MatrixPath> {
    require_certificates(sol)?;
    Ok(sol.theta1.clone())
}

#[derive(Debug, Clone)]
pub struct FollowerAux {
    pub eta1: MatrixPath,
    pub v1: MatrixPath,
}

struct AuxTerms {
    rp: DMatrix<f64>,
    /// `B1' eta + R12hat u2 + D1' P1 sigma + rho11`, without the `B1' eta` part.
    w_const: DMatrix<f64>,
}

fn aux_terms(c: &Coefficients, p: &DMatrix<f64>, u2: &DMatrix<f64>) -> AuxTerms {
    let w = &c.players[0];
    let r = rhat11(c, p);
    let rp = pinv_matrix(&r);
    let r12 = &w.r12 + c.d1.transpose() * p * &c.d2;
    let w_const = r12 * u2 + c.d1.transpose() * p * &c.sigma + &w.rho1;
    AuxTerms { rp, w_const }
}

/// Right side `d eta1/dt` of the follower's auxiliary equation for a
/// deterministic leader control.
fn aux_field(c: &Coefficients, p: &DMatrix<f64>, u2: &DMatrix<f64>, eta: &DMatrix<f64>) -> DMatrix<f64> {
    let w = &c.players[0];
    let s = shat11(c, p);
    let AuxTerms { rp, w_const } = aux_terms(c, p, u2);
    let gen = c.a.transpose() * eta + (c.c.transpose() * p * &c.d2 + w.s2.transpose() + p * &c.b2) * u2
        - s.transpose() * &rp * (c.b1.transpose() * eta + w_const)
        + c.c.transpose() * p * &c.sigma
        + &w.q_lin
        + p * &c.b;
    -gen
}

/// Backward equation for `eta1` and the offset `v1` for a deterministic leader
/// control sampled on its own grid (which the result shares). `P1` is read
/// from `sol` by interpolation, so `sol` may live on a finer grid.
pub fn solve_follower_aux(spec: &GameSpec, sol: &FollowerSolution, u2_profile: &MatrixPath) -> Result<FollowerAux> {
    require_certificates(sol)?;
    if u2_profile.shape() != (spec.dims.m2, 1) {
        return Err(Error::Shape(format!("u2 profile must be {}x1", spec.dims.m2)));
    }
    let grid = *u2_profile.grid();
    let g1 = DMatrix::from_column_slice(spec.dims.n, 1, spec.player1.g_lin.as_slice());
    let eta1 = integrate_backward_rk4_with(
        |_, t, eta| {
            let c = spec.coefficients_at(t)?;
            Ok(aux_field(&c, &sol.p1.at(t)?, &u2_profile.at(t)?, eta))
        },
        g1,
        &grid,
        |_| {},
    )?;
    let mut v1 = MatrixPath::zeros(grid, spec.dims.m1, 1);
    for k in 0..grid.len() {
        let t = grid.t(k);
        let c = spec.coefficients_at(t)?;
        let p = sol.p1.at(t)?;
        let AuxTerms { rp, w_const } = aux_terms(&c, &p, &u2_profile.get(k));
        v1.set(k, &-(rp * (c.b1.transpose() * eta1.get(k) + w_const)));
    }
    Ok(FollowerAux { eta1, v1 })
}

/// Integrand of the follower value formula at one time, with `zeta1 = 0`
/// unless given.
pub fn follower_value_rate(
    c: &Coefficients,
    p: &DMatrix<f64>,
    eta1: &DMatrix<f64>,
    zeta1: &DMatrix<f64>,
    u2: &DMatrix<f64>,
) -> f64 {
    let w = &c.players[0];
    let dtp = c.d2.transpose() * p;
    let quad = (&w.r22 + &dtp * &c.d2).dot(&(u2 * u2.transpose()));
    let lin = (&w.rho2 + &dtp * &c.sigma + c.b2.transpose() * eta1 + c.d2.transpose() * zeta1).dot(u2);
    let drift = eta1.dot(&c.b) * 2.0 + zeta1.dot(&c.sigma) * 2.0 + (p * &c.sigma).dot(&c.sigma);
    let r = rhat11(c, p);
    let rp = pinv_matrix(&r);
    let r12 = &w.r12 + c.d1.transpose() * p * &c.d2;
    let v = c.b1.transpose() * eta1 + c.d1.transpose() * zeta1 + r12 * u2 + c.d1.transpose() * p * &c.sigma + &w.rho1;
    let pen = (v.transpose() * rp * &v)[(0, 0)];
    quad + 2.0 * lin + drift - pen
}

/// Follower value for initial state `x` against a deterministic leader
/// control; the time integral uses the composite trapezoid rule on the
/// profile's grid.
pub fn follower_value(
    x: &[f64],
    spec: &GameSpec,
    sol: &FollowerSolution,
    aux: &FollowerAux,
    u2_profile: &MatrixPath,
) -> Result<f64> {
    require_certificates(sol)?;
    let n = spec.dims.n;
    if x.len() != n {
        return Err(Error::Shape(format!("state has length {}, expected {n}", x.len())));
    }
    let xm = DMatrix::from_column_slice(n, 1, x);
    let p0 = sol.p1.at(0.0)?;
    let mut v = (xm.transpose() * p0 * &xm)[(0, 0)] + 2.0 * aux.eta1.get(0).dot(&xm);
    let grid = u2_profile.grid();
    let zeta = DMatrix::zeros(n, 1);
    let h = grid.dt();
    for k in 0..grid.len() {
        let t = grid.t(k);
        let c = spec.coefficients_at(t)?;
        let f = follower_value_rate(&c, &sol.p1.at(t)?, &aux.eta1.get(k), &zeta, &u2_profile.get(k));
        let wgt = if k == 0 || k == grid.steps() { 0.5 } else { 1.0 };
        v += wgt * h * f;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tanh_closed_form() {
        let spec = presets::tanh_follower();
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let sol = solve_follower_riccati(&spec, &g).unwrap();
        assert!(sol.certificates.passed());
        for k in (0..=1000).step_by(50) {
            assert_abs_diff_eq!(sol.p1.get(k)[(0, 0)], (1.0 - g.t(k)).tanh(), epsilon = 1e-10);
        }
        let th = follower_gain(&sol).unwrap();
        assert_abs_diff_eq!(th.get(0)[(0, 0)], -1f64.tanh(), epsilon = 1e-10);
        assert_eq!(sol.p1.get(1000)[(0, 0)], 0.0);
    }

    #[test]
    fn zero_weights_give_zero_solution() {
        let mut spec = presets::tanh_follower();
        spec.player1.q = crate::model::CoefficientPath::scalar(0.0);
        let g = TimeGrid::new(1.0, 20).unwrap();
        let sol = solve_follower_riccati(&spec, &g).unwrap();
        assert!(sol.p1.entry_series(0, 0).iter().all(|v| *v == 0.0));
        assert!(follower_gain(&sol).unwrap().entry_series(0, 0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn open_loop_example_fails_range() {
        let spec = presets::open_loop_only();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let sol = solve_follower_riccati(&spec, &g).unwrap();
        assert!(sol.p1.entry_series(0, 0).iter().all(|v| *v == 1.0));
        assert!(!sol.certificates.range_ok);
        assert!(sol.certificates.psd_ok);
        assert!(matches!(follower_gain(&sol), Err(Error::Certificate(_))));
        assert_eq!(sol.certificates.describe(), "range condition violated");
    }

    #[test]
    fn rd_gain_is_alpha_p1() {
        let spec = presets::rd_competition(&presets::RdParams::default());
        let alpha = presets::RdParams::default().alpha2.sqrt();
        let g = TimeGrid::new(1.0, 200).unwrap();
        let sol = solve_follower_riccati(&spec, &g).unwrap();
        let th = follower_gain(&sol).unwrap();
        for k in 0..=200 {
            assert_abs_diff_eq!(th.get(k)[(0, 0)], alpha * sol.p1.get(k)[(0, 0)], epsilon = 1e-14);
        }
    }

    #[test]
    fn gain_solves_normal_equation() {
        let mut spec = presets::tanh_follower();
        spec.dynamics.d1 = crate::model::CoefficientPath::scalar(0.4);
        spec.dynamics.c = crate::model::CoefficientPath::scalar(0.3);
        spec.player1.s1 = crate::model::CoefficientPath::scalar(0.2);
        let g = TimeGrid::new(1.0, 100).unwrap();
        let sol = solve_follower_riccati(&spec, &g).unwrap();
        let c = spec.coefficients_at(0.0).unwrap();
        for k in 0..=100 {
            let p = sol.p1.get(k);
            let res = rhat11(&c, &p) * sol.theta1.get(k) + shat11(&c, &p);
            assert!(res.norm() < 1e-12);
        }
    }

    #[test]
    fn aux_vanishes_without_drivers() {
        let spec = presets::tanh_follower();
        let g = TimeGrid::new(1.0, 50).unwrap();
        let sol = solve_follower_riccati(&spec, &g).unwrap();
        let u2 = MatrixPath::zeros(g, 1, 1);
        let aux = solve_follower_aux(&spec, &sol, &u2).unwrap();
        assert!(aux.eta1.entry_series(0, 0).iter().all(|v| *v == 0.0));
        assert!(aux.v1.entry_series(0, 0).iter().all(|v| *v == 0.0));
        let v = follower_value(&[1.0], &spec, &sol, &aux, &u2).unwrap();
        assert_abs_diff_eq!(v, 1f64.tanh(), epsilon = 1e-8);
    }

    #[test]
    fn aux_against_closed_form() {
        // With u2 = 1 and B2 = 1 the equation is eta' = P1 (eta - 1), eta(1) = 0,
        // so eta(t) = 1 - exp(-int_t^1 P1) = 1 - sech(1 - t).
        let mut spec = presets::tanh_follower();
        spec.dynamics.b2 = crate::model::CoefficientPath::scalar(1.0);
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let sol = solve_follower_riccati(&spec, &g.refined(2)).unwrap();
        let u2 = MatrixPath::constant(g, &DMatrix::from_element(1, 1, 1.0));
        let aux = solve_follower_aux(&spec, &sol, &u2).unwrap();
        for k in (0..=1000).step_by(100) {
            let want = 1.0 - 1.0 / (1.0 - g.t(k)).cosh();
            assert_abs_diff_eq!(aux.eta1.get(k)[(0, 0)], want, epsilon = 1e-10);
            assert_abs_diff_eq!(aux.v1.get(k)[(0, 0)], -want, epsilon = 1e-10);
        }
        // V1(0; 1) = int_0^1 (2 eta - eta^2) = 1 - tanh(1).
        let v = follower_value(&[0.0], &spec, &sol, &aux, &u2).unwrap();
        assert_abs_diff_eq!(v, 1.0 - 1f64.tanh(), epsilon = 1e-6);
    }
}
