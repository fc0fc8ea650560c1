//! The leader's problem: reduction through the follower's response, the
//! 2n-dimensional augmented system, the leader Riccati and offset equations,
//! gains and the resulting closed-loop policy of both players.
//!
//! Augmented variables: `X = (x, p2)`, `Y = (q2, eta1) = P X + eta`,
//! `Z = (k2, zeta1)`.

use std::cell::RefCell;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::follower::{rhat11, shat11, FollowerSolution};
use crate::model::{Coefficients, GameSpec, TimeGrid};
use crate::numerics::{condition_number, integrate_backward_rk4_with, inverse_guarded, MatrixPath, COND_MAX};

/// Coefficients of the leader's problem after substituting the follower's
/// closed-loop response, at one time instant.
///
/// The reduced state is `(x, eta1, zeta1)` driven by `u2`; the reduced running
/// cost is `w' W w + 2 l' w + lhat` for `w = (x, eta1, zeta1, u2)` with
/// `W = [[Q11, Q12', Q13', K1'], [Q12, Q22, Q23', K2'], [Q13, Q23, Q33, K3'], [K1, K2, K3, R2]]`
/// and `l = (q1, q2, q3, rho)`.
#[derive(Debug, Clone)]
pub struct ReducedCoefficients {
    pub rhat11: DMatrix<f64>,
    pub rhat11_inv: DMatrix<f64>,
    pub rhat12: DMatrix<f64>,
    pub rhat21: DMatrix<f64>,
    pub rhohat11: DMatrix<f64>,
    /// `B1'` and `D1'` of the original game.
    pub b1t: DMatrix<f64>,
    pub d1t: DMatrix<f64>,
    pub shat11: DMatrix<f64>,
    pub shat12: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub q11: DMatrix<f64>,
    pub q12: DMatrix<f64>,
    pub q13: DMatrix<f64>,
    pub q22: DMatrix<f64>,
    pub q23: DMatrix<f64>,
    pub q33: DMatrix<f64>,
    pub k1: DMatrix<f64>,
    pub k2: DMatrix<f64>,
    pub k3: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub qv1: DMatrix<f64>,
    pub qv2: DMatrix<f64>,
    pub qv3: DMatrix<f64>,
    pub rho: DMatrix<f64>,
    pub lhat: f64,
}

impl ReducedCoefficients {
    /// The full weight matrix `W` of the reduced running cost.
    pub fn cost_matrix(&self) -> DMatrix<f64> {
        let n = self.a.nrows();
        let m2 = self.r2.nrows();
        let mut w = DMatrix::zeros(3 * n + m2, 3 * n + m2);
        let blocks: [(usize, usize, &DMatrix<f64>); 10] = [
            (0, 0, &self.q11),
            (1, 0, &self.q12),
            (2, 0, &self.q13),
            (1, 1, &self.q22),
            (2, 1, &self.q23),
            (2, 2, &self.q33),
            (3, 0, &self.k1),
            (3, 1, &self.k2),
            (3, 2, &self.k3),
            (3, 3, &self.r2),
        ];
        for (i, j, m) in blocks {
            let (r0, c0) = (i * n, j * n);
            w.view_mut((r0, c0), m.shape()).copy_from(m);
            if i != j {
                w.view_mut((c0, r0), (m.ncols(), m.nrows())).copy_from(&m.transpose());
            }
        }
        w
    }

    pub fn cost_linear(&self) -> DMatrix<f64> {
        let n = self.a.nrows();
        let m2 = self.r2.nrows();
        let mut l = DMatrix::zeros(3 * n + m2, 1);
        l.view_mut((0, 0), (n, 1)).copy_from(&self.qv1);
        l.view_mut((n, 0), (n, 1)).copy_from(&self.qv2);
        l.view_mut((2 * n, 0), (n, 1)).copy_from(&self.qv3);
        l.view_mut((3 * n, 0), (m2, 1)).copy_from(&self.rho);
        l
    }
}

/// Reduce the leader's problem at time `t`, given the follower's `P1(t)`.
pub fn reduce_at(c: &Coefficients, p1: &DMatrix<f64>, t: f64) -> Result<ReducedCoefficients> {
    let n = c.a.nrows();
    let (m1, m2) = (c.b1.ncols(), c.b2.ncols());
    let w1 = &c.players[0];
    let w2 = &c.players[1];
    let r = rhat11(c, p1);
    let (ri, _) = inverse_guarded(&r, COND_MAX).ok_or_else(|| Error::SingularRhat { t, cond: condition_number(&r) })?;

    let d1t_p = c.d1.transpose() * p1;
    let rhat12 = &w1.r12 + &d1t_p * &c.d2;
    let rhat21 = &w1.r21 + c.d2.transpose() * p1 * &c.d1;
    let rhohat11 = &w1.rho1 + &d1t_p * &c.sigma;
    let s11 = shat11(c, p1);
    let s12 = c.b2.transpose() * p1 + c.d2.transpose() * p1 * &c.c + &w1.s2;

    let ri_s = &ri * &s11;
    let ri_r12 = &ri * &rhat12;
    let ri_rho = &ri * &rhohat11;
    let a = &c.a - &c.b1 * &ri_s;
    let cc = &c.c - &c.d1 * &ri_s;
    let d1 = -(&c.d1 * &ri * c.d1.transpose());
    let f1 = -(&c.b1 * &ri * c.b1.transpose());
    let b1 = -(&c.b1 * &ri * c.d1.transpose());
    let b2 = &c.b2 - &c.b1 * &ri_r12;
    let d2 = &c.d2 - &c.d1 * &ri_r12;
    let b = &c.b - &c.b1 * &ri_rho;
    let sigma = &c.sigma - &c.d1 * &ri_rho;
    let f2 = &s12 - &rhat21 * &ri_s;
    let beta = cc.transpose() * p1 * &c.sigma + p1 * &c.b + &w1.q_lin - s11.transpose() * &ri * &w1.rho1;

    // The follower plays u1 = Lx x + Leta eta1 + Lzeta zeta1 + Lu u2 + l0;
    // substituting into the leader's running cost in (x, u1, u2) gives the
    // reduced weights.
    let k = 3 * n + m2;
    let mut map = DMatrix::zeros(n + m1 + m2, k);
    map.view_mut((0, 0), (n, n)).fill_with_identity();
    map.view_mut((n, 0), (m1, n)).copy_from(&-&ri_s);
    map.view_mut((n, n), (m1, n)).copy_from(&-(&ri * c.b1.transpose()));
    map.view_mut((n, 2 * n), (m1, n)).copy_from(&-(&ri * c.d1.transpose()));
    map.view_mut((n, 3 * n), (m1, m2)).copy_from(&-&ri_r12);
    map.view_mut((n + m1, 3 * n), (m2, m2)).fill_with_identity();
    let mut shift = DMatrix::zeros(n + m1 + m2, 1);
    shift.view_mut((n, 0), (m1, 1)).copy_from(&-&ri_rho);

    let wj = w2.joint_matrix();
    let lj = w2.joint_linear();
    let big = map.transpose() * &wj * &map;
    let big = (&big + big.transpose()) * 0.5;
    let lin = map.transpose() * (&wj * &shift + &lj);
    let lhat = (shift.transpose() * &wj * &shift)[(0, 0)] + 2.0 * lj.dot(&shift);

    let blk = |i: usize, j: usize, rows: usize, cols: usize| big.view((i, j), (rows, cols)).into_owned();
    let u = 3 * n;
    Ok(ReducedCoefficients {
        q11: blk(0, 0, n, n),
        q12: blk(n, 0, n, n),
        q13: blk(2 * n, 0, n, n),
        q22: blk(n, n, n, n),
        q23: blk(2 * n, n, n, n),
        q33: blk(2 * n, 2 * n, n, n),
        k1: blk(u, 0, m2, n),
        k2: blk(u, n, m2, n),
        k3: blk(u, 2 * n, m2, n),
        r2: blk(u, u, m2, m2),
        qv1: lin.view((0, 0), (n, 1)).into_owned(),
        qv2: lin.view((n, 0), (n, 1)).into_owned(),
        qv3: lin.view((2 * n, 0), (n, 1)).into_owned(),
        rho: lin.view((u, 0), (m2, 1)).into_owned(),
        lhat,
        rhat11: r,
        rhat11_inv: ri,
        rhat12,
        rhat21,
        rhohat11,
        b1t: c.b1.transpose(),
        d1t: c.d1.transpose(),
        shat11: s11,
        shat12: s12,
        a,
        c: cc,
        d1,
        f1,
        b1,
        b2,
        d2,
        b,
        sigma,
        f2,
        beta,
    })
}

/// Reduced coefficients at every node of `grid`.
#[derive(Debug, Clone)]
pub struct LeaderReduction {
    pub grid: TimeGrid,
    pub nodes: Vec<ReducedCoefficients>,
}

pub fn reduce_leader(spec: &GameSpec, fsol: &FollowerSolution, grid: &TimeGrid) -> Result<LeaderReduction> {
    if !fsol.certificates.passed() {
        return Err(Error::Certificate(fsol.certificates.describe()));
    }
    let nodes = grid
        .times()
        .map(|t| reduce_at(&spec.coefficients_at(t)?, &fsol.p1.at(t)?, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(LeaderReduction { grid: *grid, nodes })
}

/// Block coefficients of the augmented forward-backward system at one time.
#[derive(Debug, Clone)]
pub struct AugmentedCoefficients {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub rho: DMatrix<f64>,
}

fn blocks2(tl: &DMatrix<f64>, tr: &DMatrix<f64>, bl: &DMatrix<f64>, br: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = (tl.nrows(), tl.ncols());
    let mut m = DMatrix::zeros(r + bl.nrows(), c + tr.ncols());
    m.view_mut((0, 0), tl.shape()).copy_from(tl);
    m.view_mut((0, c), tr.shape()).copy_from(tr);
    m.view_mut((r, 0), bl.shape()).copy_from(bl);
    m.view_mut((r, c), br.shape()).copy_from(br);
    m
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.view_mut((0, 0), top.shape()).copy_from(top);
    m.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    m
}

/// Place the reduced coefficients into the augmented blocks.
pub fn assemble_augmented(r: &ReducedCoefficients) -> AugmentedCoefficients {
    let n = r.a.nrows();
    let z = DMatrix::zeros(n, n);
    let mut f2 = DMatrix::zeros(r.k1.nrows(), 2 * n);
    f2.view_mut((0, 0), r.k1.shape()).copy_from(&r.k1);
    f2.view_mut((0, n), r.f2.shape()).copy_from(&r.f2);
    AugmentedCoefficients {
        a: blocks2(&r.a, &z, &r.q12, &r.a),
        // Lower-left block is Bhat1 (not its transpose): that is what makes
        // B1 Z and B1' Y reproduce the zeta1 and eta1 terms of the reduced
        // forward equation and of the adjoint p2.
        b1: blocks2(&z, &r.b1, &r.b1, &r.q23.transpose()),
        b2: stack(&r.b2, &r.k2.transpose()),
        c: blocks2(&r.c, &z, &r.q13, &r.c),
        d1: blocks2(&z, &r.d1, &r.d1.transpose(), &r.q33),
        d2: stack(&r.d2, &r.k3.transpose()),
        f1: blocks2(&z, &r.f1, &r.f1.transpose(), &r.q22),
        f2,
        q2: blocks2(&r.q11, &z, &z, &z),
        b: stack(&r.b, &r.qv2),
        sigma: stack(&r.sigma, &r.qv3),
        beta: stack(&r.qv1, &r.beta),
        r2: r.r2.clone(),
        rho: r.rho.clone(),
    }
}

/// Time-dependent augmented system. Coefficients are produced on demand from
/// the game data and the follower's `P1`, so the follower path should contain
/// every time the leader integrator visits (nodes and half nodes) as a node.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    spec: GameSpec,
    p1: MatrixPath,
    frozen: Option<Coefficients>,
    /// Terminal weight `diag(G2, 0)`.
    pub g2: DMatrix<f64>,
    /// Terminal offset `(g2, g1)`, ordered like `Y = (q2, eta1)`.
    pub g: DMatrix<f64>,
    /// Initial state `(x, 0)`.
    pub x0: DMatrix<f64>,
}

impl AugmentedSystem {
    pub fn new(spec: &GameSpec, fsol: &FollowerSolution, x: &[f64]) -> Result<Self> {
        if !fsol.certificates.passed() {
            return Err(Error::Certificate(fsol.certificates.describe()));
        }
        let n = spec.dims.n;
        if x.len() != n {
            return Err(Error::Shape(format!("initial state has length {}, expected {n}", x.len())));
        }
        let mut g2 = DMatrix::zeros(2 * n, 2 * n);
        g2.view_mut((0, 0), (n, n)).copy_from(&spec.player2.g_mat);
        let mut g = DMatrix::zeros(2 * n, 1);
        g.view_mut((0, 0), (n, 1)).copy_from(&spec.player2.g_lin);
        g.view_mut((n, 0), (n, 1)).copy_from(&spec.player1.g_lin);
        let mut x0 = DMatrix::zeros(2 * n, 1);
        x0.view_mut((0, 0), (n, 1)).copy_from_slice(x);
        let frozen = if spec.is_constant() { Some(spec.coefficients_at(0.0)?) } else { None };
        Ok(AugmentedSystem { spec: spec.clone(), p1: fsol.p1.clone(), frozen, g2, g, x0 })
    }

    pub fn spec(&self) -> &GameSpec {
        &self.spec
    }

    pub fn dims(&self) -> crate::model::Dims {
        self.spec.dims
    }

    pub fn follower_p1(&self) -> &MatrixPath {
        &self.p1
    }

    pub fn coefficients_at(&self, t: f64) -> Result<Coefficients> {
        match &self.frozen {
            Some(c) => Ok(c.clone()),
            None => self.spec.coefficients_at(t),
        }
    }

    pub fn reduced_at(&self, t: f64) -> Result<ReducedCoefficients> {
        match &self.frozen {
            Some(c) => reduce_at(c, &self.p1.at(t)?, t),
            None => reduce_at(&self.spec.coefficients_at(t)?, &self.p1.at(t)?, t),
        }
    }

    pub fn at(&self, t: f64) -> Result<AugmentedCoefficients> {
        Ok(assemble_augmented(&self.reduced_at(t)?))
    }
}

/// Inverses and gain shared by the leader Riccati right side, the offset
/// equation and the closed-loop coefficients.
#[derive(Debug, Clone)]
pub struct LeaderFactors {
    /// `(I - P D1)^{-1} P`.
    pub imp_p: DMatrix<f64>,
    /// `(Rhat2 + D2' (I - P D1)^{-1} P D2)^{-1}`.
    pub rt_inv: DMatrix<f64>,
    /// `-Rtilde^{-1} [B2' P + F2 + D2' (I - P D1)^{-1} P (C + B1' P)]`.
    pub theta: DMatrix<f64>,
    pub cond_imp: f64,
    pub cond_rtilde: f64,
}

impl LeaderFactors {
    pub fn new(ac: &AugmentedCoefficients, p: &DMatrix<f64>, t: f64) -> Result<Self> {
        let k = p.nrows();
        let imp = DMatrix::identity(k, k) - p * &ac.d1;
        let (imp_inv, cond_imp) = inverse_guarded(&imp, COND_MAX).ok_or_else(|| Error::SingularFactor {
            which: "I - P D1",
            t,
            cond: condition_number(&imp),
        })?;
        let imp_p = imp_inv * p;
        let rt = &ac.r2 + ac.d2.transpose() * &imp_p * &ac.d2;
        let (rt_inv, cond_rtilde) = inverse_guarded(&rt, COND_MAX).ok_or_else(|| Error::SingularFactor {
            which: "Rtilde",
            t,
            cond: condition_number(&rt),
        })?;
        let kk = ac.b2.transpose() * p + &ac.f2 + ac.d2.transpose() * &imp_p * (&ac.c + ac.b1.transpose() * p);
        let theta = -(&rt_inv * kk);
        Ok(LeaderFactors { imp_p, rt_inv, theta, cond_imp, cond_rtilde })
    }

    /// Leader offset `v2` for a given `eta`.
    pub fn offset(&self, ac: &AugmentedCoefficients, eta: &DMatrix<f64>) -> DMatrix<f64> {
        let d2t_ip = ac.d2.transpose() * &self.imp_p;
        -(&self.rt_inv * ((ac.b2.transpose() + &d2t_ip * ac.b1.transpose()) * eta + &d2t_ip * &ac.sigma + &ac.rho))
    }
}

/// Right side `dP/dt` of the leader Riccati equation.
pub fn leader_riccati_field(ac: &AugmentedCoefficients, p: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let f = LeaderFactors::new(ac, p, t)?;
    let closed = &ac.c + ac.b1.transpose() * p + &ac.d2 * &f.theta;
    let rhs = ac.a.transpose() * p
        + p * &ac.a
        + p * &ac.f1 * p
        + &ac.q2
        + (p * &ac.b2 + ac.f2.transpose()) * &f.theta
        + (ac.c.transpose() + p * &ac.b1) * &f.imp_p * closed;
    Ok(-rhs)
}

/// Right side `d eta/dt` of the leader offset equation.
pub fn eta_field(ac: &AugmentedCoefficients, p: &DMatrix<f64>, eta: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let f = LeaderFactors::new(ac, p, t)?;
    let v = f.offset(ac, eta);
    let z0 = &f.imp_p * (ac.b1.transpose() * eta + &ac.d2 * &v + &ac.sigma);
    let rhs = ac.a.transpose() * eta
        + p * &ac.f1 * eta
        + (ac.c.transpose() + p * &ac.b1) * z0
        + (p * &ac.b2 + ac.f2.transpose()) * &v
        + p * &ac.b
        + &ac.beta;
    Ok(-rhs)
}

/// Small memo so the two RK4 stages that share a time reuse one evaluation of
/// the augmented coefficients.
struct CoefCache<'a> {
    aug: &'a AugmentedSystem,
    slots: RefCell<Vec<(f64, std::rc::Rc<AugmentedCoefficients>)>>,
}

impl<'a> CoefCache<'a> {
    fn new(aug: &'a AugmentedSystem) -> Self {
        CoefCache { aug, slots: RefCell::new(Vec::with_capacity(3)) }
    }

    fn get(&self, t: f64) -> Result<std::rc::Rc<AugmentedCoefficients>> {
        if let Some((_, c)) = self.slots.borrow().iter().find(|(s, _)| *s == t) {
            return Ok(c.clone());
        }
        let c = std::rc::Rc::new(self.aug.at(t)?);
        let mut slots = self.slots.borrow_mut();
        if slots.len() == 3 {
            slots.remove(0);
        }
        slots.push((t, c.clone()));
        Ok(c)
    }
}

/// Backward RK4 for the leader Riccati equation from `P(T) = diag(G2, 0)`;
/// no symmetrization.
pub fn solve_leader_riccati(aug: &AugmentedSystem, grid: &TimeGrid) -> Result<MatrixPath> {
    let cache = CoefCache::new(aug);
    integrate_backward_rk4_with(|_, t, p| leader_riccati_field(&*cache.get(t)?, p, t), aug.g2.clone(), grid, |_| {})
}

/// Backward RK4 for `eta` from `eta(T) = (g2, g1)`. Half-node values of `P`
/// come from cubic Hermite interpolation with the Riccati right side as
/// derivative, which keeps the scheme fourth order.
pub fn solve_eta(aug: &AugmentedSystem, p: &MatrixPath, grid: &TimeGrid) -> Result<MatrixPath> {
    if p.grid() != grid {
        return Err(Error::Shape("leader P must live on the integration grid".into()));
    }
    let h = grid.dt();
    let coefs = grid.times().map(|t| aug.at(t)).collect::<Result<Vec<_>>>()?;
    let dp = (0..grid.len())
        .map(|k| leader_riccati_field(&coefs[k], &p.get(k), grid.t(k)))
        .collect::<Result<Vec<_>>>()?;
    let mid_cache = RefCell::new(None::<(usize, std::rc::Rc<AugmentedCoefficients>)>);
    integrate_backward_rk4_with(
        |k, t, eta| {
            if t == grid.t(k) {
                return eta_field(&coefs[k], &p.get(k), eta, t);
            }
            if t == grid.t(k + 1) {
                return eta_field(&coefs[k + 1], &p.get(k + 1), eta, t);
            }
            let pm = (p.get(k) + p.get(k + 1)) * 0.5 + (&dp[k] - &dp[k + 1]) * (h / 8.0);
            let ac = {
                let mut slot = mid_cache.borrow_mut();
                match slot.as_ref() {
                    Some((kk, c)) if *kk == k => c.clone(),
                    _ => {
                        let c = std::rc::Rc::new(aug.at(t)?);
                        *slot = Some((k, c.clone()));
                        c
                    }
                }
            };
            eta_field(&ac, &pm, eta, t)
        },
        aug.g.clone(),
        grid,
        |_| {},
    )
}

/// Leader gain `(Theta2, Theta2tilde)` and offset `v2` at every node.
pub fn leader_gains(aug: &AugmentedSystem, p: &MatrixPath, eta: &MatrixPath, grid: &TimeGrid) -> Result<(MatrixPath, MatrixPath)> {
    let (n, m2) = (aug.dims().n, aug.dims().m2);
    let mut theta = MatrixPath::zeros(*grid, m2, 2 * n);
    let mut v2 = MatrixPath::zeros(*grid, m2, 1);
    for k in 0..grid.len() {
        let t = grid.t(k);
        let ac = aug.at(t)?;
        let f = LeaderFactors::new(&ac, &p.get(k), t)?;
        v2.set(k, &f.offset(&ac, &eta.get(k)));
        theta.set(k, &f.theta);
    }
    Ok((theta, v2))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaderCertificates {
    /// Largest condition number of `I - P D1` met on the grid.
    pub max_cond_imp: f64,
    /// Largest condition number of `Rtilde` met on the grid.
    pub max_cond_rtilde: f64,
}

#[derive(Debug, Clone)]
pub struct LeaderSolution {
    /// `2n x 2n` Riccati solution with blocks `[[P1, P2], [P3, P4]]`.
    pub p: MatrixPath,
    pub eta: MatrixPath,
    /// `(Theta2 | Theta2tilde)`, `m2 x 2n`.
    pub theta2: MatrixPath,
    pub v2: MatrixPath,
    pub certificates: LeaderCertificates,
}

impl LeaderSolution {
    /// Block `(i, j)`, `i, j in {0, 1}`, of `P` at node `k`.
    pub fn block(&self, k: usize, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.p.shape().0 / 2;
        self.p.node(k).view((i * n, j * n), (n, n)).into_owned()
    }
}

pub fn solve_leader(aug: &AugmentedSystem, grid: &TimeGrid) -> Result<LeaderSolution> {
    let p = solve_leader_riccati(aug, grid)?;
    let eta = solve_eta(aug, &p, grid)?;
    let (theta2, v2) = leader_gains(aug, &p, &eta, grid)?;
    let mut cert = LeaderCertificates { max_cond_imp: 0.0, max_cond_rtilde: 0.0 };
    for k in 0..grid.len() {
        let t = grid.t(k);
        let f = LeaderFactors::new(&aug.at(t)?, &p.get(k), t)?;
        cert.max_cond_imp = cert.max_cond_imp.max(f.cond_imp);
        cert.max_cond_rtilde = cert.max_cond_rtilde.max(f.cond_rtilde);
    }
    Ok(LeaderSolution { p, eta, theta2, v2, certificates: cert })
}

/// Everything affine about the equilibrium at one time: the closed-loop SDE of
/// `X`, the adjoints `Y`, `Z` and both players' controls as affine maps of `X`.
#[derive(Debug, Clone)]
pub struct ClosedLoopNode {
    pub drift: DMatrix<f64>,
    pub drift_offset: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    pub diffusion_offset: DMatrix<f64>,
    pub y_gain: DMatrix<f64>,
    pub y_offset: DMatrix<f64>,
    pub z_gain: DMatrix<f64>,
    pub z_offset: DMatrix<f64>,
    pub u1_gain: DMatrix<f64>,
    pub u1_offset: DMatrix<f64>,
    pub u2_gain: DMatrix<f64>,
    pub u2_offset: DMatrix<f64>,
}

impl ClosedLoopNode {
    /// Entrywise `(1 - w) a + w b`.
    pub fn lerp(a: &ClosedLoopNode, b: &ClosedLoopNode, w: f64) -> ClosedLoopNode {
        let l = |x: &DMatrix<f64>, y: &DMatrix<f64>| x * (1.0 - w) + y * w;
        ClosedLoopNode {
            drift: l(&a.drift, &b.drift),
            drift_offset: l(&a.drift_offset, &b.drift_offset),
            diffusion: l(&a.diffusion, &b.diffusion),
            diffusion_offset: l(&a.diffusion_offset, &b.diffusion_offset),
            y_gain: l(&a.y_gain, &b.y_gain),
            y_offset: l(&a.y_offset, &b.y_offset),
            z_gain: l(&a.z_gain, &b.z_gain),
            z_offset: l(&a.z_offset, &b.z_offset),
            u1_gain: l(&a.u1_gain, &b.u1_gain),
            u1_offset: l(&a.u1_offset, &b.u1_offset),
            u2_gain: l(&a.u2_gain, &b.u2_gain),
            u2_offset: l(&a.u2_offset, &b.u2_offset),
        }
    }
}

/// Closed-loop coefficients at one time from the leader solution values.
pub fn closed_loop_at(
    red: &ReducedCoefficients,
    ac: &AugmentedCoefficients,
    p: &DMatrix<f64>,
    eta: &DMatrix<f64>,
    t: f64,
) -> Result<ClosedLoopNode> {
    let n = red.a.nrows();
    let m1 = red.rhat11.nrows();
    let f = LeaderFactors::new(ac, p, t)?;
    let v = f.offset(ac, eta);
    let theta = &f.theta;
    let z_gain = &f.imp_p * (&ac.c + &ac.d2 * theta + ac.b1.transpose() * p);
    let z_offset = &f.imp_p * (ac.b1.transpose() * eta + &ac.d2 * &v + &ac.sigma);

    // Follower, written through the auxiliary product
    // Rcal = [Rhat12 + (0 D1') (I - P D1)^{-1} P D2] Rtilde^{-1}.
    let mut sel_b1 = DMatrix::zeros(m1, 2 * n);
    sel_b1.view_mut((0, n), (m1, n)).copy_from(&red.b1t);
    let mut sel_d1 = DMatrix::zeros(m1, 2 * n);
    sel_d1.view_mut((0, n), (m1, n)).copy_from(&red.d1t);
    let mut shat_e1 = DMatrix::zeros(m1, 2 * n);
    shat_e1.view_mut((0, 0), (m1, n)).copy_from(&red.shat11);
    let rcal = (&red.rhat12 + &sel_d1 * &f.imp_p * &ac.d2) * &f.rt_inv;
    let cb = &ac.c + ac.b1.transpose() * p;
    let kk = ac.b2.transpose() * p + &ac.f2 + ac.d2.transpose() * &f.imp_p * &cb;
    let u1_gain = -(&red.rhat11_inv * (&shat_e1 + &sel_b1 * p + &sel_d1 * &f.imp_p * &cb - &rcal * kk));
    let eta_coef = &sel_b1 + &sel_d1 * &f.imp_p * ac.b1.transpose()
        - &rcal * (ac.b2.transpose() + ac.d2.transpose() * &f.imp_p * ac.b1.transpose());
    let u1_offset = -(&red.rhat11_inv
        * (eta_coef * eta + &red.rhohat11 - &rcal * &ac.rho
            + (&sel_d1 - &rcal * ac.d2.transpose()) * &f.imp_p * &ac.sigma));

    Ok(ClosedLoopNode {
        drift: &ac.a + &ac.b2 * theta + &ac.f1 * p + &ac.b1 * &z_gain,
        drift_offset: &ac.f1 * eta + &ac.b1 * &z_offset + &ac.b2 * &v + &ac.b,
        diffusion: &ac.c + &ac.d2 * theta + ac.b1.transpose() * p + &ac.d1 * &z_gain,
        diffusion_offset: ac.b1.transpose() * eta + &ac.d1 * &z_offset + &ac.d2 * &v + &ac.sigma,
        y_gain: p.clone(),
        y_offset: eta.clone(),
        z_gain,
        z_offset,
        u1_gain,
        u1_offset,
        u2_gain: theta.clone(),
        u2_offset: v,
    })
}

/// Closed-loop coefficients at every node of the leader grid.
pub fn closed_loop_path(aug: &AugmentedSystem, sol: &LeaderSolution) -> Result<Vec<ClosedLoopNode>> {
    let grid = *sol.p.grid();
    (0..grid.len())
        .map(|k| {
            let t = grid.t(k);
            let red = aug.reduced_at(t)?;
            let ac = assemble_augmented(&red);
            closed_loop_at(&red, &ac, &sol.p.get(k), &sol.eta.get(k), t)
        })
        .collect()
}

/// Feedback policies `u_i = K_i X + k_i` of both players on the leader grid.
#[derive(Debug, Clone)]
pub struct StackelbergPolicy {
    pub follower_gain: MatrixPath,
    pub follower_offset: MatrixPath,
    pub leader_gain: MatrixPath,
    pub leader_offset: MatrixPath,
}

pub fn build_policy(nodes: &[ClosedLoopNode], grid: &TimeGrid) -> Result<StackelbergPolicy> {
    let collect = |f: fn(&ClosedLoopNode) -> &DMatrix<f64>| {
        MatrixPath::from_nodes(*grid, &nodes.iter().map(|c| f(c).clone()).collect::<Vec<_>>())
    };
    Ok(StackelbergPolicy {
        follower_gain: collect(|c| &c.u1_gain)?,
        follower_offset: collect(|c| &c.u1_offset)?,
        leader_gain: collect(|c| &c.u2_gain)?,
        leader_offset: collect(|c| &c.u2_offset)?,
    })
}

/// Leader's optimal cost `<P1(0) x, x>` for a homogeneous game.
pub fn leader_value(spec: &GameSpec, sol: &LeaderSolution, x: &[f64]) -> Result<f64> {
    if let Some(what) = spec.homogeneity_violation() {
        return Err(Error::NotHomogeneous(what));
    }
    let n = spec.dims.n;
    let p1 = sol.block(0, 0, 0);
    let xv = DMatrix::from_column_slice(n, 1, x);
    Ok((xv.transpose() * p1 * &xv)[(0, 0)])
}

/// Full equilibrium on a grid: follower solution (also on the doubly refined
/// grid the leader integrator needs), augmented system, leader solution,
/// closed-loop coefficients and policy.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub grid: TimeGrid,
    pub follower: FollowerSolution,
    pub follower_fine: FollowerSolution,
    pub aug: AugmentedSystem,
    pub leader: LeaderSolution,
    pub closed_loop: Vec<ClosedLoopNode>,
    pub policy: StackelbergPolicy,
}

impl Equilibrium {
    pub fn spec(&self) -> &GameSpec {
        self.aug.spec()
    }

    /// Closed-loop coefficients at an arbitrary time, interpolated linearly
    /// between nodes.
    pub fn closed_loop_at(&self, t: f64) -> Result<ClosedLoopNode> {
        let (i, w) = self.grid.locate(t)?;
        if w == 0.0 {
            return Ok(self.closed_loop[i].clone());
        }
        Ok(ClosedLoopNode::lerp(&self.closed_loop[i], &self.closed_loop[i + 1], w))
    }
}

pub fn solve_equilibrium(spec: &GameSpec, grid: &TimeGrid) -> Result<Equilibrium> {
    crate::model::validate_spec(spec).into_result()?;
    let follower_fine = crate::follower::solve_follower_riccati(spec, &grid.refined(2))?;
    solve_equilibrium_with(spec, grid, follower_fine)
}

/// As [`solve_equilibrium`], reusing a follower solution computed on
/// `grid.refined(2)`.
pub fn solve_equilibrium_with(spec: &GameSpec, grid: &TimeGrid, follower_fine: FollowerSolution) -> Result<Equilibrium> {
    if *follower_fine.grid() != grid.refined(2) {
        return Err(Error::Shape("follower solution must live on the twice refined grid".into()));
    }
    if !follower_fine.certificates.passed() {
        return Err(Error::Certificate(follower_fine.certificates.describe()));
    }
    let follower = follower_fine.subsample(2)?;
    let aug = AugmentedSystem::new(spec, &follower_fine, spec.x0.as_slice())?;
    let leader = solve_leader(&aug, grid)?;
    let closed_loop = closed_loop_path(&aug, &leader)?;
    let policy = build_policy(&closed_loop, grid)?;
    Ok(Equilibrium { grid: *grid, follower, follower_fine, aug, leader, closed_loop, policy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::follower::solve_follower_riccati;
    use crate::model::{CoefficientPath, Dims};
    use crate::presets;
    use approx::assert_relative_eq;

    fn random_spec(seed: u64) -> GameSpec {
        // Deterministic, mildly coupled 2-dimensional game with noise in the
        // controls and nonzero affine terms.
        let mut s = GameSpec::zeros(Dims::new(2, 1, 2), 1.0);
        let mut state = seed;
        let mut r = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            let v: Vec<f64> = (0..rows * cols).map(|_| scale * r()).collect();
            CoefficientPath::matrix(rows, cols, &v)
        };
        s.dynamics.a = mat(2, 2, 1.0);
        s.dynamics.b1 = mat(2, 1, 1.0);
        s.dynamics.b2 = mat(2, 2, 1.0);
        s.dynamics.c = mat(2, 2, 0.4);
        s.dynamics.d1 = mat(2, 1, 0.4);
        s.dynamics.d2 = mat(2, 2, 0.3);
        s.dynamics.b = mat(2, 1, 1.0);
        s.dynamics.sigma = mat(2, 1, 0.5);
        s.player1.s1 = mat(1, 2, 0.2);
        s.player1.r12 = mat(1, 2, 0.2);
        s.player1.q_lin = mat(2, 1, 0.5);
        s.player1.rho1 = mat(1, 1, 0.5);
        s.player2.s1 = mat(1, 2, 0.2);
        s.player2.s2 = mat(2, 2, 0.2);
        s.player2.r12 = mat(1, 2, 0.2);
        s.player2.q_lin = mat(2, 1, 0.5);
        s.player2.rho1 = mat(1, 1, 0.5);
        s.player2.rho2 = mat(2, 1, 0.5);
        for p in [&mut s.player1, &mut s.player2] {
            p.q = CoefficientPath::matrix(2, 2, &[1.0, 0.1, 0.1, 0.8]);
            p.r11 = CoefficientPath::scalar(1.0);
            p.r22 = CoefficientPath::matrix(2, 2, &[1.0, 0.0, 0.0, 1.5]);
            p.g_mat = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
            p.r21 = CoefficientPath::Constant(p.r12.at(0.0, 1.0).unwrap().transpose());
        }
        s
    }

    #[test]
    fn reduced_weights_match_closed_forms() {
        let spec = random_spec(3);
        let c = spec.coefficients_at(0.3).unwrap();
        let p1 = DMatrix::from_row_slice(2, 2, &[0.7, 0.1, 0.1, 0.4]);
        let r = reduce_at(&c, &p1, 0.3).unwrap();
        let w = &c.players[1];
        let ri = &r.rhat11_inv;
        let s = &r.shat11;
        let q11 = &w.q - s.transpose() * ri * &w.s1 - w.s1.transpose() * ri * s + s.transpose() * ri * &w.r11 * ri * s;
        assert_relative_eq!(r.q11, q11, epsilon = 1e-12);
        let k1 = &w.s2 - &w.r21 * ri * s - r.rhat12.transpose() * ri * &w.s1
            + r.rhat12.transpose() * ri * &w.r11 * ri * s;
        assert_relative_eq!(r.k1, k1, epsilon = 1e-12);
        let r2 = &w.r22 - &w.r21 * ri * &r.rhat12 - r.rhat12.transpose() * ri * &w.r12
            + r.rhat12.transpose() * ri * &w.r11 * ri * &r.rhat12;
        assert_relative_eq!(r.r2, r2, epsilon = 1e-12);
        let q12 = -(c.b1.clone() * ri * &w.s1) + &c.b1 * ri * &w.r11 * ri * s;
        assert_relative_eq!(r.q12, q12, epsilon = 1e-12);
        let qv1 = &w.q_lin - s.transpose() * ri * &w.rho1 - (w.s1.transpose() - s.transpose() * ri * &w.r11) * ri * &r.rhohat11;
        assert_relative_eq!(r.qv1, qv1, epsilon = 1e-12);
        let u = ri * &r.rhohat11;
        let lhat = (u.transpose() * &w.r11 * &u)[(0, 0)] - 2.0 * w.rho1.dot(&u);
        assert_relative_eq!(r.lhat, lhat, epsilon = 1e-12);
        // The reduced cost of any w equals the original cost at the follower's response.
        let wv = DMatrix::from_column_slice(8, 1, &[0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.7, -0.6]);
        let reduced = (wv.transpose() * r.cost_matrix() * &wv)[(0, 0)] + 2.0 * r.cost_linear().dot(&wv) + r.lhat;
        let x = wv.rows(0, 2).into_owned();
        let u2 = wv.rows(6, 2).into_owned();
        let u1 = -(ri * (s * &x + c.b1.transpose() * wv.rows(2, 2) + c.d1.transpose() * wv.rows(4, 2) + &r.rhat12 * &u2 + &r.rhohat11));
        let mut full = DMatrix::zeros(5, 1);
        full.rows_mut(0, 2).copy_from(&x);
        full.rows_mut(2, 1).copy_from(&u1);
        full.rows_mut(3, 2).copy_from(&u2);
        let orig = (full.transpose() * w.joint_matrix() * &full)[(0, 0)] + 2.0 * w.joint_linear().dot(&full);
        assert_relative_eq!(reduced, orig, epsilon = 1e-12);
    }

    #[test]
    fn beta_matches_follower_generator() {
        let spec = random_spec(5);
        let c = spec.coefficients_at(0.0).unwrap();
        let p1 = DMatrix::from_row_slice(2, 2, &[0.9, -0.2, -0.2, 0.6]);
        let r = reduce_at(&c, &p1, 0.0).unwrap();
        // follower generator at eta1 = 0, zeta1 = 0, u2 = 0
        let w = &c.players[0];
        let ri = &r.rhat11_inv;
        let gen = c.c.transpose() * &p1 * &c.sigma + &w.q_lin + &p1 * &c.b
            - r.shat11.transpose() * ri * (c.d1.transpose() * &p1 * &c.sigma + &w.rho1);
        assert_relative_eq!(r.beta, gen, epsilon = 1e-12);
    }

    fn equilibrium(spec: &GameSpec, steps: usize) -> (AugmentedSystem, LeaderSolution, TimeGrid) {
        let grid = TimeGrid::new(spec.horizon, steps).unwrap();
        let fine = solve_follower_riccati(spec, &grid.refined(2)).unwrap();
        let aug = AugmentedSystem::new(spec, &fine, spec.x0.as_slice()).unwrap();
        let sol = solve_leader(&aug, &grid).unwrap();
        (aug, sol, grid)
    }

    #[test]
    fn follower_policy_matches_direct_reconstruction() {
        let mut spec = random_spec(7);
        spec.x0 = nalgebra::DVector::from_vec(vec![1.0, -0.5]);
        let (aug, sol, grid) = equilibrium(&spec, 200);
        let nodes = closed_loop_path(&aug, &sol).unwrap();
        let n = 2;
        for k in [0, 57, 200] {
            let t = grid.t(k);
            let red = aug.reduced_at(t).unwrap();
            let node = &nodes[k];
            let xbig = DMatrix::from_column_slice(4, 1, &[0.4, -1.1, 0.3, 0.8]);
            let y = &node.y_gain * &xbig + &node.y_offset;
            let z = &node.z_gain * &xbig + &node.z_offset;
            let u2 = &node.u2_gain * &xbig + &node.u2_offset;
            let xb = xbig.rows(0, n).into_owned();
            let direct = -(&red.rhat11_inv
                * (&red.shat11 * &xb + &red.b1t * y.rows(n, n) + &red.d1t * z.rows(n, n) + &red.rhat12 * &u2 + &red.rhohat11));
            let policy = &node.u1_gain * &xbig + &node.u1_offset;
            assert_relative_eq!(policy, direct, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn zero_game_has_zero_solution() {
        let spec = presets::tanh_follower();
        let (_, sol, _) = equilibrium(&spec, 50);
        // The leader has no influence and no state cost.
        assert!(sol.p.max_distance(&MatrixPath::zeros(*sol.p.grid(), 2, 2)) < 1e-14);
        assert!(sol.theta2.node(0).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn rd_example_structure() {
        let spec = presets::rd_competition(&presets::RdParams::default());
        let (aug, sol, _) = equilibrium(&spec, 1000);
        // P2 = P3' for this example, eta vanishes, the value is P1(0).
        let p2 = sol.block(0, 0, 1);
        let p3 = sol.block(0, 1, 0);
        assert_relative_eq!(p2, p3.transpose(), epsilon = 1e-10);
        assert!(sol.eta.node(0).iter().all(|v| v.abs() < 1e-14));
        let v = leader_value(aug.spec(), &sol, &[1.0]).unwrap();
        assert_relative_eq!(v, -0.3566569778716313, epsilon = 1e-9);
    }

    #[test]
    fn singular_rhat_is_reported() {
        let spec = presets::open_loop_only();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let c = spec.coefficients_at(0.5).unwrap();
        let err = reduce_at(&c, &DMatrix::from_element(1, 1, 1.0), 0.5).unwrap_err();
        assert!(matches!(err, Error::SingularRhat { .. }));
        let fsol = solve_follower_riccati(&spec, &grid).unwrap();
        assert!(AugmentedSystem::new(&spec, &fsol, &[1.0]).is_err());
    }
}
