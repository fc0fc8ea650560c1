//! Numerical checks of an equilibrium: adjoint reconstruction and the
//! stationarity residual, first-order (Gateaux) conditions, best-response
//! inequalities and convexity probes.
//!
//! Deviations are simulated jointly with the equilibrium: the state is
//! `xi = (x', X)` where `X` follows the equilibrium closed loop and `x'` the
//! game under the deviating controls, both driven by the same Brownian path.
//! Follower deviations keep the leader's control process at equilibrium;
//! leader deviations add a deterministic open-loop term to the leader's
//! control, and the follower re-optimizes against it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::follower::solve_follower_riccati;
use crate::leader::{AugmentedSystem, Equilibrium, LeaderFactors};
use crate::model::{GameSpec, TimeGrid};
use crate::numerics::{integrate_backward_rk4_with, MatrixPath};
use crate::simulate::{
    run_paths, AffineMap, AffineModel, AffineNode, Ensemble, Estimate, GameMaps, PathSamples, Quadratic, SimConfig,
};

/// `Y = P X + eta` and `Z = (I - P D1)^{-1} P [(C + D2 Theta + B1' P) X + B1' eta + D2 v + sigma]`
/// on every stored node of every path. `v_shift` is added to the leader
/// offset (zero at equilibrium).
pub fn reconstruct_adjoints(eq: &Equilibrium, xs: &Ensemble, v_shift: f64) -> Result<(Ensemble, Ensemble)> {
    let n2 = 2 * eq.spec().dims.n;
    check_ensemble(eq, xs)?;
    let mut y = Ensemble { grid: xs.grid, paths: xs.paths, dim: n2, data: vec![0.0; xs.data.len()] };
    let mut z = y.clone();
    for k in 0..xs.grid.len() {
        let t = xs.grid.t(k);
        let (zg, zo) = z_map(eq, k, t, v_shift)?;
        let p = eq.leader.p.get(k);
        let eta = eq.leader.eta.get(k);
        for path in 0..xs.paths {
            let x = DMatrix::from_column_slice(n2, 1, xs.get(path, k));
            let yv = &p * &x + &eta;
            let zv = &zg * &x + &zo;
            let o = (path * xs.grid.len() + k) * n2;
            y.data[o..o + n2].copy_from_slice(yv.as_slice());
            z.data[o..o + n2].copy_from_slice(zv.as_slice());
        }
    }
    Ok((y, z))
}

fn check_ensemble(eq: &Equilibrium, xs: &Ensemble) -> Result<()> {
    if xs.grid != eq.grid || xs.dim != 2 * eq.spec().dims.n {
        return Err(Error::Shape("ensemble must hold X on the solver grid".into()));
    }
    Ok(())
}

fn z_map(eq: &Equilibrium, k: usize, t: f64, v_shift: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ac = eq.aug.at(t)?;
    let p = eq.leader.p.get(k);
    let eta = eq.leader.eta.get(k);
    let f = LeaderFactors::new(&ac, &p, t)?;
    let v = f.offset(&ac, &eta).add_scalar(v_shift);
    let zg = &f.imp_p * (&ac.c + &ac.d2 * &f.theta + ac.b1.transpose() * &p);
    let zo = &f.imp_p * (ac.b1.transpose() * &eta + &ac.d2 * &v + &ac.sigma);
    Ok((zg, zo))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stationarity {
    /// RMS over paths and nodes of `(Rhat2 Theta + F2) X + B2' Y + D2' Z + Rhat2 v + rho`.
    pub rms: f64,
    /// Largest RMS among the five terms.
    pub scale: f64,
    /// `rms / scale`.
    pub normalized: f64,
}

/// Residual of the leader's stationarity condition along stored paths.
pub fn stationarity_residual(eq: &Equilibrium, xs: &Ensemble, ys: &Ensemble, zs: &Ensemble, v_shift: f64) -> Result<Stationarity> {
    check_ensemble(eq, xs)?;
    let n2 = xs.dim;
    let mut sq = [0.0; 6];
    let mut count = 0usize;
    for k in 0..xs.grid.len() {
        let t = xs.grid.t(k);
        let ac = eq.aug.at(t)?;
        let theta = eq.leader.theta2.get(k);
        let v = eq.leader.v2.get(k).add_scalar(v_shift);
        let g1 = &ac.r2 * &theta + &ac.f2;
        let t4 = &ac.r2 * &v;
        for path in 0..xs.paths {
            let x = DMatrix::from_column_slice(n2, 1, xs.get(path, k));
            let y = DMatrix::from_column_slice(n2, 1, ys.get(path, k));
            let z = DMatrix::from_column_slice(n2, 1, zs.get(path, k));
            let terms = [&g1 * &x, ac.b2.transpose() * &y, ac.d2.transpose() * &z, t4.clone(), ac.rho.clone()];
            let total = terms.iter().fold(DMatrix::zeros(theta.nrows(), 1), |a, b| a + b);
            for (i, tm) in terms.iter().enumerate() {
                sq[i] += tm.norm_squared();
            }
            sq[5] += total.norm_squared();
            count += 1;
        }
    }
    let rms = |s: f64| (s / count.max(1) as f64).sqrt();
    let scale = sq[..5].iter().map(|s| rms(*s)).fold(0.0, f64::max);
    let r = rms(sq[5]);
    Ok(Stationarity { rms: r, scale, normalized: if scale > 0.0 { r / scale } else { r } })
}

/// Piecewise-constant deterministic control on the intervals of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub grid: TimeGrid,
    /// Value on `[t_k, t_{k+1})`, one per interval.
    pub values: Vec<DMatrix<f64>>,
}

impl Direction {
    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        Direction { grid, values: vec![DMatrix::zeros(dim, 1); grid.steps()] }
    }

    pub fn constant(grid: TimeGrid, v: &DMatrix<f64>) -> Self {
        Direction { grid, values: vec![v.clone(); grid.steps()] }
    }

    /// `pieces` constant pieces with random breakpoints at grid nodes and
    /// standard normal values, scaled to unit L2 norm.
    pub fn random(grid: TimeGrid, dim: usize, pieces: usize, rng: &mut impl Rng) -> Self {
        let n = grid.steps();
        let pieces = pieces.clamp(1, n);
        let mut cuts: Vec<usize> = Vec::with_capacity(pieces + 1);
        while cuts.len() < pieces - 1 {
            let c = rng.random_range(1..n);
            if !cuts.contains(&c) {
                cuts.push(c);
            }
        }
        cuts.push(0);
        cuts.push(n);
        cuts.sort_unstable();
        let mut values = Vec::with_capacity(n);
        for w in cuts.windows(2) {
            let v = DMatrix::from_fn(dim, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            values.extend(std::iter::repeat_n(v, w[1] - w[0]));
        }
        let mut d = Direction { grid, values };
        let norm = d.norm();
        if norm > 0.0 {
            d.values.iter_mut().for_each(|v| *v /= norm);
        }
        d
    }

    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_squared()).sum::<f64>() * self.grid.dt()).sqrt()
    }

    /// Value on the interval containing `t` (right-continuous; the last
    /// interval at `T`).
    pub fn at(&self, t: f64) -> Result<&DMatrix<f64>> {
        let (i, _) = self.grid.locate(t)?;
        Ok(&self.values[i.min(self.grid.steps() - 1)])
    }

    pub fn dim(&self) -> usize {
        self.values[0].nrows()
    }
}

/// `eta0` of the follower's response to a deterministic leader addition
/// `delta`: `d eta0/dt = -(Ahat' eta0 + Fhat2' delta)`, `eta0(T) = 0`.
pub fn response_adjoint(aug: &AugmentedSystem, delta: &Direction) -> Result<MatrixPath> {
    let n = aug.dims().n;
    integrate_backward_rk4_with(
        |k, t, e| {
            let red = aug.reduced_at(t)?;
            Ok(-(red.a.transpose() * e + red.f2.transpose() * &delta.values[k]))
        },
        DMatrix::zeros(n, 1),
        &delta.grid,
        |_| {},
    )
}

/// A unilateral deviation from the equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub enum Deviation {
    /// Follower plays `scale * Theta1 x' + (u1_eq - Theta1 x_eq) + eps * delta`.
    Follower { gain_scale: f64, delta: Direction, eps: f64 },
    /// Leader plays `u2_eq + eps * delta`; the follower answers optimally.
    Leader { delta: Direction, eps: f64 },
}

impl Deviation {
    pub fn none_follower(grid: TimeGrid, m1: usize) -> Self {
        Deviation::Follower { gain_scale: 1.0, delta: Direction::zero(grid, m1), eps: 0.0 }
    }

    pub fn none_leader(grid: TimeGrid, m2: usize) -> Self {
        Deviation::Leader { delta: Direction::zero(grid, m2), eps: 0.0 }
    }

    fn player(&self) -> usize {
        match self {
            Deviation::Follower { .. } => 0,
            Deviation::Leader { .. } => 1,
        }
    }
}

/// Joint model of `(x', X)` under a deviation, tallies `(J1, J2, 0)` of the
/// deviating play.
pub fn deviation_model(eq: &Equilibrium, dev: &Deviation, substeps: usize) -> Result<AffineModel> {
    let spec = eq.spec();
    let dm = spec.dims;
    let (n, m1, m2) = (dm.n, dm.m1, dm.m2);
    let d = 3 * n;
    let fine = eq.grid.refined(substeps);
    let eta0 = match dev {
        Deviation::Leader { delta, .. } => {
            if delta.grid != eq.grid || delta.dim() != m2 {
                return Err(Error::Shape("leader direction must live on the solver grid with m2 rows".into()));
            }
            Some(response_adjoint(&eq.aug, delta)?)
        }
        Deviation::Follower { delta, .. } => {
            if delta.grid != eq.grid || delta.dim() != m1 {
                return Err(Error::Shape("follower direction must live on the solver grid with m1 rows".into()));
            }
            None
        }
    };
    let embed = |m: &DMatrix<f64>, rows: usize| {
        let mut g = DMatrix::zeros(rows, d);
        g.view_mut((0, n), (rows, 2 * n)).copy_from(m);
        g
    };
    let mut xg = DMatrix::zeros(n, d);
    xg.view_mut((0, 0), (n, n)).fill_with_identity();
    let xmap = AffineMap::new(xg, DMatrix::zeros(n, 1));

    let mut nodes = Vec::with_capacity(fine.len());
    for t in fine.times() {
        let node = eq.closed_loop_at(t)?;
        let c = spec.coefficients_at(t)?;
        let th1 = eq.follower_fine.theta1.at(t)?;
        // u1_eq(X) - Theta1 x_eq, on xi
        let mut k1 = embed(&node.u1_gain, m1);
        k1.view_mut((0, n), (m1, n)).copy_from(&(node.u1_gain.view((0, 0), (m1, n)) - &th1));
        let u2eq = AffineMap::new(embed(&node.u2_gain, m2), node.u2_offset.clone());
        let (u1, u2) = match dev {
            Deviation::Follower { gain_scale, delta, eps } => {
                let mut g = k1;
                g.view_mut((0, 0), (m1, n)).copy_from(&(&th1 * *gain_scale));
                (AffineMap::new(g, &node.u1_offset + delta.at(t)? * *eps), u2eq)
            }
            Deviation::Leader { delta, eps } => {
                let mut g = k1;
                g.view_mut((0, 0), (m1, n)).copy_from(&th1);
                let red = eq.aug.reduced_at(t)?;
                let dl = delta.at(t)? * *eps;
                let e0 = eta0.as_ref().expect("leader response adjoint").at(t)? * *eps;
                let shift = -(&red.rhat11_inv * (&red.b1t * e0 + &red.rhat12 * &dl));
                (AffineMap::new(g, &node.u1_offset + shift), AffineMap::new(u2eq.gain, u2eq.offset + dl))
            }
        };
        let maps = GameMaps { x: &xmap, u1: &u1, u2: &u2 };
        let (drift, diff) = maps.dynamics(&c);
        let [j1, j2] = maps.costs(&c);
        let stack = |top: &AffineMap, m: &DMatrix<f64>, o: &DMatrix<f64>| {
            let low = AffineMap::new(embed(m, 2 * n), o.clone());
            AffineMap::stack(&[top, &low])
        };
        let dr = stack(&drift, &node.drift, &node.drift_offset);
        let df = stack(&diff, &node.diffusion, &node.diffusion_offset);
        nodes.push(AffineNode {
            drift: dr.gain,
            drift_offset: dr.offset,
            diffusion: df.gain,
            diffusion_offset: df.offset,
            costs: [j1, j2, Quadratic::zero(d)],
        });
    }
    let dummy = AffineMap::new(DMatrix::zeros(m1, d), DMatrix::zeros(m1, 1));
    let dummy2 = AffineMap::new(DMatrix::zeros(m2, d), DMatrix::zeros(m2, 1));
    let [g1, g2] = GameMaps { x: &xmap, u1: &dummy, u2: &dummy2 }.terminal(spec);
    let mut x0 = spec.x0.as_slice().to_vec();
    x0.extend_from_slice(eq.aug.x0.as_slice());
    AffineModel::new(fine, x0, nodes, [g1, g2, Quadratic::zero(d)])
}

/// Per-path tallies of a deviation.
pub fn simulate_deviation(eq: &Equilibrium, dev: &Deviation, cfg: &SimConfig) -> Result<PathSamples> {
    let model = deviation_model(eq, dev, cfg.substeps)?;
    let mut c = cfg.clone();
    c.store = None;
    c.moments_stride = None;
    Ok(run_paths(&model, &c)?.samples)
}

fn differences(a: &PathSamples, b: &PathSamples, i: usize) -> Vec<f64> {
    a.fine.iter().zip(&b.fine).map(|(x, y)| x[i] - y[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateauxEntry {
    /// 1 = follower (J1), 2 = leader (J2).
    pub player: usize,
    pub direction: usize,
    pub derivative: f64,
    pub se: f64,
    /// Derivative at twice the step; central differences of a quadratic are
    /// step-independent, so this should agree to round-off.
    pub derivative_2eps: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Central-difference derivatives `[J(u + eps v) - J(u - eps v)] / (2 eps)`
/// with common random numbers, for each direction. Follower directions
/// perturb `u1` (with its own gain scaled by `gain_scale`); leader directions
/// perturb `u2` with the follower responding. The tolerance is
/// `tol * max(1, |J(base)|) * |v|`.
pub fn gateaux_check(
    eq: &Equilibrium,
    player: usize,
    directions: &[Direction],
    eps: f64,
    gain_scale: f64,
    tol: f64,
    cfg: &SimConfig,
) -> Result<Vec<GateauxEntry>> {
    let make = |delta: &Direction, e: f64| match player {
        1 => Ok(Deviation::Follower { gain_scale, delta: delta.clone(), eps: e }),
        2 => Ok(Deviation::Leader { delta: delta.clone(), eps: e }),
        _ => Err(Error::Validation(format!("player must be 1 or 2, got {player}"))),
    };
    let i = player - 1;
    let base = match player {
        1 => Deviation::Follower { gain_scale, delta: Direction::zero(eq.grid, eq.spec().dims.m1), eps: 0.0 },
        _ => Deviation::none_leader(eq.grid, eq.spec().dims.m2),
    };
    let jb = Estimate::from_samples(&simulate_deviation(eq, &base, cfg)?.column(i));
    let scale = jb.mean.abs().max(1.0);
    let mut out = Vec::with_capacity(directions.len());
    for (k, v) in directions.iter().enumerate() {
        let deriv = |e: f64| -> Result<Estimate> {
            let plus = simulate_deviation(eq, &make(v, e)?, cfg)?;
            let minus = simulate_deviation(eq, &make(v, -e)?, cfg)?;
            let d: Vec<f64> = differences(&plus, &minus, i).into_iter().map(|x| x / (2.0 * e)).collect();
            Ok(Estimate::from_samples(&d))
        };
        let d1 = deriv(eps)?;
        let d2 = deriv(2.0 * eps)?;
        let tolerance = tol * scale * v.norm();
        out.push(GateauxEntry {
            player,
            direction: k,
            derivative: d1.mean,
            se: d1.se,
            derivative_2eps: d2.mean,
            tolerance,
            pass: d1.mean.abs() <= tolerance,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestResponseEntry {
    pub player: usize,
    pub description: String,
    pub delta_j: f64,
    pub se: f64,
    /// `delta_j >= -3 se`.
    pub pass: bool,
    /// `delta_j > 3 se`.
    pub strict: bool,
}

/// Cost change of the deviating player against equilibrium play, with
/// common random numbers. The baseline is the joint model with a null
/// deviation, so a null deviation gives exactly zero.
pub fn best_response_check(eq: &Equilibrium, deviations: &[(String, Deviation)], cfg: &SimConfig) -> Result<Vec<BestResponseEntry>> {
    let dm = eq.spec().dims;
    let mut base: [Option<PathSamples>; 2] = [None, None];
    let mut out = Vec::with_capacity(deviations.len());
    for (desc, dev) in deviations {
        let i = dev.player();
        if base[i].is_none() {
            let null = if i == 0 { Deviation::none_follower(eq.grid, dm.m1) } else { Deviation::none_leader(eq.grid, dm.m2) };
            base[i] = Some(simulate_deviation(eq, &null, cfg)?);
        }
        let s = simulate_deviation(eq, dev, cfg)?;
        let e = Estimate::from_samples(&differences(&s, base[i].as_ref().expect("baseline"), i));
        out.push(BestResponseEntry {
            player: i + 1,
            description: desc.clone(),
            delta_j: e.mean,
            se: e.se,
            pass: e.mean >= -3.0 * e.se,
            strict: e.mean > 3.0 * e.se,
        });
    }
    Ok(out)
}

/// Random follower and leader deviations: gain scalings, random directions
/// and combinations of both.
pub fn random_deviations(eq: &Equilibrium, count: usize, seed: u64) -> Vec<(String, Deviation)> {
    let dm = eq.spec().dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * count);
    for k in 0..count {
        let scale = 1.0 + if k % 2 == 0 { 1.0 } else { -1.0 } * rng.random_range(0.1..0.4);
        let (delta, eps) = if k % 3 == 0 {
            (Direction::zero(eq.grid, dm.m1), 0.0)
        } else {
            (Direction::random(eq.grid, dm.m1, 8, &mut rng), rng.random_range(0.05..0.3))
        };
        out.push((format!("follower gain x{scale:.3}, direction eps {eps:.3}"), Deviation::Follower { gain_scale: scale, delta, eps }));
    }
    for _ in 0..count {
        let eps = rng.random_range(0.05..0.3);
        let delta = Direction::random(eq.grid, dm.m2, 8, &mut rng);
        out.push((format!("leader open-loop direction eps {eps:.3}"), Deviation::Leader { delta, eps }));
    }
    out
}

/// Which homogeneous cost a convexity probe evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProbeProblem {
    /// `x0`-system of the follower driven by `u1`.
    Follower,
    /// Reduced leader system driven by `u2` through `(x0, eta0)`.
    Leader,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub problem: ProbeProblem,
    /// `J(u) / |u|^2` per sampled direction.
    pub ratios: Vec<f64>,
    pub ratio_se: Vec<f64>,
    pub min_ratio: f64,
}

/// Homogeneous cost (zero initial state, drivers removed) at `samples`
/// random unit directions, by simulation.
pub fn convexity_probe(spec: &GameSpec, problem: ProbeProblem, samples: usize, cfg: &SimConfig, grid: &TimeGrid) -> Result<ConvexityReport> {
    let h = spec.homogeneous_part();
    let dm = h.dims;
    let n = dm.n;
    let fine = grid.refined(cfg.substeps);
    let aug = match problem {
        ProbeProblem::Leader => {
            let f = solve_follower_riccati(&h, &grid.refined(2))?;
            Some(AugmentedSystem::new(&h, &f, &vec![0.0; n])?)
        }
        ProbeProblem::Follower => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut ratios = Vec::with_capacity(samples);
    let mut ses = Vec::with_capacity(samples);
    let id = AffineMap::new(DMatrix::identity(n, n), DMatrix::zeros(n, 1));
    for _ in 0..samples {
        let m = if problem == ProbeProblem::Follower { dm.m1 } else { dm.m2 };
        let delta = Direction::random(*grid, m, 8, &mut rng);
        let eta0 = match &aug {
            Some(a) => Some(response_adjoint(a, &delta)?),
            None => None,
        };
        let mut nodes = Vec::with_capacity(fine.len());
        for t in fine.times() {
            let dv = delta.at(t)?.clone();
            let node = match (&aug, &eta0) {
                (Some(a), Some(e0)) => {
                    let red = a.reduced_at(t)?;
                    let e = e0.at(t)?;
                    let drift = AffineMap::new(red.a.clone(), &red.f1 * &e + &red.b2 * &dv);
                    let diff = AffineMap::new(red.c.clone(), red.b1.transpose() * &e + &red.d2 * &dv);
                    // w = (x0, eta0, zeta0 = 0, u2)
                    let mut g = DMatrix::zeros(3 * n + m, n);
                    g.view_mut((0, 0), (n, n)).fill_with_identity();
                    let mut g0 = DMatrix::zeros(3 * n + m, 1);
                    g0.view_mut((n, 0), (n, 1)).copy_from(&e);
                    g0.view_mut((3 * n, 0), (m, 1)).copy_from(&dv);
                    let q = Quadratic::pullback(&red.cost_matrix(), &DMatrix::zeros(3 * n + m, 1), 0.0, &g, &g0);
                    AffineNode {
                        drift: drift.gain,
                        drift_offset: drift.offset,
                        diffusion: diff.gain,
                        diffusion_offset: diff.offset,
                        costs: [q.clone(), q, Quadratic::zero(n)],
                    }
                }
                _ => {
                    let c = h.coefficients_at(t)?;
                    let u1 = AffineMap::constant(n, dv);
                    let u2 = AffineMap::constant(n, DMatrix::zeros(dm.m2, 1));
                    let maps = GameMaps { x: &id, u1: &u1, u2: &u2 };
                    let (drift, diff) = maps.dynamics(&c);
                    let [j1, _] = maps.costs(&c);
                    AffineNode {
                        drift: drift.gain,
                        drift_offset: drift.offset,
                        diffusion: diff.gain,
                        diffusion_offset: diff.offset,
                        costs: [j1.clone(), j1, Quadratic::zero(n)],
                    }
                }
            };
            nodes.push(node);
        }
        let gm = if problem == ProbeProblem::Follower { &h.player1.g_mat } else { &h.player2.g_mat };
        let term = Quadratic { h: gm.clone(), l: DMatrix::zeros(n, 1), c: 0.0 };
        let model = AffineModel::new(fine, vec![0.0; n], nodes, [term.clone(), term, Quadratic::zero(n)])?;
        let mut c = cfg.clone();
        c.store = None;
        c.moments_stride = None;
        let r = run_paths(&model, &c)?;
        let norm2 = delta.norm().powi(2);
        ratios.push(r.j1.mean / norm2);
        ses.push(r.j1.se / norm2);
    }
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ConvexityReport { problem, ratios, ratio_se: ses, min_ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityCheck {
    pub residual: Stationarity,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub stationarity: StationarityCheck,
    pub gateaux: Vec<GateauxEntry>,
    pub best_response: Vec<BestResponseEntry>,
    pub convexity_min: ConvexityMin,
    pub overall: bool,
    pub note: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityMin {
    pub follower: f64,
    pub leader: f64,
}

/// Settings of [`verify_equilibrium`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub sim: SimConfig,
    pub directions: usize,
    pub deviations: usize,
    pub convexity_samples: usize,
    pub eps: f64,
    pub gateaux_tol: f64,
    pub stationarity_tol: f64,
    pub stored_paths: usize,
}

impl VerifyOptions {
    pub fn new(sim: SimConfig) -> Self {
        VerifyOptions {
            sim,
            directions: 10,
            deviations: 10,
            convexity_samples: 10,
            eps: 1e-3,
            gateaux_tol: 5e-3,
            stationarity_tol: 1e-6,
            stored_paths: 200,
        }
    }
}

/// Run every check with the given settings.
pub fn verify_equilibrium(eq: &Equilibrium, opts: &VerifyOptions) -> Result<VerificationReport> {
    let dm = eq.spec().dims;
    let mut cfg = opts.sim.clone();
    cfg.richardson = false;
    cfg.store = Some(crate::simulate::TrajectoryStore { paths: opts.stored_paths, stride: cfg.substeps });
    cfg.moments_stride = None;
    let sim = crate::simulate::simulate_closed_loop(eq, &cfg)?;
    let xs = sim.trajectories.as_ref().expect("stored paths");
    let (ys, zs) = reconstruct_adjoints(eq, xs, 0.0)?;
    let st = stationarity_residual(eq, xs, &ys, &zs, 0.0)?;
    let stationarity = StationarityCheck { residual: st, tolerance: opts.stationarity_tol, pass: st.normalized <= opts.stationarity_tol };

    cfg.store = None;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.sim.seed.wrapping_add(1));
    let mut gateaux = Vec::new();
    for (player, m) in [(1, dm.m1), (2, dm.m2)] {
        let dirs: Vec<Direction> = (0..opts.directions).map(|_| Direction::random(eq.grid, m, 8, &mut rng)).collect();
        gateaux.extend(gateaux_check(eq, player, &dirs, opts.eps, 1.0, opts.gateaux_tol, &cfg)?);
    }
    let devs = random_deviations(eq, opts.deviations, opts.sim.seed.wrapping_add(2));
    let best_response = best_response_check(eq, &devs, &cfg)?;
    let spec = eq.spec();
    let fc = convexity_probe(spec, ProbeProblem::Follower, opts.convexity_samples, &cfg, &eq.grid)?;
    let lc = convexity_probe(spec, ProbeProblem::Leader, opts.convexity_samples, &cfg, &eq.grid)?;
    let overall = stationarity.pass && gateaux.iter().all(|g| g.pass) && best_response.iter().all(|b| b.pass);
    Ok(VerificationReport {
        stationarity,
        gateaux,
        best_response,
        convexity_min: ConvexityMin { follower: fc.min_ratio, leader: lc.min_ratio },
        overall,
        note: "finitely many sampled perturbations: numerical evidence, not a proof of optimality",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leader::solve_equilibrium;
    use crate::model::CoefficientPath;
    use crate::presets;
    use crate::simulate::{simulate_closed_loop, TrajectoryStore};

    fn rd(steps: usize) -> Equilibrium {
        let spec = presets::rd_competition(&presets::RdParams::default());
        solve_equilibrium(&spec, &TimeGrid::new(1.0, steps).unwrap()).unwrap()
    }

    fn stored(eq: &Equilibrium, paths: usize) -> Ensemble {
        let mut cfg = SimConfig::new(paths, 1, 11);
        cfg.store = Some(TrajectoryStore { paths, stride: 1 });
        simulate_closed_loop(eq, &cfg).unwrap().trajectories.unwrap()
    }

    #[test]
    fn terminal_adjoint_identity() {
        let eq = rd(200);
        let xs = stored(&eq, 20);
        let (ys, _) = reconstruct_adjoints(&eq, &xs, 0.0).unwrap();
        let g2 = &eq.aug.g2;
        for p in 0..20 {
            let x = DMatrix::from_column_slice(2, 1, xs.get(p, 200));
            let y = DMatrix::from_column_slice(2, 1, ys.get(p, 200));
            assert!((y - (g2 * x + &eq.aug.g)).norm() < 1e-10);
        }
    }

    #[test]
    fn stationarity_identity_and_injection() {
        let eq = rd(200);
        let xs = stored(&eq, 30);
        let (ys, zs) = reconstruct_adjoints(&eq, &xs, 0.0).unwrap();
        let s = stationarity_residual(&eq, &xs, &ys, &zs, 0.0).unwrap();
        assert!(s.normalized < 1e-8, "{s:?}");
        let (ys, zs) = reconstruct_adjoints(&eq, &xs, 0.1).unwrap();
        let s = stationarity_residual(&eq, &xs, &ys, &zs, 0.1).unwrap();
        assert!(s.normalized > 1e-2, "{s:?}");
    }

    #[test]
    fn directions_are_unit_and_piecewise() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Direction::random(g, 2, 8, &mut rng);
        assert!((d.norm() - 1.0).abs() < 1e-12);
        let jumps = d.values.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(jumps, 7);
        assert_eq!(d.at(1.0).unwrap(), &d.values[99]);
    }

    #[test]
    fn null_deviation_is_exactly_zero() {
        let eq = rd(100);
        let cfg = SimConfig::new(500, 1, 3);
        let devs = vec![
            ("none".to_string(), Deviation::none_follower(eq.grid, 1)),
            ("none".to_string(), Deviation::none_leader(eq.grid, 1)),
        ];
        for e in best_response_check(&eq, &devs, &cfg).unwrap() {
            assert_eq!(e.delta_j, 0.0);
            assert_eq!(e.se, 0.0);
        }
    }

    #[test]
    fn null_deviation_reproduces_equilibrium_costs() {
        let eq = rd(100);
        let cfg = SimConfig::new(200, 1, 3);
        let s = simulate_deviation(&eq, &Deviation::none_follower(eq.grid, 1), &cfg).unwrap();
        let r = simulate_closed_loop(&eq, &cfg).unwrap();
        for (a, b) in s.fine.iter().zip(&r.samples.fine) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_follower_gain_costs_more() {
        let eq = rd(200);
        let cfg = SimConfig::new(2000, 1, 3);
        let devs = vec![
            ("gain x1.2".to_string(), Deviation::Follower { gain_scale: 1.2, delta: Direction::zero(eq.grid, 1), eps: 0.0 }),
            ("leader +0.1".to_string(), Deviation::Leader { delta: Direction::constant(eq.grid, &DMatrix::from_element(1, 1, 1.0)), eps: 0.1 }),
        ];
        for e in best_response_check(&eq, &devs, &cfg).unwrap() {
            assert!(e.strict, "{e:?}");
        }
    }

    #[test]
    fn gateaux_on_tanh_follower() {
        let spec = presets::tanh_follower();
        let eq = solve_equilibrium(&spec, &TimeGrid::new(1.0, 500).unwrap()).unwrap();
        let cfg = SimConfig::new(4, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dirs: Vec<_> = (0..3).map(|_| Direction::random(eq.grid, 1, 8, &mut rng)).collect();
        let good = gateaux_check(&eq, 1, &dirs, 1e-3, 1.0, 5e-3, &cfg).unwrap();
        assert!(good.iter().all(|g| g.pass), "{good:?}");
        for g in &good {
            assert!((g.derivative - g.derivative_2eps).abs() < 1e-9);
        }
        let bad = gateaux_check(&eq, 1, &dirs, 1e-3, 0.5, 5e-3, &cfg).unwrap();
        assert!(bad.iter().any(|g| g.derivative.abs() > 10.0 * g.tolerance), "{bad:?}");
    }

    #[test]
    fn convexity_probes() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let cfg = SimConfig::new(50, 1, 4);
        // cost = |u|^2
        let mut s = crate::model::GameSpec::zeros(crate::model::Dims::new(1, 1, 1), 1.0);
        s.player1.r11 = CoefficientPath::scalar(1.0);
        s.player2.r22 = CoefficientPath::scalar(1.0);
        let r = convexity_probe(&s, ProbeProblem::Follower, 5, &cfg, &grid).unwrap();
        assert!((r.min_ratio - 1.0).abs() < 1e-12);
        let r = convexity_probe(&s, ProbeProblem::Leader, 5, &cfg, &grid).unwrap();
        assert!((r.min_ratio - 1.0).abs() < 1e-12);
        // degenerate convex case: cost |x(1)|^2
        let r = convexity_probe(&presets::open_loop_only(), ProbeProblem::Follower, 20, &cfg, &grid).unwrap();
        assert!(r.min_ratio >= 0.0 && r.min_ratio < 0.5, "{r:?}");
        // negative weight
        s.player2.r22 = CoefficientPath::scalar(-1.0);
        let r = convexity_probe(&s, ProbeProblem::Leader, 3, &cfg, &grid).unwrap();
        assert!(r.min_ratio < 0.0);
    }
}
