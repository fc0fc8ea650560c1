//! Euler-Maruyama Monte Carlo for the closed-loop augmented SDE and for the
//! original game under arbitrary feedback, with cost estimation.
//!
//! Every path `i` draws its Brownian increments from its own ChaCha8 stream
//! `(seed, i)`, paths are processed in fixed chunks and per-path results are
//! reduced in path order, so results do not depend on the thread count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::follower::rhat11;
use crate::leader::{ClosedLoopNode, Equilibrium};
use crate::model::{Coefficients, GameSpec, TimeGrid};
use crate::numerics::{pairwise_sum, pinv, MatrixPath, PINV_REL_TOL};

const CHUNK: usize = 256;

/// Which paths to keep in full.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryStore {
    /// The first `paths` paths are stored.
    pub paths: usize,
    /// Keep every `stride`-th simulation node.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub paths: usize,
    /// Euler steps per solver grid step.
    pub substeps: usize,
    pub seed: u64,
    pub store: Option<TrajectoryStore>,
    /// Stride (in simulation steps) of the ensemble mean/std paths.
    pub moments_stride: Option<usize>,
    /// Also run every path on the twice coarser grid with the same noise and
    /// report the Richardson combination `2 J(dt) - J(2 dt)`.
    pub richardson: bool,
}

impl SimConfig {
    pub fn new(paths: usize, substeps: usize, seed: u64) -> Self {
        SimConfig { paths, substeps, seed, store: None, moments_stride: None, richardson: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 || self.substeps == 0 {
            return Err(Error::Validation("paths and substeps must be positive".into()));
        }
        if let Some(s) = self.store {
            if s.stride == 0 {
                return Err(Error::Validation("trajectory stride must be positive".into()));
            }
        }
        if self.moments_stride == Some(0) {
            return Err(Error::Validation("moments stride must be positive".into()));
        }
        Ok(())
    }
}

/// Sample mean with standard error `std / sqrt(M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Estimate {
        let m = v.len();
        if m == 0 {
            return Estimate { mean: f64::NAN, se: f64::NAN };
        }
        let mean = pairwise_sum(v) / m as f64;
        if m == 1 {
            return Estimate { mean, se: 0.0 };
        }
        let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&dev) / (m - 1) as f64;
        Estimate { mean, se: (var / m as f64).sqrt() }
    }

    /// `|mean - target| <= k se`.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// Paths stored on a thinned grid, path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub paths: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Ensemble {
    pub fn get(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * self.grid.len() + node) * self.dim;
        &self.data[o..o + self.dim]
    }
}

/// Per-path tallies `(J1, J2, aux)` on the simulation grid and, when asked
/// for, on the coarse companion grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSamples {
    pub fine: Vec<[f64; 3]>,
    pub coarse: Option<Vec<[f64; 3]>>,
}

impl PathSamples {
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.fine.iter().map(|r| r[i]).collect()
    }

    /// Per-path Richardson combination `2 fine - coarse`.
    pub fn extrapolated_column(&self, i: usize) -> Option<Vec<f64>> {
        self.coarse.as_ref().map(|c| self.fine.iter().zip(c).map(|(f, c)| 2.0 * f[i] - c[i]).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub paths: usize,
    pub steps: usize,
    pub dt: f64,
    pub j1: Estimate,
    pub j2: Estimate,
    /// Third tally of the model (for the closed loop: the follower value
    /// formula evaluated along each path).
    pub aux: Estimate,
    pub extrapolated: Option<[Estimate; 3]>,
    pub samples: PathSamples,
    pub trajectories: Option<Ensemble>,
    pub mean_path: Option<MatrixPath>,
    pub std_path: Option<MatrixPath>,
    pub stationarity_rms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub paths: usize,
    pub steps: usize,
    pub dt: f64,
    pub j1: Estimate,
    pub j2: Estimate,
    pub aux: Estimate,
    pub extrapolated: Option<[Estimate; 3]>,
    pub stationarity_rms: Option<f64>,
}

impl SimResult {
    pub fn summary(&self) -> SimSummary {
        SimSummary {
            paths: self.paths,
            steps: self.steps,
            dt: self.dt,
            j1: self.j1,
            j2: self.j2,
            aux: self.aux,
            extrapolated: self.extrapolated,
            stationarity_rms: self.stationarity_rms,
        }
    }

    /// Richardson estimates when available, plain ones otherwise.
    pub fn best(&self) -> [Estimate; 3] {
        self.extrapolated.unwrap_or([self.j1, self.j2, self.aux])
    }
}

/// A system simulated path by path with one scalar Brownian motion.
pub trait PathModel: Sync {
    fn dim(&self) -> usize;
    fn scratch_len(&self) -> usize;
    /// Number of simulation steps.
    fn steps(&self) -> usize;
    fn dt(&self) -> f64;
    fn initial(&self, x: &mut [f64]);
    /// Running cost rates `(J1, J2, aux)` at node `j` and state `x`; then `x`
    /// is advanced over `stride` simulation steps with increment `dw`.
    fn advance(&self, j: usize, stride: usize, dw: f64, x: &mut [f64], scratch: &mut [f64]) -> [f64; 3];
    fn terminal(&self, x: &[f64]) -> [f64; 3];
}

struct ChunkOut {
    fine: Vec<[f64; 3]>,
    coarse: Vec<[f64; 3]>,
    stored: Vec<f64>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

fn run_path<M: PathModel + ?Sized>(
    model: &M,
    path: usize,
    stride: usize,
    dws: &[f64],
    x: &mut [f64],
    scratch: &mut [f64],
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<[f64; 3]> {
    let n = model.steps();
    let h = model.dt() * stride as f64;
    let mut acc = [0.0; 3];
    model.initial(x);
    let mut j = 0;
    while j < n {
        visit(j, x);
        let dw: f64 = dws[j..j + stride].iter().sum();
        let r = model.advance(j, stride, dw, x, scratch);
        for i in 0..3 {
            acc[i] += h * r[i];
        }
        j += stride;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathDiverged { path, t: j as f64 * model.dt() });
        }
    }
    visit(n, x);
    let r = model.terminal(x);
    for i in 0..3 {
        acc[i] += r[i];
    }
    Ok(acc)
}

/// Simulate every path of `model` and return per-path tallies plus the
/// optional stored trajectories and ensemble moments.
pub fn run_paths<M: PathModel + ?Sized>(model: &M, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let n = model.steps();
    let d = model.dim();
    let dt = model.dt();
    if cfg.richardson && !n.is_multiple_of(2) {
        return Err(Error::Validation("Richardson companion needs an even number of steps".into()));
    }
    let store = cfg.store.map(|s| TrajectoryStore { paths: s.paths.min(cfg.paths), stride: s.stride });
    for stride in store.map(|s| s.stride).into_iter().chain(cfg.moments_stride) {
        if !n.is_multiple_of(stride) {
            return Err(Error::Validation(format!("stride {stride} does not divide {n} steps")));
        }
    }
    let mstride = cfg.moments_stride;
    let mnodes = mstride.map_or(0, |s| n / s + 1);
    let sdt = dt.sqrt();
    let nchunks = cfg.paths.div_ceil(CHUNK);

    let chunks: Vec<Result<ChunkOut>> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(cfg.paths);
            let mut out = ChunkOut {
                fine: Vec::with_capacity(hi - lo),
                coarse: Vec::new(),
                stored: Vec::new(),
                sum: vec![0.0; mnodes * d],
                sumsq: vec![0.0; mnodes * d],
            };
            let mut dws = vec![0.0; n];
            let mut x = vec![0.0; d];
            let mut scratch = vec![0.0; model.scratch_len()];
            for path in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(path as u64);
                for w in dws.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = z * sdt;
                }
                let keep = store.filter(|s| path < s.paths);
                let ChunkOut { stored, sum, sumsq, .. } = &mut out;
                let r = run_path(model, path, 1, &dws, &mut x, &mut scratch, |j, x| {
                    if let Some(s) = keep {
                        if j % s.stride == 0 {
                            stored.extend_from_slice(x);
                        }
                    }
                    if let Some(ms) = mstride {
                        if j % ms == 0 {
                            let o = (j / ms) * d;
                            for (i, v) in x.iter().enumerate() {
                                sum[o + i] += v;
                                sumsq[o + i] += v * v;
                            }
                        }
                    }
                })?;
                out.fine.push(r);
                if cfg.richardson {
                    let r = run_path(model, path, 2, &dws, &mut x, &mut scratch, |_, _| {})?;
                    out.coarse.push(r);
                }
            }
            Ok(out)
        })
        .collect();

    let mut fine = Vec::with_capacity(cfg.paths);
    let mut coarse = Vec::new();
    let mut stored = Vec::new();
    let mut sum = vec![0.0; mnodes * d];
    let mut sumsq = vec![0.0; mnodes * d];
    for c in chunks {
        let c = c?;
        fine.extend(c.fine);
        coarse.extend(c.coarse);
        stored.extend(c.stored);
        for i in 0..sum.len() {
            sum[i] += c.sum[i];
            sumsq[i] += c.sumsq[i];
        }
    }
    let samples = PathSamples { fine, coarse: cfg.richardson.then_some(coarse) };
    let est = |i: usize| Estimate::from_samples(&samples.column(i));
    let extrapolated = if cfg.richardson {
        let e = |i: usize| Estimate::from_samples(&samples.extrapolated_column(i).unwrap_or_default());
        Some([e(0), e(1), e(2)])
    } else {
        None
    };
    let horizon = dt * n as f64;
    let trajectories = match store {
        Some(s) => Some(Ensemble { grid: TimeGrid::new(horizon, n / s.stride)?, paths: s.paths, dim: d, data: stored }),
        None => None,
    };
    let (mean_path, std_path) = match mstride {
        Some(ms) => {
            let g = TimeGrid::new(horizon, n / ms)?;
            let m = cfg.paths as f64;
            let mut mean = MatrixPath::zeros(g, d, 1);
            let mut sd = MatrixPath::zeros(g, d, 1);
            for k in 0..g.len() {
                let mu = DMatrix::from_iterator(d, 1, (0..d).map(|i| sum[k * d + i] / m));
                let s = DMatrix::from_iterator(
                    d,
                    1,
                    (0..d).map(|i| (sumsq[k * d + i] / m - mu[i] * mu[i]).max(0.0).sqrt()),
                );
                mean.set(k, &mu);
                sd.set(k, &s);
            }
            (Some(mean), Some(sd))
        }
        None => (None, None),
    };
    Ok(SimResult {
        paths: cfg.paths,
        steps: n,
        dt,
        j1: est(0),
        j2: est(1),
        aux: est(2),
        extrapolated,
        samples,
        trajectories,
        mean_path,
        std_path,
        stationarity_rms: None,
    })
}

/// `x' H x + 2 l' x + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn zero(d: usize) -> Self {
        Quadratic { h: DMatrix::zeros(d, d), l: DMatrix::zeros(d, 1), c: 0.0 }
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Quadratic { c, ..Self::zero(d) }
    }

    /// The form `w' W w + 2 lin' w + c` with `w = G x + g`, written in `x`.
    pub fn pullback(w: &DMatrix<f64>, lin: &DMatrix<f64>, c: f64, g: &DMatrix<f64>, g0: &DMatrix<f64>) -> Self {
        let wg0 = w * g0;
        let h = g.transpose() * w * g;
        Quadratic {
            h: (&h + h.transpose()) * 0.5,
            l: g.transpose() * (&wg0 + lin),
            c: g0.dot(&wg0) + 2.0 * lin.dot(g0) + c,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let h = self.h.as_slice();
        let l = self.l.as_slice();
        let mut v = self.c;
        for j in 0..d {
            let mut col = 0.0;
            for i in 0..d {
                col += h[j * d + i] * x[i];
            }
            v += x[j] * (col + 2.0 * l[j]);
        }
        v
    }

    /// `E[x' H x + 2 l' x + c]` given mean and second moment.
    pub fn expect(&self, mean: &DMatrix<f64>, second: &DMatrix<f64>) -> f64 {
        self.h.dot(second) + 2.0 * self.l.dot(mean) + self.c
    }

    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        Quadratic { h: &a.h * (1.0 - w) + &b.h * w, l: &a.l * (1.0 - w) + &b.l * w, c: a.c * (1.0 - w) + b.c * w }
    }
}

/// Affine-in-state SDE coefficients and cost rates at one simulation node.
#[derive(Debug, Clone)]
pub struct AffineNode {
    pub drift: DMatrix<f64>,
    pub drift_offset: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    pub diffusion_offset: DMatrix<f64>,
    pub costs: [Quadratic; 3],
}

impl AffineNode {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        let l = |x: &DMatrix<f64>, y: &DMatrix<f64>| x * (1.0 - w) + y * w;
        AffineNode {
            drift: l(&a.drift, &b.drift),
            drift_offset: l(&a.drift_offset, &b.drift_offset),
            diffusion: l(&a.diffusion, &b.diffusion),
            diffusion_offset: l(&a.diffusion_offset, &b.diffusion_offset),
            costs: [
                Quadratic::lerp(&a.costs[0], &b.costs[0], w),
                Quadratic::lerp(&a.costs[1], &b.costs[1], w),
                Quadratic::lerp(&a.costs[2], &b.costs[2], w),
            ],
        }
    }
}

/// `dxi = (M xi + m) dt + (S xi + s) dW` with quadratic running and terminal
/// costs, sampled at every simulation node.
#[derive(Debug, Clone)]
pub struct AffineModel {
    pub grid: TimeGrid,
    pub x0: Vec<f64>,
    pub nodes: Vec<AffineNode>,
    pub terminal: [Quadratic; 3],
}

impl AffineModel {
    pub fn new(grid: TimeGrid, x0: Vec<f64>, nodes: Vec<AffineNode>, terminal: [Quadratic; 3]) -> Result<Self> {
        let d = x0.len();
        if nodes.len() != grid.len() {
            return Err(Error::Shape(format!("{} nodes for {} grid points", nodes.len(), grid.len())));
        }
        for n in &nodes {
            if n.drift.shape() != (d, d) || n.diffusion.shape() != (d, d) || n.drift_offset.shape() != (d, 1) {
                return Err(Error::Shape(format!("affine node does not match state dimension {d}")));
            }
        }
        Ok(AffineModel { grid, x0, nodes, terminal })
    }

    /// Exact expectations of the three cost tallies for the continuous-time
    /// SDE, by RK4 on the mean and second-moment equations (midpoint
    /// coefficients interpolated linearly).
    pub fn expected(&self) -> [f64; 3] {
        let d = self.x0.len();
        let h = self.grid.dt();
        let rhs = |nd: &AffineNode, mu: &DMatrix<f64>, sig: &DMatrix<f64>| {
            let dmu = &nd.drift * mu + &nd.drift_offset;
            let smu = &nd.diffusion * mu;
            let a = &nd.drift * sig + &nd.drift_offset * mu.transpose();
            let ssig = &nd.diffusion * sig * nd.diffusion.transpose()
                + &smu * nd.diffusion_offset.transpose()
                + &nd.diffusion_offset * smu.transpose()
                + &nd.diffusion_offset * nd.diffusion_offset.transpose();
            let dsig = &a + a.transpose() + ssig;
            let di = [0, 1, 2].map(|i| nd.costs[i].expect(mu, sig));
            (dmu, dsig, di)
        };
        let mut mu = DMatrix::from_column_slice(d, 1, &self.x0);
        let mut sig = &mu * mu.transpose();
        let mut acc = [0.0; 3];
        for j in 0..self.grid.steps() {
            let n0 = &self.nodes[j];
            let n1 = &self.nodes[j + 1];
            let nm = AffineNode::lerp(n0, n1, 0.5);
            let (m1, s1, i1) = rhs(n0, &mu, &sig);
            let (m2, s2, i2) = rhs(&nm, &(&mu + &m1 * (0.5 * h)), &(&sig + &s1 * (0.5 * h)));
            let (m3, s3, i3) = rhs(&nm, &(&mu + &m2 * (0.5 * h)), &(&sig + &s2 * (0.5 * h)));
            let (m4, s4, i4) = rhs(n1, &(&mu + &m3 * h), &(&sig + &s3 * h));
            mu += (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (h / 6.0);
            sig += (s1 + s2 * 2.0 + s3 * 2.0 + s4) * (h / 6.0);
            for i in 0..3 {
                acc[i] += h / 6.0 * (i1[i] + 2.0 * i2[i] + 2.0 * i3[i] + i4[i]);
            }
        }
        [0, 1, 2].map(|i| acc[i] + self.terminal[i].expect(&mu, &sig))
    }
}

impl PathModel for AffineModel {
    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn scratch_len(&self) -> usize {
        self.x0.len()
    }

    fn steps(&self) -> usize {
        self.grid.steps()
    }

    fn dt(&self) -> f64 {
        self.grid.dt()
    }

    fn initial(&self, x: &mut [f64]) {
        x.copy_from_slice(&self.x0);
    }

    fn advance(&self, j: usize, stride: usize, dw: f64, x: &mut [f64], scratch: &mut [f64]) -> [f64; 3] {
        let nd = &self.nodes[j];
        let r = [nd.costs[0].eval(x), nd.costs[1].eval(x), nd.costs[2].eval(x)];
        let d = x.len();
        let h = self.grid.dt() * stride as f64;
        let (m, s) = (nd.drift.as_slice(), nd.diffusion.as_slice());
        let (mo, so) = (nd.drift_offset.as_slice(), nd.diffusion_offset.as_slice());
        for i in 0..d {
            let mut a = mo[i];
            let mut b = so[i];
            for k in 0..d {
                a += m[k * d + i] * x[k];
                b += s[k * d + i] * x[k];
            }
            scratch[i] = a * h + b * dw;
        }
        for i in 0..d {
            x[i] += scratch[i];
        }
        r
    }

    fn terminal(&self, x: &[f64]) -> [f64; 3] {
        [self.terminal[0].eval(x), self.terminal[1].eval(x), self.terminal[2].eval(x)]
    }
}

/// An affine map `x -> G x + g`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub gain: DMatrix<f64>,
    pub offset: DMatrix<f64>,
}

impl AffineMap {
    pub fn new(gain: DMatrix<f64>, offset: DMatrix<f64>) -> Self {
        AffineMap { gain, offset }
    }

    pub fn constant(d: usize, offset: DMatrix<f64>) -> Self {
        AffineMap { gain: DMatrix::zeros(offset.nrows(), d), offset }
    }

    /// Stack of `maps` in order.
    pub fn stack(maps: &[&AffineMap]) -> AffineMap {
        let d = maps[0].gain.ncols();
        let rows: usize = maps.iter().map(|m| m.gain.nrows()).sum();
        let mut g = DMatrix::zeros(rows, d);
        let mut o = DMatrix::zeros(rows, 1);
        let mut r = 0;
        for m in maps {
            let k = m.gain.nrows();
            g.view_mut((r, 0), (k, d)).copy_from(&m.gain);
            o.view_mut((r, 0), (k, 1)).copy_from(&m.offset);
            r += k;
        }
        AffineMap { gain: g, offset: o }
    }
}

/// State and controls of the original game as affine maps of a simulated
/// state `xi`.
pub struct GameMaps<'a> {
    pub x: &'a AffineMap,
    pub u1: &'a AffineMap,
    pub u2: &'a AffineMap,
}

impl GameMaps<'_> {
    /// Drift and diffusion of the game state in terms of `xi`.
    pub fn dynamics(&self, c: &Coefficients) -> (AffineMap, AffineMap) {
        let (x, u1, u2) = (self.x, self.u1, self.u2);
        let drift = AffineMap::new(
            &c.a * &x.gain + &c.b1 * &u1.gain + &c.b2 * &u2.gain,
            &c.a * &x.offset + &c.b1 * &u1.offset + &c.b2 * &u2.offset + &c.b,
        );
        let diff = AffineMap::new(
            &c.c * &x.gain + &c.d1 * &u1.gain + &c.d2 * &u2.gain,
            &c.c * &x.offset + &c.d1 * &u1.offset + &c.d2 * &u2.offset + &c.sigma,
        );
        (drift, diff)
    }

    /// Running costs of both players as quadratics in `xi`.
    pub fn costs(&self, c: &Coefficients) -> [Quadratic; 2] {
        let w = AffineMap::stack(&[self.x, self.u1, self.u2]);
        [0, 1].map(|i| {
            let p = &c.players[i];
            Quadratic::pullback(&p.joint_matrix(), &p.joint_linear(), 0.0, &w.gain, &w.offset)
        })
    }

    /// Terminal costs of both players as quadratics in `xi`.
    pub fn terminal(&self, spec: &GameSpec) -> [Quadratic; 2] {
        [&spec.player1, &spec.player2].map(|p| {
            let g = DMatrix::from_column_slice(p.g_lin.len(), 1, p.g_lin.as_slice());
            Quadratic::pullback(&p.g_mat, &g, 0.0, &self.x.gain, &self.x.offset)
        })
    }
}

/// Integrand of the follower value formula as a quadratic in `xi`, given
/// `eta1`, `zeta1` and `u2` as affine maps of `xi`.
pub fn follower_rate_form(c: &Coefficients, p1: &DMatrix<f64>, eta1: &AffineMap, zeta1: &AffineMap, u2: &AffineMap) -> Quadratic {
    let n = c.a.nrows();
    let m2 = c.b2.ncols();
    let w = &c.players[0];
    let rp = pinv(&rhat11(c, p1), PINV_REL_TOL).pinv;
    let r12 = &w.r12 + c.d1.transpose() * p1 * &c.d2;
    let k = 2 * n + m2;
    // w = (eta1, zeta1, u2); v = L w + l0 is the follower's stationarity term.
    let mut l = DMatrix::zeros(r12.nrows(), k);
    l.view_mut((0, 0), (r12.nrows(), n)).copy_from(&c.b1.transpose());
    l.view_mut((0, n), (r12.nrows(), n)).copy_from(&c.d1.transpose());
    l.view_mut((0, 2 * n), r12.shape()).copy_from(&r12);
    let l0 = c.d1.transpose() * p1 * &c.sigma + &w.rho1;
    let mut wm = DMatrix::zeros(k, k);
    wm.view_mut((0, 2 * n), (n, m2)).copy_from(&c.b2);
    wm.view_mut((2 * n, 0), (m2, n)).copy_from(&c.b2.transpose());
    wm.view_mut((n, 2 * n), (n, m2)).copy_from(&c.d2);
    wm.view_mut((2 * n, n), (m2, n)).copy_from(&c.d2.transpose());
    wm.view_mut((2 * n, 2 * n), (m2, m2)).copy_from(&(&w.r22 + c.d2.transpose() * p1 * &c.d2));
    wm -= l.transpose() * &rp * &l;
    let mut lin = DMatrix::zeros(k, 1);
    lin.view_mut((0, 0), (n, 1)).copy_from(&c.b);
    lin.view_mut((n, 0), (n, 1)).copy_from(&c.sigma);
    lin.view_mut((2 * n, 0), (m2, 1)).copy_from(&(&w.rho2 + c.d2.transpose() * p1 * &c.sigma));
    lin -= l.transpose() * &rp * &l0;
    let c0 = (p1 * &c.sigma).dot(&c.sigma) - (l0.transpose() * &rp * &l0)[(0, 0)];
    let stacked = AffineMap::stack(&[eta1, zeta1, u2]);
    Quadratic::pullback(&wm, &lin, c0, &stacked.gain, &stacked.offset)
}

fn select(rows: std::ops::Range<usize>, m: &DMatrix<f64>) -> DMatrix<f64> {
    m.rows(rows.start, rows.len()).into_owned()
}

/// Maps of the closed loop at one time, in the augmented state `X`.
pub struct ClosedLoopMaps {
    pub x: AffineMap,
    pub u1: AffineMap,
    pub u2: AffineMap,
    pub eta1: AffineMap,
    pub zeta1: AffineMap,
}

impl ClosedLoopMaps {
    pub fn new(node: &ClosedLoopNode, n: usize) -> Self {
        let mut sx = DMatrix::zeros(n, 2 * n);
        sx.view_mut((0, 0), (n, n)).fill_with_identity();
        ClosedLoopMaps {
            x: AffineMap::new(sx, DMatrix::zeros(n, 1)),
            u1: AffineMap::new(node.u1_gain.clone(), node.u1_offset.clone()),
            u2: AffineMap::new(node.u2_gain.clone(), node.u2_offset.clone()),
            eta1: AffineMap::new(select(n..2 * n, &node.y_gain), select(n..2 * n, &node.y_offset)),
            zeta1: AffineMap::new(select(n..2 * n, &node.z_gain), select(n..2 * n, &node.z_offset)),
        }
    }
}

/// The closed-loop augmented SDE as an affine model on `grid.refined(substeps)`,
/// with tallies `(J1, J2, V1)`: the third is the follower value formula, whose
/// terminal constant carries `<P1(0) x, x> + 2 <eta1(0), x>`.
pub fn closed_loop_model(eq: &Equilibrium, substeps: usize) -> Result<AffineModel> {
    let spec = eq.spec();
    let n = spec.dims.n;
    let fine = eq.grid.refined(substeps);
    let mut nodes = Vec::with_capacity(fine.len());
    for t in fine.times() {
        let node = eq.closed_loop_at(t)?;
        let c = spec.coefficients_at(t)?;
        let maps = ClosedLoopMaps::new(&node, n);
        let [j1, j2] = GameMaps { x: &maps.x, u1: &maps.u1, u2: &maps.u2 }.costs(&c);
        let v1 = follower_rate_form(&c, &eq.follower_fine.p1.at(t)?, &maps.eta1, &maps.zeta1, &maps.u2);
        nodes.push(AffineNode {
            drift: node.drift,
            drift_offset: node.drift_offset,
            diffusion: node.diffusion,
            diffusion_offset: node.diffusion_offset,
            costs: [j1, j2, v1],
        });
    }
    let x0 = eq.aug.x0.clone();
    let m0 = ClosedLoopMaps::new(&eq.closed_loop[0], n);
    let x = DMatrix::from_column_slice(n, 1, spec.x0.as_slice());
    let eta1_0 = &m0.eta1.gain * &x0 + &m0.eta1.offset;
    let v1_0 = (x.transpose() * eq.follower.p1.get(0) * &x)[(0, 0)] + 2.0 * eta1_0.dot(&x);
    let [g1, g2] = GameMaps { x: &m0.x, u1: &m0.u1, u2: &m0.u2 }.terminal(spec);
    AffineModel::new(fine, x0.as_slice().to_vec(), nodes, [g1, g2, Quadratic::constant(2 * n, v1_0)])
}

/// Simulate the closed-loop augmented SDE under the equilibrium policy.
pub fn simulate_closed_loop(eq: &Equilibrium, cfg: &SimConfig) -> Result<SimResult> {
    let model = closed_loop_model(eq, cfg.substeps)?;
    run_paths(&model, cfg)
}

/// Feedback strategies for the original game: controls may depend on the
/// state and on an auxiliary process the strategy evolves itself.
pub trait Strategy: Sync {
    fn aux_dim(&self) -> usize {
        0
    }

    fn aux_initial(&self, aux: &mut [f64]) {
        aux.fill(0.0);
    }

    /// Controls at simulation node `j`.
    fn controls(&self, j: usize, t: f64, x: &[f64], aux: &[f64], u1: &mut [f64], u2: &mut [f64]);

    /// Advance the auxiliary process from node `j` given the pre-step state.
    fn aux_step(&self, _j: usize, _h: f64, _dw: f64, _x: &[f64], _aux: &mut [f64]) {}
}

/// Fixed affine state feedback `u_i = K_i(t) x + k_i(t)` without auxiliary
/// state, sampled at the simulation nodes.
#[derive(Debug, Clone)]
pub struct AffineFeedback {
    pub u1: Vec<AffineMap>,
    pub u2: Vec<AffineMap>,
}

fn apply(m: &AffineMap, x: &[f64], out: &mut [f64]) {
    let (r, c) = m.gain.shape();
    let g = m.gain.as_slice();
    for i in 0..r {
        let mut v = m.offset[i];
        for k in 0..c {
            v += g[k * r + i] * x[k];
        }
        out[i] = v;
    }
}

impl Strategy for AffineFeedback {
    fn controls(&self, j: usize, _t: f64, x: &[f64], _aux: &[f64], u1: &mut [f64], u2: &mut [f64]) {
        apply(&self.u1[j], x, u1);
        apply(&self.u2[j], x, u2);
    }
}

/// Equilibrium play in the original game: the auxiliary process is `p2`,
/// evolved with its closed-loop dynamics, and the controls are the policy
/// maps of `X = (x, p2)`.
#[derive(Debug, Clone)]
pub struct EquilibriumStrategy {
    n: usize,
    u1: Vec<AffineMap>,
    u2: Vec<AffineMap>,
    p2_drift: Vec<AffineMap>,
    p2_diffusion: Vec<AffineMap>,
}

impl EquilibriumStrategy {
    pub fn new(eq: &Equilibrium, substeps: usize) -> Result<Self> {
        let n = eq.spec().dims.n;
        let fine = eq.grid.refined(substeps);
        let mut s = EquilibriumStrategy { n, u1: vec![], u2: vec![], p2_drift: vec![], p2_diffusion: vec![] };
        for t in fine.times() {
            let c = eq.closed_loop_at(t)?;
            s.u1.push(AffineMap::new(c.u1_gain, c.u1_offset));
            s.u2.push(AffineMap::new(c.u2_gain, c.u2_offset));
            s.p2_drift.push(AffineMap::new(select(n..2 * n, &c.drift), select(n..2 * n, &c.drift_offset)));
            s.p2_diffusion.push(AffineMap::new(select(n..2 * n, &c.diffusion), select(n..2 * n, &c.diffusion_offset)));
        }
        Ok(s)
    }
}

impl EquilibriumStrategy {
    fn augmented(&self, x: &[f64], aux: &[f64], buf: &mut [f64; 16]) -> usize {
        let n = self.n;
        buf[..n].copy_from_slice(x);
        buf[n..2 * n].copy_from_slice(aux);
        2 * n
    }
}

impl Strategy for EquilibriumStrategy {
    fn aux_dim(&self) -> usize {
        self.n
    }

    fn controls(&self, j: usize, _t: f64, x: &[f64], aux: &[f64], u1: &mut [f64], u2: &mut [f64]) {
        if 2 * self.n <= 16 {
            let mut buf = [0.0; 16];
            let k = self.augmented(x, aux, &mut buf);
            apply(&self.u1[j], &buf[..k], u1);
            apply(&self.u2[j], &buf[..k], u2);
        } else {
            let xa: Vec<f64> = x.iter().chain(aux).copied().collect();
            apply(&self.u1[j], &xa, u1);
            apply(&self.u2[j], &xa, u2);
        }
    }

    fn aux_step(&self, j: usize, h: f64, dw: f64, x: &[f64], aux: &mut [f64]) {
        let xa: Vec<f64> = x.iter().chain(aux.iter()).copied().collect();
        let mut a = vec![0.0; self.n];
        let mut b = vec![0.0; self.n];
        apply(&self.p2_drift[j], &xa, &mut a);
        apply(&self.p2_diffusion[j], &xa, &mut b);
        for i in 0..self.n {
            aux[i] += a[i] * h + b[i] * dw;
        }
    }
}

/// The original n-dimensional game under a [`Strategy`]. Simulated state is
/// `(x, aux)`; tallies are `(J1, J2, 0)`.
pub struct RawModel<'a, S: Strategy> {
    spec: &'a GameSpec,
    strategy: &'a S,
    grid: TimeGrid,
    coefs: Vec<Coefficients>,
    joint: Vec<[(DMatrix<f64>, DMatrix<f64>); 2]>,
}

impl<'a, S: Strategy> RawModel<'a, S> {
    pub fn new(spec: &'a GameSpec, strategy: &'a S, grid: TimeGrid) -> Result<Self> {
        let coefs = grid.times().map(|t| spec.coefficients_at(t)).collect::<Result<Vec<_>>>()?;
        let joint = coefs.iter().map(|c| [0, 1].map(|i| (c.players[i].joint_matrix(), c.players[i].joint_linear()))).collect();
        Ok(RawModel { spec, strategy, grid, coefs, joint })
    }
}

fn quad(w: &DMatrix<f64>, l: &DMatrix<f64>, v: &[f64]) -> f64 {
    let d = v.len();
    let ws = w.as_slice();
    let mut s = 0.0;
    for j in 0..d {
        let mut col = 0.0;
        for i in 0..d {
            col += ws[j * d + i] * v[i];
        }
        s += v[j] * (col + 2.0 * l[j]);
    }
    s
}

impl<S: Strategy> PathModel for RawModel<'_, S> {
    fn dim(&self) -> usize {
        self.spec.dims.n + self.strategy.aux_dim()
    }

    fn scratch_len(&self) -> usize {
        let d = self.spec.dims;
        2 * (d.n + d.m1 + d.m2) + d.n
    }

    fn steps(&self) -> usize {
        self.grid.steps()
    }

    fn dt(&self) -> f64 {
        self.grid.dt()
    }

    fn initial(&self, x: &mut [f64]) {
        let n = self.spec.dims.n;
        x[..n].copy_from_slice(self.spec.x0.as_slice());
        self.strategy.aux_initial(&mut x[n..]);
    }

    fn advance(&self, j: usize, stride: usize, dw: f64, state: &mut [f64], scratch: &mut [f64]) -> [f64; 3] {
        let d = self.spec.dims;
        let (n, m1, m2) = (d.n, d.m1, d.m2);
        let k = n + m1 + m2;
        let (w, rest) = scratch.split_at_mut(k);
        let (dx, _) = rest.split_at_mut(n);
        let (x, aux) = state.split_at_mut(n);
        w[..n].copy_from_slice(x);
        {
            let (_, u) = w.split_at_mut(n);
            let (u1, u2) = u.split_at_mut(m1);
            self.strategy.controls(j, self.grid.t(j), x, aux, u1, u2);
        }
        let [(w1, l1), (w2, l2)] = &self.joint[j];
        let r = [quad(w1, l1, w), quad(w2, l2, w), 0.0];
        let c = &self.coefs[j];
        let h = self.grid.dt() * stride as f64;
        for i in 0..n {
            let mut a = c.b[i];
            let mut s = c.sigma[i];
            for q in 0..n {
                a += c.a[(i, q)] * w[q];
                s += c.c[(i, q)] * w[q];
            }
            for q in 0..m1 {
                a += c.b1[(i, q)] * w[n + q];
                s += c.d1[(i, q)] * w[n + q];
            }
            for q in 0..m2 {
                a += c.b2[(i, q)] * w[n + m1 + q];
                s += c.d2[(i, q)] * w[n + m1 + q];
            }
            dx[i] = a * h + s * dw;
        }
        self.strategy.aux_step(j, h, dw, x, aux);
        for i in 0..n {
            x[i] += dx[i];
        }
        r
    }

    fn terminal(&self, state: &[f64]) -> [f64; 3] {
        let n = self.spec.dims.n;
        let x = &state[..n];
        let p = [&self.spec.player1, &self.spec.player2];
        let v = p.map(|p| {
            let g = DMatrix::from_column_slice(n, 1, p.g_lin.as_slice());
            quad(&p.g_mat, &g, x)
        });
        [v[0], v[1], 0.0]
    }
}

/// Simulate the original state equation under `strategy` on
/// `grid.refined(cfg.substeps)`.
pub fn simulate_raw<S: Strategy>(spec: &GameSpec, strategy: &S, cfg: &SimConfig, grid: &TimeGrid) -> Result<SimResult> {
    let model = RawModel::new(spec, strategy, grid.refined(cfg.substeps))?;
    run_paths(&model, cfg)
}

/// Cost estimates from stored ensembles (path-major, one row per grid node):
/// left-Riemann quadrature of the running costs plus terminal costs.
pub fn estimate_costs(
    spec: &GameSpec,
    grid: &TimeGrid,
    x: &Ensemble,
    u1: &Ensemble,
    u2: &Ensemble,
) -> Result<[Estimate; 2]> {
    let d = spec.dims;
    for (e, dim, name) in [(x, d.n, "x"), (u1, d.m1, "u1"), (u2, d.m2, "u2")] {
        if e.dim != dim || e.grid != *grid || e.paths != x.paths || e.data.len() != e.paths * grid.len() * dim {
            return Err(Error::Shape(format!("{name} ensemble does not match the grid and dimensions")));
        }
    }
    let coefs = grid.times().map(|t| spec.coefficients_at(t)).collect::<Result<Vec<_>>>()?;
    let joint: Vec<_> = coefs.iter().map(|c| [0, 1].map(|i| (c.players[i].joint_matrix(), c.players[i].joint_linear()))).collect();
    let h = grid.dt();
    let mut totals = [Vec::with_capacity(x.paths), Vec::with_capacity(x.paths)];
    let mut w = vec![0.0; d.n + d.m1 + d.m2];
    for p in 0..x.paths {
        let mut acc = [0.0; 2];
        for k in 0..grid.steps() {
            w[..d.n].copy_from_slice(x.get(p, k));
            w[d.n..d.n + d.m1].copy_from_slice(u1.get(p, k));
            w[d.n + d.m1..].copy_from_slice(u2.get(p, k));
            for i in 0..2 {
                acc[i] += h * quad(&joint[k][i].0, &joint[k][i].1, &w);
            }
        }
        let xt = x.get(p, grid.steps());
        for (i, pl) in [&spec.player1, &spec.player2].into_iter().enumerate() {
            let g = DMatrix::from_column_slice(d.n, 1, pl.g_lin.as_slice());
            totals[i].push(acc[i] + quad(&pl.g_mat, &g, xt));
        }
    }
    Ok([Estimate::from_samples(&totals[0]), Estimate::from_samples(&totals[1])])
}

/// Trajectory dump: `t, path_id, X..., u1..., u2...` for every stored path
/// of a closed-loop run.
pub fn write_trajectories(eq: &Equilibrium, ens: &Ensemble, out: &mut impl std::io::Write) -> Result<()> {
    let d = eq.spec().dims;
    let mut head = vec!["t".to_string(), "path_id".to_string()];
    head.extend((1..=ens.dim).map(|i| format!("X{i}")));
    head.extend((1..=d.m1).map(|i| format!("u1_{i}")));
    head.extend((1..=d.m2).map(|i| format!("u2_{i}")));
    writeln!(out, "{}", head.join(","))?;
    for k in 0..ens.grid.len() {
        let t = ens.grid.t(k);
        let node = eq.closed_loop_at(t)?;
        for p in 0..ens.paths {
            let xs = DMatrix::from_column_slice(ens.dim, 1, ens.get(p, k));
            let u1 = &node.u1_gain * &xs + &node.u1_offset;
            let u2 = &node.u2_gain * &xs + &node.u2_offset;
            let mut row = vec![format!("{t:?}"), p.to_string()];
            row.extend(xs.iter().chain(u1.iter()).chain(u2.iter()).map(|v| format!("{v:?}")));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leader::solve_equilibrium;
    use crate::model::{CoefficientPath, Dims};
    use crate::presets;
    use approx::assert_relative_eq;

    fn constant_model(a: f64, beta: f64, x0: f64, steps: usize) -> AffineModel {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let node = AffineNode {
            drift: DMatrix::from_element(1, 1, a),
            drift_offset: DMatrix::zeros(1, 1),
            diffusion: DMatrix::from_element(1, 1, beta),
            diffusion_offset: DMatrix::zeros(1, 1),
            costs: [Quadratic::zero(1), Quadratic::zero(1), Quadratic::zero(1)],
        };
        let mut id = Quadratic::zero(1);
        id.l[0] = 0.5;
        AffineModel::new(grid, vec![x0], vec![node; steps + 1], [id, Quadratic::zero(1), Quadratic::zero(1)]).unwrap()
    }

    #[test]
    fn estimate_matches_hand_computation() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert_relative_eq!(e.se, (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-15);
        assert_eq!(Estimate::from_samples(&[7.0]).se, 0.0);
    }

    #[test]
    fn degenerate_model_is_deterministic() {
        // dx = 0, J2 = <G x, x> + T <Q x, x>
        let mut spec = GameSpec::zeros(Dims::new(1, 1, 1), 1.0);
        spec.x0[0] = 2.0;
        spec.player2.q = CoefficientPath::scalar(3.0);
        spec.player2.g_mat[(0, 0)] = 0.5;
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let zero = AffineFeedback {
            u1: vec![AffineMap::constant(1, DMatrix::zeros(1, 1)); 11],
            u2: vec![AffineMap::constant(1, DMatrix::zeros(1, 1)); 11],
        };
        let r = simulate_raw(&spec, &zero, &SimConfig::new(50, 1, 1), &grid).unwrap();
        assert_relative_eq!(r.j2.mean, 0.5 * 4.0 + 12.0, epsilon = 1e-12);
        assert_eq!(r.j2.se, 0.0);
        assert_eq!(r.j1.mean, 0.0);
    }

    #[test]
    fn geometric_mean_weak_convergence() {
        // dX = a X dt + b X dW: E X(1) = e^a.
        let m = constant_model(0.5, 0.3, 1.0, 200);
        let mut cfg = SimConfig::new(20_000, 1, 9);
        cfg.richardson = true;
        let r = run_paths(&m, &cfg).unwrap();
        let exact = 0.5f64.exp();
        assert!((r.j1.mean - exact).abs() < 3.0 * r.j1.se + 0.01);
        let ex = r.extrapolated.unwrap()[0];
        assert!((ex.mean - exact).abs() < 4.0 * ex.se + 1e-3);
        assert_relative_eq!(m.expected()[0], exact, epsilon = 1e-9);
    }

    #[test]
    fn results_ignore_thread_count() {
        let m = constant_model(0.2, 0.5, 1.0, 50);
        let mut cfg = SimConfig::new(1000, 1, 42);
        cfg.store = Some(TrajectoryStore { paths: 3, stride: 5 });
        cfg.moments_stride = Some(10);
        let run = |t: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| run_paths(&m, &cfg).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.j1, b.j1);
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.mean_path, b.mean_path);
        assert_eq!(a.trajectories.unwrap().grid.steps(), 10);
    }

    #[test]
    fn divergence_reports_path() {
        let m = constant_model(1e308, 0.0, 1.0, 10);
        let err = run_paths(&m, &SimConfig::new(3, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::PathDiverged { path: 0, .. }));
    }

    #[test]
    fn pullback_agrees_with_direct_evaluation() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let lin = DMatrix::from_column_slice(2, 1, &[0.3, -0.1]);
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, -1.0, 1.0, 0.0]);
        let g0 = DMatrix::from_column_slice(2, 1, &[0.2, 0.4]);
        let q = Quadratic::pullback(&w, &lin, 1.5, &g, &g0);
        let x = [0.3, -0.7, 1.1];
        let wv = &g * DMatrix::from_column_slice(3, 1, &x) + &g0;
        let direct = (wv.transpose() * &w * &wv)[(0, 0)] + 2.0 * lin.dot(&wv) + 1.5;
        assert_relative_eq!(q.eval(&x), direct, epsilon = 1e-14);
    }

    #[test]
    fn cross_terms_in_cost_quadrature() {
        // n = m1 = m2 = 1, x = u1 = u2 = 1, all weights 1: running 9 + 6.
        let mut spec = GameSpec::zeros(Dims::new(1, 1, 1), 1.0);
        for p in [&mut spec.player1, &mut spec.player2] {
            for c in [&mut p.q, &mut p.s1, &mut p.s2, &mut p.r11, &mut p.r12, &mut p.r21, &mut p.r22, &mut p.q_lin, &mut p.rho1, &mut p.rho2] {
                *c = CoefficientPath::scalar(1.0);
            }
            p.g_mat[(0, 0)] = 1.0;
            p.g_lin[0] = 0.25;
        }
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let ones = |dim| Ensemble { grid, paths: 2, dim, data: vec![1.0; 2 * 5 * dim] };
        let [j1, j2] = estimate_costs(&spec, &grid, &ones(1), &ones(1), &ones(1)).unwrap();
        assert_relative_eq!(j1.mean, 15.0 + 1.0 + 0.5, epsilon = 1e-12);
        assert_relative_eq!(j2.mean, j1.mean);
        let bad = Ensemble { grid, paths: 2, dim: 2, data: vec![0.0; 20] };
        assert!(estimate_costs(&spec, &grid, &bad, &ones(1), &ones(1)).is_err());
    }

    #[test]
    fn raw_replay_matches_closed_loop() {
        let spec = presets::rd_competition(&presets::RdParams::default());
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let eq = solve_equilibrium(&spec, &grid).unwrap();
        let mut cfg = SimConfig::new(300, 2, 5);
        cfg.moments_stride = Some(10);
        let a = simulate_closed_loop(&eq, &cfg).unwrap();
        let strat = EquilibriumStrategy::new(&eq, 2).unwrap();
        let b = simulate_raw(&spec, &strat, &cfg, &grid).unwrap();
        for (x, y) in a.samples.fine.iter().zip(&b.samples.fine) {
            assert_relative_eq!(x[0], y[0], max_relative = 1e-12);
            assert_relative_eq!(x[1], y[1], max_relative = 1e-12);
        }
        let (ma, mb) = (a.mean_path.unwrap(), b.mean_path.unwrap());
        for k in 0..ma.len() {
            assert_relative_eq!(ma.get(k)[0], mb.get(k)[0], max_relative = 1e-12);
            assert_relative_eq!(ma.get(k)[1], mb.get(k)[1], max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_noise_monte_carlo_matches_moments() {
        let mut p = presets::RdParams::default();
        p.beta2 = 0.0;
        let spec = presets::rd_competition(&p);
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let eq = solve_equilibrium(&spec, &grid).unwrap();
        let model = closed_loop_model(&eq, 1).unwrap();
        let mut cfg = SimConfig::new(7, 1, 3);
        cfg.richardson = true;
        let r = run_paths(&model, &cfg).unwrap();
        assert_eq!(r.j2.se, 0.0);
        let exact = model.expected();
        assert!((r.extrapolated.unwrap()[1].mean - exact[1]).abs() < 1e-5);
        // second order: midpoint coefficients are interpolated
        assert_relative_eq!(exact[1], eq.leader.p.get(0)[(0, 0)], epsilon = 1e-6);
    }
}
