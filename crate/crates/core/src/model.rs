//! Problem data: dimensions, time grids, coefficient paths and the full game
//! specification, plus validation and JSON loading.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
}

impl Dims {
    pub fn new(n: usize, m1: usize, m2: usize) -> Self {
        Dims { n, m1, m2 }
    }
}

/// Uniform grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

// Relative distance under which an interpolation point is treated as a node.
const SNAP: f64 = 1e-9;

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Validation("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.t(k))
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid { horizon: self.horizon, steps: self.steps * factor.max(1) }
    }

    /// Bracketing node and weight for linear interpolation: the value at `t`
    /// is `(1 - w) v[i] + w v[i + 1]`, with `w == 0` exactly when `t` sits on
    /// a node (up to round-off in how `t` was computed).
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Domain { t, horizon: self.horizon });
        }
        let x = (t / self.horizon * self.steps as f64).clamp(0.0, self.steps as f64);
        let nearest = x.round();
        if (x - nearest).abs() <= SNAP * x.max(1.0) {
            return Ok((nearest as usize, 0.0));
        }
        let i = (x.floor() as usize).min(self.steps - 1);
        Ok((i, x - i as f64))
    }
}

/// A deterministic coefficient: constant, or sampled on a uniform grid over
/// `[0, T]` and linearly interpolated in between.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientPath {
    Constant(DMatrix<f64>),
    Sampled(Vec<DMatrix<f64>>),
}

impl CoefficientPath {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CoefficientPath::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn scalar(v: f64) -> Self {
        CoefficientPath::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn vector(v: &[f64]) -> Self {
        CoefficientPath::Constant(DMatrix::from_column_slice(v.len(), 1, v))
    }

    pub fn matrix(rows: usize, cols: usize, row_major: &[f64]) -> Self {
        CoefficientPath::Constant(DMatrix::from_row_slice(rows, cols, row_major))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefficientPath::Constant(m) => m.shape(),
            CoefficientPath::Sampled(v) => v.first().map_or((0, 0), |m| m.shape()),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientPath::Constant(_))
    }

    pub fn node_count(&self) -> Option<usize> {
        match self {
            CoefficientPath::Constant(_) => None,
            CoefficientPath::Sampled(v) => Some(v.len()),
        }
    }

    /// Value at `t` on `[0, horizon]`; sampled paths use their own node count.
    pub fn at(&self, t: f64, horizon: f64) -> Result<DMatrix<f64>> {
        match self {
            CoefficientPath::Constant(m) => {
                let tol = 1e-12 * horizon.max(1.0);
                if !(t >= -tol && t <= horizon + tol) {
                    return Err(Error::Domain { t, horizon });
                }
                Ok(m.clone())
            }
            CoefficientPath::Sampled(v) => {
                if v.len() < 2 {
                    return Err(Error::Shape("sampled coefficient needs at least two nodes".into()));
                }
                let grid = TimeGrid::new(horizon, v.len() - 1)?;
                let (i, w) = grid.locate(t)?;
                if w == 0.0 {
                    Ok(v[i].clone())
                } else {
                    Ok(&v[i] * (1.0 - w) + &v[i + 1] * w)
                }
            }
        }
    }

    fn for_each_matrix(&self, mut f: impl FnMut(&DMatrix<f64>)) {
        match self {
            CoefficientPath::Constant(m) => f(m),
            CoefficientPath::Sampled(v) => v.iter().for_each(f),
        }
    }
}

/// Evaluate `path` at `t`; sampled paths must live on `grid`.
pub fn eval_coefficient(path: &CoefficientPath, t: f64, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    if let Some(count) = path.node_count() {
        if count != grid.len() {
            return Err(Error::Shape(format!(
                "sampled coefficient has {count} nodes, grid has {}",
                grid.len()
            )));
        }
    }
    path.at(t, grid.horizon())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub a: CoefficientPath,
    pub b1: CoefficientPath,
    pub b2: CoefficientPath,
    pub c: CoefficientPath,
    pub d1: CoefficientPath,
    pub d2: CoefficientPath,
    pub b: CoefficientPath,
    pub sigma: CoefficientPath,
}

/// Weights of one player's cost
/// `E{ int [<Qx,x> + 2<S1 x,u1> + 2<S2 x,u2> + <R11 u1,u1> + <R12 u2,u1> + <R21 u1,u2>
///  + <R22 u2,u2> + 2<q,x> + 2<rho1,u1> + 2<rho2,u2>] + <G x(T),x(T)> + 2<g,x(T)> }`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerCost {
    pub q: CoefficientPath,
    pub s1: CoefficientPath,
    pub s2: CoefficientPath,
    pub r11: CoefficientPath,
    pub r12: CoefficientPath,
    pub r21: CoefficientPath,
    pub r22: CoefficientPath,
    pub q_lin: CoefficientPath,
    pub rho1: CoefficientPath,
    pub rho2: CoefficientPath,
    pub g_mat: DMatrix<f64>,
    pub g_lin: DVector<f64>,
}

impl PlayerCost {
    pub fn zeros(d: Dims) -> Self {
        let z = CoefficientPath::zeros;
        PlayerCost {
            q: z(d.n, d.n),
            s1: z(d.m1, d.n),
            s2: z(d.m2, d.n),
            r11: z(d.m1, d.m1),
            r12: z(d.m1, d.m2),
            r21: z(d.m2, d.m1),
            r22: z(d.m2, d.m2),
            q_lin: z(d.n, 1),
            rho1: z(d.m1, 1),
            rho2: z(d.m2, 1),
            g_mat: DMatrix::zeros(d.n, d.n),
            g_lin: DVector::zeros(d.n),
        }
    }

    fn paths(&self) -> [(&'static str, &CoefficientPath); 10] {
        [
            ("Q", &self.q),
            ("S1", &self.s1),
            ("S2", &self.s2),
            ("R11", &self.r11),
            ("R12", &self.r12),
            ("R21", &self.r21),
            ("R22", &self.r22),
            ("q", &self.q_lin),
            ("rho1", &self.rho1),
            ("rho2", &self.rho2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub horizon: f64,
    pub dims: Dims,
    pub x0: DVector<f64>,
    pub dynamics: Dynamics,
    pub player1: PlayerCost,
    pub player2: PlayerCost,
}

/// All coefficients frozen at one time instant. Vectors are stored as
/// single-column matrices.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub players: [Weights; 2],
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub q: DMatrix<f64>,
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
    pub r11: DMatrix<f64>,
    pub r12: DMatrix<f64>,
    pub r21: DMatrix<f64>,
    pub r22: DMatrix<f64>,
    pub q_lin: DMatrix<f64>,
    pub rho1: DMatrix<f64>,
    pub rho2: DMatrix<f64>,
}

impl Weights {
    /// Symmetric weight of the running cost in `w = (x, u1, u2)`.
    pub fn joint_matrix(&self) -> DMatrix<f64> {
        let (n, m1, m2) = (self.q.nrows(), self.r11.nrows(), self.r22.nrows());
        let mut w = DMatrix::zeros(n + m1 + m2, n + m1 + m2);
        w.view_mut((0, 0), (n, n)).copy_from(&self.q);
        w.view_mut((n, 0), (m1, n)).copy_from(&self.s1);
        w.view_mut((0, n), (n, m1)).copy_from(&self.s1.transpose());
        w.view_mut((n + m1, 0), (m2, n)).copy_from(&self.s2);
        w.view_mut((0, n + m1), (n, m2)).copy_from(&self.s2.transpose());
        w.view_mut((n, n), (m1, m1)).copy_from(&self.r11);
        w.view_mut((n, n + m1), (m1, m2)).copy_from(&self.r12);
        w.view_mut((n + m1, n), (m2, m1)).copy_from(&self.r21);
        w.view_mut((n + m1, n + m1), (m2, m2)).copy_from(&self.r22);
        w
    }

    /// Linear term `(q, rho1, rho2)` matching [`Weights::joint_matrix`].
    pub fn joint_linear(&self) -> DMatrix<f64> {
        let (n, m1, m2) = (self.q.nrows(), self.r11.nrows(), self.r22.nrows());
        let mut l = DMatrix::zeros(n + m1 + m2, 1);
        l.view_mut((0, 0), (n, 1)).copy_from(&self.q_lin);
        l.view_mut((n, 0), (m1, 1)).copy_from(&self.rho1);
        l.view_mut((n + m1, 0), (m2, 1)).copy_from(&self.rho2);
        l
    }
}

impl GameSpec {
    /// Zero game of the given size: every coefficient zero, `x0 = 0`.
    pub fn zeros(dims: Dims, horizon: f64) -> Self {
        let z = CoefficientPath::zeros;
        let (n, m1, m2) = (dims.n, dims.m1, dims.m2);
        GameSpec {
            horizon,
            dims,
            x0: DVector::zeros(n),
            dynamics: Dynamics {
                a: z(n, n),
                b1: z(n, m1),
                b2: z(n, m2),
                c: z(n, n),
                d1: z(n, m1),
                d2: z(n, m2),
                b: z(n, 1),
                sigma: z(n, 1),
            },
            player1: PlayerCost::zeros(dims),
            player2: PlayerCost::zeros(dims),
        }
    }

    pub fn player(&self, i: usize) -> &PlayerCost {
        if i == 1 {
            &self.player1
        } else {
            &self.player2
        }
    }

    fn dynamics_paths(&self) -> [(&'static str, &CoefficientPath); 8] {
        let d = &self.dynamics;
        [
            ("A", &d.a),
            ("B1", &d.b1),
            ("B2", &d.b2),
            ("C", &d.c),
            ("D1", &d.d1),
            ("D2", &d.d2),
            ("b", &d.b),
            ("sigma", &d.sigma),
        ]
    }

    fn all_paths(&self) -> Vec<(String, &CoefficientPath)> {
        let mut out: Vec<(String, &CoefficientPath)> =
            self.dynamics_paths().into_iter().map(|(k, p)| (k.to_string(), p)).collect();
        for (i, pl) in [(1, &self.player1), (2, &self.player2)] {
            out.extend(pl.paths().into_iter().map(|(k, p)| (format!("player{i}.{k}"), p)));
        }
        out
    }

    pub fn is_constant(&self) -> bool {
        self.all_paths().iter().all(|(_, p)| p.is_constant())
    }

    /// Common node count of the sampled coefficients, if any are sampled.
    pub fn sample_count(&self) -> Option<usize> {
        self.all_paths().iter().find_map(|(_, p)| p.node_count())
    }

    pub fn coefficients_at(&self, t: f64) -> Result<Coefficients> {
        let h = self.horizon;
        let d = &self.dynamics;
        let weights = |p: &PlayerCost| -> Result<Weights> {
            Ok(Weights {
                q: p.q.at(t, h)?,
                s1: p.s1.at(t, h)?,
                s2: p.s2.at(t, h)?,
                r11: p.r11.at(t, h)?,
                r12: p.r12.at(t, h)?,
                r21: p.r21.at(t, h)?,
                r22: p.r22.at(t, h)?,
                q_lin: p.q_lin.at(t, h)?,
                rho1: p.rho1.at(t, h)?,
                rho2: p.rho2.at(t, h)?,
            })
        };
        Ok(Coefficients {
            a: d.a.at(t, h)?,
            b1: d.b1.at(t, h)?,
            b2: d.b2.at(t, h)?,
            c: d.c.at(t, h)?,
            d1: d.d1.at(t, h)?,
            d2: d.d2.at(t, h)?,
            b: d.b.at(t, h)?,
            sigma: d.sigma.at(t, h)?,
            players: [weights(&self.player1)?, weights(&self.player2)?],
        })
    }

    /// True when every driver, offset and linear cost term vanishes.
    pub fn homogeneity_violation(&self) -> Option<&'static str> {
        let zero = |p: &CoefficientPath| {
            let mut z = true;
            p.for_each_matrix(|m| z &= m.iter().all(|v| *v == 0.0));
            z
        };
        let d = &self.dynamics;
        let checks: [(&'static str, bool); 10] = [
            ("b", zero(&d.b)),
            ("sigma", zero(&d.sigma)),
            ("q1", zero(&self.player1.q_lin)),
            ("q2", zero(&self.player2.q_lin)),
            ("rho11", zero(&self.player1.rho1)),
            ("rho12", zero(&self.player1.rho2)),
            ("rho21", zero(&self.player2.rho1)),
            ("rho22", zero(&self.player2.rho2)),
            ("g1", self.player1.g_lin.iter().all(|v| *v == 0.0)),
            ("g2", self.player2.g_lin.iter().all(|v| *v == 0.0)),
        ];
        checks.into_iter().find(|(_, ok)| !ok).map(|(k, _)| k)
    }

    /// Copy with every driver, offset and linear term set to zero and `x0 = 0`.
    pub fn homogeneous_part(&self) -> GameSpec {
        let mut s = self.clone();
        let d = self.dims;
        s.x0 = DVector::zeros(d.n);
        s.dynamics.b = CoefficientPath::zeros(d.n, 1);
        s.dynamics.sigma = CoefficientPath::zeros(d.n, 1);
        for p in [&mut s.player1, &mut s.player2] {
            p.q_lin = CoefficientPath::zeros(d.n, 1);
            p.rho1 = CoefficientPath::zeros(d.m1, 1);
            p.rho2 = CoefficientPath::zeros(d.m2, 1);
            p.g_lin = DVector::zeros(d.n);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let msg: Vec<String> = self.failures().iter().map(|c| c.detail.clone()).collect();
        Err(Error::Validation(msg.join("; ")))
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }
}

const SYM_TOL: f64 = 1e-10;

fn asym(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

/// Check shapes, finiteness and the symmetry requirements on the weights.
pub fn validate_spec(spec: &GameSpec) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let Dims { n, m1, m2 } = spec.dims;
    rep.push(
        "dims",
        n >= 1 && m1 >= 1 && m2 >= 1,
        format!("dimensions must be positive, got n={n}, m1={m1}, m2={m2}"),
    );
    rep.push(
        "horizon",
        spec.horizon.is_finite() && spec.horizon > 0.0,
        format!("horizon must be positive, got {}", spec.horizon),
    );
    rep.push(
        "x0 shape",
        spec.x0.len() == n,
        format!("x0 shape mismatch: expected {n}, got {}", spec.x0.len()),
    );
    rep.push("x0 finite", spec.x0.iter().all(|v| v.is_finite()), "x0 not finite");

    let expected = |name: &str| -> (usize, usize) {
        let key = name.rsplit('.').next().unwrap_or(name);
        match key {
            "A" | "C" | "Q" => (n, n),
            "B1" | "D1" => (n, m1),
            "B2" | "D2" => (n, m2),
            "b" | "sigma" | "q" => (n, 1),
            "S1" => (m1, n),
            "S2" => (m2, n),
            "R11" => (m1, m1),
            "R12" => (m1, m2),
            "R21" => (m2, m1),
            "R22" => (m2, m2),
            "rho1" => (m1, 1),
            "rho2" => (m2, 1),
            _ => (0, 0),
        }
    };

    let mut sample_count: Option<usize> = None;
    for (name, path) in spec.all_paths() {
        let want = expected(&name);
        let mut shape_ok = true;
        let mut finite = true;
        path.for_each_matrix(|m| {
            shape_ok &= m.shape() == want;
            finite &= m.iter().all(|v| v.is_finite());
        });
        let got = path.shape();
        rep.push(
            format!("{name} shape"),
            shape_ok,
            format!("{name} shape mismatch: expected {}x{}, got {}x{}", want.0, want.1, got.0, got.1),
        );
        rep.push(format!("{name} finite"), finite, format!("{name} not finite"));
        if let Some(c) = path.node_count() {
            let consistent = c >= 2 && sample_count.is_none_or(|s| s == c);
            rep.push(
                format!("{name} nodes"),
                consistent,
                format!("{name} has {c} samples, other coefficients have {}", sample_count.unwrap_or(c)),
            );
            sample_count.get_or_insert(c);
        }
    }
    if !rep.passed() {
        return rep;
    }

    for (i, pl) in [(1, &spec.player1), (2, &spec.player2)] {
        for (key, path) in [("Q", &pl.q), ("R11", &pl.r11), ("R22", &pl.r22)] {
            let mut worst = 0.0_f64;
            path.for_each_matrix(|m| worst = worst.max(asym(m)));
            rep.push(
                format!("player{i}.{key} symmetric"),
                worst <= SYM_TOL,
                format!("player{i} {key} not symmetric"),
            );
        }
        let mut worst = 0.0_f64;
        match (&pl.r12, &pl.r21) {
            (CoefficientPath::Sampled(a), CoefficientPath::Sampled(b)) => {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((x - y.transpose()).norm() / x.norm().max(1.0));
                }
            }
            (a, b) => {
                for k in 0..sample_count.unwrap_or(1) {
                    let t = match sample_count {
                        Some(c) => spec.horizon * k as f64 / (c - 1) as f64,
                        None => 0.0,
                    };
                    let (x, y) = (a.at(t, spec.horizon), b.at(t, spec.horizon));
                    if let (Ok(x), Ok(y)) = (x, y) {
                        worst = worst.max((&x - y.transpose()).norm() / x.norm().max(1.0));
                    }
                }
            }
        }
        rep.push(
            format!("player{i}.R12 transpose"),
            worst <= SYM_TOL,
            format!("player{i} R12 is not the transpose of R21"),
        );
        rep.push(
            format!("player{i}.G shape"),
            pl.g_mat.shape() == (n, n) && pl.g_lin.len() == n,
            format!("player{i} G/g shape mismatch"),
        );
        rep.push(
            format!("player{i}.G symmetric"),
            pl.g_mat.shape() != (n, n) || asym(&pl.g_mat) <= SYM_TOL,
            format!("player{i} G not symmetric"),
        );
        rep.push(
            format!("player{i}.G finite"),
            pl.g_mat.iter().chain(pl.g_lin.iter()).all(|v| v.is_finite()),
            format!("player{i} G/g not finite"),
        );
    }
    rep
}

// ---------------------------------------------------------------------------
// JSON

fn num(v: &Value, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::Validation(format!("{what}: expected a number")))
}

fn parse_matrix(v: &Value, what: &str) -> Result<DMatrix<f64>> {
    match v {
        Value::Number(_) => Ok(DMatrix::from_element(1, 1, num(v, what)?)),
        Value::Array(items) if items.is_empty() => Ok(DMatrix::zeros(0, 0)),
        Value::Array(items) if items.iter().all(Value::is_number) => {
            let vals = items.iter().map(|x| num(x, what)).collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_column_slice(vals.len(), 1, &vals))
        }
        Value::Array(rows) => {
            let mut data = Vec::new();
            let mut cols = None;
            for row in rows {
                let row = row
                    .as_array()
                    .ok_or_else(|| Error::Validation(format!("{what}: rows must be arrays")))?;
                if *cols.get_or_insert(row.len()) != row.len() {
                    return Err(Error::Validation(format!("{what}: ragged rows")));
                }
                for x in row {
                    data.push(num(x, what)?);
                }
            }
            Ok(DMatrix::from_row_slice(rows.len(), cols.unwrap_or(0), &data))
        }
        _ => Err(Error::Validation(format!("{what}: expected a number array"))),
    }
}

fn parse_path(v: &Value, what: &str) -> Result<CoefficientPath> {
    if let Some(samples) = v.get("samples") {
        let items = samples
            .as_array()
            .ok_or_else(|| Error::Validation(format!("{what}.samples: expected an array")))?;
        let mats = items.iter().map(|s| parse_matrix(s, what)).collect::<Result<Vec<_>>>()?;
        return Ok(CoefficientPath::Sampled(mats));
    }
    Ok(CoefficientPath::Constant(parse_matrix(v, what)?))
}

fn field<'a>(obj: &'a Value, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

fn path_or_zero(obj: &Value, key: &str, what: &str, shape: (usize, usize)) -> Result<CoefficientPath> {
    match field(obj, key) {
        Some(v) => parse_path(v, &format!("{what}.{key}")),
        None => Ok(CoefficientPath::zeros(shape.0, shape.1)),
    }
}

fn transpose_path(p: &CoefficientPath) -> CoefficientPath {
    match p {
        CoefficientPath::Constant(m) => CoefficientPath::Constant(m.transpose()),
        CoefficientPath::Sampled(v) => CoefficientPath::Sampled(v.iter().map(|m| m.transpose()).collect()),
    }
}

fn parse_player(v: Option<&Value>, d: Dims, what: &str) -> Result<PlayerCost> {
    let empty = Value::Object(Map::new());
    let v = v.unwrap_or(&empty);
    let Dims { n, m1, m2 } = d;
    let r12 = path_or_zero(v, "R12", what, (m1, m2))?;
    let r21 = match field(v, "R21") {
        Some(x) => parse_path(x, &format!("{what}.R21"))?,
        None => transpose_path(&r12),
    };
    let g_mat = match field(v, "G") {
        Some(x) => parse_matrix(x, &format!("{what}.G"))?,
        None => DMatrix::zeros(n, n),
    };
    let g_lin = match field(v, "g") {
        Some(x) => {
            let m = parse_matrix(x, &format!("{what}.g"))?;
            DVector::from_column_slice(m.as_slice())
        }
        None => DVector::zeros(n),
    };
    Ok(PlayerCost {
        q: path_or_zero(v, "Q", what, (n, n))?,
        s1: path_or_zero(v, "S1", what, (m1, n))?,
        s2: path_or_zero(v, "S2", what, (m2, n))?,
        r11: path_or_zero(v, "R11", what, (m1, m1))?,
        r12,
        r21,
        r22: path_or_zero(v, "R22", what, (m2, m2))?,
        q_lin: path_or_zero(v, "q", what, (n, 1))?,
        rho1: path_or_zero(v, "rho1", what, (m1, 1))?,
        rho2: path_or_zero(v, "rho2", what, (m2, 1))?,
        g_mat,
        g_lin,
    })
}

/// Parse a problem from its JSON form. Omitted coefficients are zero, except
/// an omitted `R21`, which defaults to the transpose of `R12`.
pub fn spec_from_json(v: &Value) -> Result<GameSpec> {
    let horizon = num(field(v, "horizon").unwrap_or(&json!(1.0)), "horizon")?;
    let dims = field(v, "dims").ok_or_else(|| Error::Validation("missing dims".into()))?;
    let dim = |k: &str| -> Result<usize> {
        dims.get(k)
            .and_then(Value::as_u64)
            .map(|x| x as usize)
            .ok_or_else(|| Error::Validation(format!("dims.{k}: expected a non-negative integer")))
    };
    let d = Dims::new(dim("n")?, dim("m1")?, dim("m2")?);
    let x0 = match field(v, "x0") {
        Some(x) => DVector::from_column_slice(parse_matrix(x, "x0")?.as_slice()),
        None => DVector::zeros(d.n),
    };
    let empty = Value::Object(Map::new());
    let dy = field(v, "dynamics").unwrap_or(&empty);
    let (n, m1, m2) = (d.n, d.m1, d.m2);
    let dynamics = Dynamics {
        a: path_or_zero(dy, "A", "dynamics", (n, n))?,
        b1: path_or_zero(dy, "B1", "dynamics", (n, m1))?,
        b2: path_or_zero(dy, "B2", "dynamics", (n, m2))?,
        c: path_or_zero(dy, "C", "dynamics", (n, n))?,
        d1: path_or_zero(dy, "D1", "dynamics", (n, m1))?,
        d2: path_or_zero(dy, "D2", "dynamics", (n, m2))?,
        b: path_or_zero(dy, "b", "dynamics", (n, 1))?,
        sigma: path_or_zero(dy, "sigma", "dynamics", (n, 1))?,
    };
    Ok(GameSpec {
        horizon,
        dims: d,
        x0,
        dynamics,
        player1: parse_player(field(v, "player1"), d, "player1")?,
        player2: parse_player(field(v, "player2"), d, "player2")?,
    })
}

pub fn load_spec(path: &std::path::Path) -> Result<GameSpec> {
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text)?;
    spec_from_json(&v)
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    if m.ncols() == 1 {
        return json!(m.iter().copied().collect::<Vec<f64>>());
    }
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    json!(rows)
}

fn path_json(p: &CoefficientPath) -> Value {
    match p {
        CoefficientPath::Constant(m) => matrix_json(m),
        CoefficientPath::Sampled(v) => json!({ "samples": v.iter().map(matrix_json).collect::<Vec<_>>() }),
    }
}

fn player_json(p: &PlayerCost) -> Value {
    let mut obj = Map::new();
    for (k, path) in p.paths() {
        obj.insert(k.to_string(), path_json(path));
    }
    obj.insert("G".into(), matrix_json(&p.g_mat));
    obj.insert("g".into(), json!(p.g_lin.iter().copied().collect::<Vec<f64>>()));
    Value::Object(obj)
}

pub fn spec_to_json(spec: &GameSpec) -> Value {
    let mut dy = Map::new();
    for (k, path) in spec.dynamics_paths() {
        dy.insert(k.to_string(), path_json(path));
    }
    json!({
        "horizon": spec.horizon,
        "dims": { "n": spec.dims.n, "m1": spec.dims.m1, "m2": spec.dims.m2 },
        "x0": spec.x0.iter().copied().collect::<Vec<f64>>(),
        "dynamics": Value::Object(dy),
        "player1": player_json(&spec.player1),
        "player2": player_json(&spec.player2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GameSpec {
        let mut s = GameSpec::zeros(Dims::new(2, 1, 1), 1.0);
        s.player1.q = CoefficientPath::matrix(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        s
    }

    #[test]
    fn symmetric_weights_pass() {
        assert!(validate_spec(&small()).passed());
    }

    #[test]
    fn asymmetric_r11_fails() {
        let mut s = GameSpec::zeros(Dims::new(1, 2, 1), 1.0);
        s.player1.r11 = CoefficientPath::matrix(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let rep = validate_spec(&s);
        assert!(!rep.passed());
        assert!(rep.failures().iter().any(|c| c.detail.contains("R11 not symmetric")));
    }

    #[test]
    fn wrong_b1_shape_fails() {
        let mut s = small();
        s.dynamics.b1 = CoefficientPath::zeros(2, 2);
        let rep = validate_spec(&s);
        assert!(rep.failures().iter().any(|c| c.detail.contains("shape mismatch")));
    }

    #[test]
    fn validation_is_idempotent() {
        let s = small();
        assert_eq!(validate_spec(&s), validate_spec(&s));
    }

    #[test]
    fn constant_and_sampled_evaluation() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        let c = CoefficientPath::scalar(3.5);
        assert_eq!(eval_coefficient(&c, 0.37, &g).unwrap()[(0, 0)], 3.5);
        let s = CoefficientPath::Sampled(vec![DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 2.0)]);
        assert_eq!(eval_coefficient(&s, 0.5, &g).unwrap()[(0, 0)], 1.0);
        assert_eq!(eval_coefficient(&s, 1.0, &g).unwrap()[(0, 0)], 2.0);
        assert!(matches!(eval_coefficient(&s, 1.5, &g), Err(Error::Domain { .. })));
    }

    #[test]
    fn sampled_exact_at_nodes() {
        let g = TimeGrid::new(0.7, 7).unwrap();
        let vals: Vec<DMatrix<f64>> = (0..8).map(|k| DMatrix::from_element(1, 1, (k as f64).sin())).collect();
        let p = CoefficientPath::Sampled(vals.clone());
        for k in 0..8 {
            assert_eq!(eval_coefficient(&p, g.t(k), &g).unwrap(), vals[k]);
        }
    }

    #[test]
    fn locate_snaps_to_nodes() {
        let g = TimeGrid::new(1.0, 2000);
        let g = g.unwrap();
        let fine = g.refined(2);
        for k in 0..=g.steps() {
            let (i, w) = fine.locate(g.t(k)).unwrap();
            assert_eq!((i, w), (2 * k, 0.0));
        }
        let (i, w) = g.locate(0.25 + 0.5 / 2000.0).unwrap();
        assert_eq!(i, 500);
        assert!((w - 0.5).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip() {
        let mut s = small();
        s.x0 = DVector::from_vec(vec![1.0, -2.0]);
        s.dynamics.b = CoefficientPath::Sampled(vec![
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[2.0, 3.0]),
        ]);
        s.player2.g_lin = DVector::from_vec(vec![0.5, 0.25]);
        let back = spec_from_json(&spec_to_json(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn json_defaults_and_scalars() {
        let v = json!({
            "horizon": 2.0,
            "dims": {"n": 1, "m1": 1, "m2": 1},
            "x0": [1.0],
            "dynamics": {"A": [[0.5]], "B1": 1.0},
            "player1": {"R12": [[0.3]]}
        });
        let s = spec_from_json(&v).unwrap();
        assert_eq!(s.horizon, 2.0);
        assert_eq!(s.dynamics.b1, CoefficientPath::scalar(1.0));
        assert_eq!(s.player1.r21, CoefficientPath::scalar(0.3));
        assert!(validate_spec(&s).passed());
    }
}
