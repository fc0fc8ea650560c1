//! Backward RK4 for matrix ODEs, SVD pseudo-inverse and the small
//! matrix-analysis helpers shared by both Riccati solvers.

use nalgebra::{DMatrix, DMatrixView, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::TimeGrid;

/// Relative singular-value cutoff of [`pinv`].
pub const PINV_REL_TOL: f64 = 1e-10;
/// Default tolerance of [`range_check`] and [`psd_check`].
pub const CERT_TOL: f64 = 1e-8;
/// Frobenius norm beyond which an integration is declared to blow up.
pub const BLOWUP_CAP: f64 = 1e8;
/// Largest acceptable condition number for an explicit inverse.
pub const COND_MAX: f64 = 1e12;

/// A matrix-valued function sampled at every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPath {
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixPath {
    pub fn zeros(grid: TimeGrid, rows: usize, cols: usize) -> Self {
        MatrixPath { grid, rows, cols, data: vec![0.0; grid.len() * rows * cols] }
    }

    pub fn constant(grid: TimeGrid, m: &DMatrix<f64>) -> Self {
        let mut p = Self::zeros(grid, m.nrows(), m.ncols());
        for k in 0..grid.len() {
            p.set(k, m);
        }
        p
    }

    pub fn from_nodes(grid: TimeGrid, nodes: &[DMatrix<f64>]) -> Result<Self> {
        if nodes.len() != grid.len() {
            return Err(Error::Shape(format!("{} nodes for a grid of {}", nodes.len(), grid.len())));
        }
        let (rows, cols) = nodes[0].shape();
        let mut p = Self::zeros(grid, rows, cols);
        for (k, m) in nodes.iter().enumerate() {
            if m.shape() != (rows, cols) {
                return Err(Error::Shape(format!("node {k} has shape {:?}, expected {:?}", m.shape(), (rows, cols))));
            }
            p.set(k, m);
        }
        Ok(p)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn block(&self) -> usize {
        self.rows * self.cols
    }

    pub fn node(&self, k: usize) -> DMatrixView<'_, f64> {
        let b = self.block();
        DMatrixView::from_slice(&self.data[k * b..(k + 1) * b], self.rows, self.cols)
    }

    pub fn get(&self, k: usize) -> DMatrix<f64> {
        self.node(k).into_owned()
    }

    pub fn set(&mut self, k: usize, m: &DMatrix<f64>) {
        debug_assert_eq!(m.shape(), (self.rows, self.cols));
        let b = self.block();
        self.data[k * b..(k + 1) * b].copy_from_slice(m.as_slice());
    }

    /// Linear interpolation in time; exact at nodes.
    pub fn at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (i, w) = self.grid.locate(t)?;
        if w == 0.0 {
            return Ok(self.get(i));
        }
        Ok(self.node(i) * (1.0 - w) + self.node(i + 1) * w)
    }

    /// Every `factor`-th node, on the correspondingly coarser grid.
    pub fn subsample(&self, factor: usize) -> Result<MatrixPath> {
        if factor == 0 || !self.grid.steps().is_multiple_of(factor) {
            return Err(Error::Shape(format!("cannot take every {factor}th node of {} steps", self.grid.steps())));
        }
        let grid = TimeGrid::new(self.grid.horizon(), self.grid.steps() / factor)?;
        let mut out = Self::zeros(grid, self.rows, self.cols);
        let b = self.block();
        for k in 0..grid.len() {
            let j = k * factor;
            out.data[k * b..(k + 1) * b].copy_from_slice(&self.data[j * b..(j + 1) * b]);
        }
        Ok(out)
    }

    /// Entry `(r, c)` at every node.
    pub fn entry_series(&self, r: usize, c: usize) -> Vec<f64> {
        let b = self.block();
        (0..self.len()).map(|k| self.data[k * b + c * self.rows + r]).collect()
    }

    /// Largest nodewise Frobenius distance to `other`.
    pub fn max_distance(&self, other: &MatrixPath) -> f64 {
        (0..self.len().min(other.len()))
            .map(|k| (self.node(k) - other.node(k)).norm())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, mut f: impl FnMut(usize, DMatrixView<'_, f64>) -> DMatrix<f64>) -> Result<MatrixPath> {
        let nodes: Vec<DMatrix<f64>> = (0..self.len()).map(|k| f(k, self.node(k))).collect();
        MatrixPath::from_nodes(self.grid, &nodes)
    }
}

fn guard(m: &DMatrix<f64>, t: f64) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t });
    }
    if m.norm() > BLOWUP_CAP {
        return Err(Error::BlowUp { t });
    }
    Ok(())
}

/// Classical RK4 marching from `t_N` down to `t_0` for `dM/dt = field(t, M)`,
/// with `path[N] = terminal` assigned exactly.
pub fn integrate_backward_rk4<F>(field: F, terminal: DMatrix<f64>, grid: &TimeGrid) -> Result<MatrixPath>
where
    F: FnMut(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let mut field = field;
    integrate_backward_rk4_with(|_, t, m| field(t, m), terminal, grid, |_| {})
}

/// Backward RK4 with a step-aware field and a hook applied after every step.
///
/// The field receives the index `k` of the interval `[t_k, t_{k+1}]` being
/// crossed, so forcing terms that jump at grid nodes can be evaluated on the
/// correct side.
pub fn integrate_backward_rk4_with<F, H>(
    mut field: F,
    terminal: DMatrix<f64>,
    grid: &TimeGrid,
    mut post_step: H,
) -> Result<MatrixPath>
where
    F: FnMut(usize, f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
    H: FnMut(&mut DMatrix<f64>),
{
    let n = grid.steps();
    let h = grid.dt();
    guard(&terminal, grid.horizon())?;
    let mut path = MatrixPath::zeros(*grid, terminal.nrows(), terminal.ncols());
    path.set(n, &terminal);
    let mut y = terminal;
    for k in (0..n).rev() {
        let t1 = grid.t(k + 1);
        let tm = 0.5 * (grid.t(k) + t1);
        let t0 = grid.t(k);
        let k1 = field(k, t1, &y)?;
        let y2 = &y - &k1 * (0.5 * h);
        guard(&y2, tm)?;
        let k2 = field(k, tm, &y2)?;
        let y3 = &y - &k2 * (0.5 * h);
        guard(&y3, tm)?;
        let k3 = field(k, tm, &y3)?;
        let y4 = &y - &k3 * h;
        guard(&y4, t0)?;
        let k4 = field(k, t0, &y4)?;
        y -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        post_step(&mut y);
        guard(&y, t0)?;
        path.set(k, &y);
    }
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct PinvResult {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

/// Moore–Penrose pseudo-inverse; singular values below `rel_tol * sigma_max`
/// are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> PinvResult {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return PinvResult { pinv: DMatrix::zeros(c, r), rank: 0, singular_values: vec![] };
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let mut rank = 0;
    let mut ut = u.transpose();
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            rank += 1;
            ut.row_mut(i).scale_mut(1.0 / s);
        } else {
            ut.row_mut(i).fill(0.0);
        }
    }
    let out = vt.transpose() * ut;
    let mut singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    PinvResult { pinv: out, rank, singular_values }
}

/// Pseudo-inverse matrix only. Well-conditioned matrices take an LU inverse:
/// a 1-norm condition number below `1e9` keeps every singular value above
/// the `PINV_REL_TOL` cut for dimensions below 10, so nothing is truncated.
pub fn pinv_matrix(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_square() && m.nrows() < 10 {
        if let Some((inv, _)) = inverse_guarded(m, 1e9) {
            return inv;
        }
    }
    pinv(m, PINV_REL_TOL).pinv
}

/// Whether the columns of `m` lie in the range of `r`:
/// `|(I - R R†) M|_F <= tol * max(1, |M|_F)`.
pub fn range_check(m: &DMatrix<f64>, r: &DMatrix<f64>, tol: f64) -> bool {
    range_defect(m, r) <= tol * m.norm().max(1.0)
}

/// `|(I - R R†) M|_F`.
pub fn range_defect(m: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    range_defect_with(m, r, &pinv(r, PINV_REL_TOL).pinv)
}

/// [`range_defect`] with a precomputed pseudo-inverse of `r`.
pub fn range_defect_with(m: &DMatrix<f64>, r: &DMatrix<f64>, r_pinv: &DMatrix<f64>) -> f64 {
    (m - r * (r_pinv * m)).norm()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let s = symmetrized(m);
    SymmetricEigen::new(s).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `lambda_min((M + M')/2) >= -tol`.
pub fn psd_check(m: &DMatrix<f64>, tol: f64) -> bool {
    min_eigenvalue(m) >= -tol
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let s = symmetrized(m);
    m.copy_from(&s);
}

/// Inverse together with its 1-norm condition number; `None` if singular or
/// worse conditioned than `cond_max`.
pub fn inverse_guarded(m: &DMatrix<f64>, cond_max: f64) -> Option<(DMatrix<f64>, f64)> {
    if m.nrows() == 0 {
        return Some((m.clone(), 1.0));
    }
    let inv = m.clone().lu().try_inverse()?;
    let cond = norm1(m) * norm1(&inv);
    if !cond.is_finite() || cond > cond_max {
        return None;
    }
    Some((inv, cond))
}

/// Condition number as reported by [`inverse_guarded`] (infinite if singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    match m.clone().lu().try_inverse() {
        Some(inv) => norm1(m) * norm1(&inv),
        None => f64::INFINITY,
    }
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Pairwise summation; fixed association order regardless of how the input
/// was produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn tanh_error(n: usize) -> f64 {
        let g = TimeGrid::new(1.0, n).unwrap();
        let p = integrate_backward_rk4(|_, m| Ok(m.map(|x| x * x - 1.0)), scalar(0.0), &g).unwrap();
        (p.get(0)[(0, 0)] - 1f64.tanh()).abs()
    }

    #[test]
    fn zero_field_keeps_terminal() {
        let g = TimeGrid::new(2.0, 10).unwrap();
        let gm = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = integrate_backward_rk4(|_, m| Ok(m * 0.0), gm.clone(), &g).unwrap();
        for k in 0..=10 {
            assert_eq!(p.get(k), gm);
        }
    }

    #[test]
    fn tanh_riccati_and_order() {
        assert!(tanh_error(1000) < 1e-10);
        let (e1, e2) = (tanh_error(20), tanh_error(40));
        assert!((e1 / e2).log2() >= 3.5, "order {}", (e1 / e2).log2());
    }

    #[test]
    fn blow_up_inside_horizon_is_reported() {
        // dP/dt = -P^2 with P(1) = 1/eps has the pole t = 1 - eps.
        let eps = 0.5;
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let err = integrate_backward_rk4(|_, m| Ok(-m.map(|x| x * x)), scalar(1.0 / eps), &g).unwrap_err();
        match err {
            Error::BlowUp { t } => assert!((t - 0.5).abs() < 2e-3, "t = {t}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn huge_terminal_blows_up_at_horizon() {
        let eps = 1e-9;
        let g = TimeGrid::new(1.0, 10).unwrap();
        let err = integrate_backward_rk4(|_, m| Ok(-m.map(|x| x * x)), scalar(-1.0 / eps), &g).unwrap_err();
        assert!(matches!(err, Error::BlowUp { t } if t == 1.0));
    }

    #[test]
    fn nan_is_reported() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let err = integrate_backward_rk4(|t, m| Ok(if t < 0.5 { m.map(|_| f64::NAN) } else { m.clone() }), scalar(1.0), &g)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn integration_is_deterministic() {
        let g = TimeGrid::new(1.0, 300).unwrap();
        let f = |t: f64, m: &DMatrix<f64>| Ok(m * m * t.cos() - DMatrix::identity(2, 2));
        let a = integrate_backward_rk4(f, DMatrix::identity(2, 2) * 0.1, &g).unwrap();
        let b = integrate_backward_rk4(f, DMatrix::identity(2, 2) * 0.1, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pinv_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        let r = pinv(&i, PINV_REL_TOL);
        assert_eq!(r.rank, 3);
        assert_abs_diff_eq!(r.pinv, i, epsilon = 1e-14);

        let z = DMatrix::<f64>::zeros(2, 3);
        let r = pinv(&z, PINV_REL_TOL);
        assert_eq!(r.rank, 0);
        assert_eq!(r.pinv, DMatrix::zeros(3, 2));

        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let r = pinv(&d, PINV_REL_TOL);
        assert_eq!(r.rank, 1);
        assert_abs_diff_eq!(r.pinv, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn range_examples() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(range_check(&m, &DMatrix::identity(2, 2), CERT_TOL));
        assert!(!range_check(&scalar(1.0), &scalar(0.0), CERT_TOL));
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(range_check(&DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), &r, CERT_TOL));
        assert!(!range_check(&DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), &r, CERT_TOL));
    }

    #[test]
    fn psd_examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!(psd_check(&i, CERT_TOL));
        assert!(!psd_check(&(-&i), CERT_TOL));
        assert!(psd_check(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), CERT_TOL));
    }

    #[test]
    fn guarded_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let (inv, cond) = inverse_guarded(&m, COND_MAX).unwrap();
        assert_abs_diff_eq!(&m * inv, DMatrix::identity(2, 2), epsilon = 1e-14);
        assert!(cond > 1.0 && cond < 10.0);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-14]);
        assert!(inverse_guarded(&s, COND_MAX).is_none());
    }

    #[test]
    fn path_interpolation_and_subsample() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let nodes: Vec<DMatrix<f64>> = (0..5).map(|k| scalar(k as f64)).collect();
        let p = MatrixPath::from_nodes(g, &nodes).unwrap();
        assert_eq!(p.at(0.375).unwrap()[(0, 0)], 1.5);
        assert_eq!(p.at(1.0).unwrap()[(0, 0)], 4.0);
        let s = p.subsample(2).unwrap();
        assert_eq!(s.entry_series(0, 0), vec![0.0, 2.0, 4.0]);
        assert!(p.subsample(3).is_err());
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mat(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
            proptest::collection::vec(-3.0..3.0f64, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
        }

        proptest! {
            #[test]
            fn pinv_penrose_identities(m in mat(3, 2)) {
                let p = pinv(&m, PINV_REL_TOL).pinv;
                let tol = 1e-9 * m.norm().max(1.0);
                prop_assert!((&m * &p * &m - &m).norm() <= tol);
                prop_assert!((&p * &m * &p - &p).norm() <= tol * p.norm().max(1.0));
                let mp = &m * &p;
                let pm = &p * &m;
                prop_assert!((&mp - mp.transpose()).norm() <= tol);
                prop_assert!((&pm - pm.transpose()).norm() <= tol);
            }

            #[test]
            fn pinv_is_an_involution_for_full_rank(m in mat(2, 2)) {
                prop_assume!(condition_number(&m) < 1e6);
                let back = pinv(&pinv(&m, PINV_REL_TOL).pinv, PINV_REL_TOL).pinv;
                prop_assert!((back - &m).norm() <= 1e-8 * m.norm().max(1.0));
            }
        }
    }
}
