//! Grids, trapezoid quadrature, weighted inner products and dense complex
//! operators acting on sampled (possibly vector-valued) functions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, invalid, Error, Result};
use crate::scalar::{cabs, cplx, creal, Real, C};

pub type CVec<T> = DVector<C<T>>;
pub type CMat<T> = DMatrix<C<T>>;

/// Strictly increasing sample points with composite trapezoid weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T: Real> {
    points: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub const MIN_POINTS: usize = 8;

    /// Uniform grid of `n` points on `[a, b]`.
    pub fn uniform(a: T, b: T, n: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a >= b {
            return invalid(format!("grid bounds must satisfy a < b, got a = {a:?}, b = {b:?}"));
        }
        if n < Self::MIN_POINTS {
            return invalid(format!("grid needs at least {} points, got {n}", Self::MIN_POINTS));
        }
        let h = (b - a) / T::from_usize(n - 1).unwrap();
        let mut points: Vec<T> = (0..n).map(|i| a + h * T::from_usize(i).unwrap()).collect();
        points[n - 1] = b;
        Self::from_points(points)
    }

    /// Grid on arbitrary strictly increasing points.
    pub fn from_points(points: Vec<T>) -> Result<Self> {
        let n = points.len();
        if n < Self::MIN_POINTS {
            return invalid(format!("grid needs at least {} points, got {n}", Self::MIN_POINTS));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return invalid("grid points must be finite");
        }
        if let Some(i) = (1..n).find(|&i| points[i] <= points[i - 1]) {
            return invalid(format!("grid points not strictly increasing at index {i}"));
        }
        let half = T::lit(0.5);
        let mut weights = vec![T::zero(); n];
        for i in 1..n {
            let h = points[i] - points[i - 1];
            weights[i - 1] += half * h;
            weights[i] += half * h;
        }
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn a(&self) -> T {
        self.points[0]
    }

    pub fn b(&self) -> T {
        self.points[self.len() - 1]
    }

    pub fn length(&self) -> T {
        self.b() - self.a()
    }

    /// Width of cell `k` (between points `k-1` and `k`), `k >= 1`.
    pub fn step(&self, k: usize) -> T {
        self.points[k] - self.points[k - 1]
    }

    pub fn max_step(&self) -> T {
        (1..self.len()).map(|k| self.step(k)).fold(T::zero(), |m, h| m.max(h))
    }

    /// Index of the grid point closest to `t`.
    pub fn nearest_index(&self, t: T) -> usize {
        let i = self.points.partition_point(|&p| p < t);
        if i == 0 {
            0
        } else if i == self.len() {
            self.len() - 1
        } else if (t - self.points[i - 1]) <= (self.points[i] - t) {
            i - 1
        } else {
            i
        }
    }

    /// Entry `(k, j)` of the cumulative trapezoid matrix: `(T f)_k ≈ ∫_a^{t_k} f`.
    pub fn cumulative_weight(&self, k: usize, j: usize) -> T {
        let half = T::lit(0.5);
        if k == 0 || j > k {
            T::zero()
        } else if j == k {
            half * self.step(k)
        } else if j == 0 {
            half * self.step(1)
        } else {
            half * (self.step(j) + self.step(j + 1))
        }
    }

    pub fn cumulative_trapezoid(&self) -> DMatrix<T> {
        let n = self.len();
        DMatrix::from_fn(n, n, |k, j| self.cumulative_weight(k, j))
    }
}

/// Uniform grid with trapezoid weights on `[a, b]`.
pub fn make_grid<T: Real>(a: T, b: T, n: usize) -> Result<Grid<T>> {
    Grid::uniform(a, b, n)
}

/// L² space on a grid with a pointwise PSD weight field of fiber dimension 1 or 2.
///
/// Coordinates are laid out node-major: component `r` at node `j` sits at `j * fiber + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSpace<T: Real> {
    grid: Grid<T>,
    fiber: usize,
    field: Vec<T>,
    metric: Vec<T>,
    metric_pinv: Vec<T>,
}

const PSD_TOL: f64 = 1e-12;

impl<T: Real> WeightedSpace<T> {
    /// Scalar L² with identity weight.
    pub fn scalar(grid: Grid<T>) -> Self {
        let field = vec![T::one(); grid.len()];
        Self::build(grid, 1, field).expect("identity weight is positive")
    }

    /// Vector-valued L² with real symmetric 2×2 weights `[w11, w12, w22]` per node.
    pub fn matrix_field(grid: Grid<T>, blocks: &[[T; 3]]) -> Result<Self> {
        check_dim(grid.len(), blocks.len())?;
        let field = blocks.iter().flat_map(|&[a, b, d]| [a, b, b, d]).collect();
        Self::build(grid, 2, field)
    }

    fn build(grid: Grid<T>, fiber: usize, field: Vec<T>) -> Result<Self> {
        let n = grid.len();
        let dd = fiber * fiber;
        let mut metric = Vec::with_capacity(n * dd);
        let mut metric_pinv = Vec::with_capacity(n * dd);
        for j in 0..n {
            let blk = &field[j * dd..(j + 1) * dd];
            let w = grid.weights()[j];
            match fiber {
                1 => {
                    if blk[0] <= T::zero() {
                        return invalid(format!("scalar weight must be positive at node {j}"));
                    }
                    metric.push(w * blk[0]);
                    metric_pinv.push(T::one() / (w * blk[0]));
                }
                2 => {
                    let (l1, l2, v1) = sym2_eigen(blk[0], blk[1], blk[3]);
                    let scale = T::one().max(l1.abs());
                    if l2 < -T::lit(PSD_TOL) * scale {
                        return invalid(format!("weight matrix not PSD at node {j}: eigenvalue {l2:?}"));
                    }
                    metric.extend(blk.iter().map(|&x| w * x));
                    let mut p = [T::zero(); 4];
                    let v2 = [-v1[1], v1[0]];
                    for (lam, v) in [(l1, v1), (l2, v2)] {
                        if lam > T::lit(PSD_TOL) * scale {
                            let inv = T::one() / (w * lam);
                            p[0] += inv * v[0] * v[0];
                            p[1] += inv * v[0] * v[1];
                            p[2] += inv * v[1] * v[0];
                            p[3] += inv * v[1] * v[1];
                        }
                    }
                    metric_pinv.extend(p);
                }
                _ => return invalid(format!("fiber dimension must be 1 or 2, got {fiber}")),
            }
        }
        Ok(Self { grid, fiber, field, metric, metric_pinv })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn fiber(&self) -> usize {
        self.fiber
    }

    pub fn dim(&self) -> usize {
        self.grid.len() * self.fiber
    }

    /// Weight matrix `W_j` at node `j`, row-major.
    pub fn weight_at(&self, j: usize) -> &[T] {
        let dd = self.fiber * self.fiber;
        &self.field[j * dd..(j + 1) * dd]
    }

    /// Block `w_j W_j` of the Gram matrix, row-major.
    pub fn metric_block(&self, j: usize) -> &[T] {
        let dd = self.fiber * self.fiber;
        &self.metric[j * dd..(j + 1) * dd]
    }

    pub fn metric_pinv_block(&self, j: usize) -> &[T] {
        let dd = self.fiber * self.fiber;
        &self.metric_pinv[j * dd..(j + 1) * dd]
    }

    /// True when every weight block is invertible (the Gram matrix is definite).
    pub fn is_definite(&self) -> bool {
        (0..self.grid.len()).all(|j| {
            let b = self.weight_at(j);
            match self.fiber {
                1 => b[0] > T::zero(),
                _ => sym2_eigen(b[0], b[1], b[3]).1 > T::lit(PSD_TOL),
            }
        })
    }

    pub fn check(&self, v: &CVec<T>) -> Result<()> {
        check_dim(self.dim(), v.len())
    }

    /// `⟨f, g⟩ = Σ w_i ⟨W_i f_i, g_i⟩`, linear in `f`.
    pub fn inner(&self, f: &CVec<T>, g: &CVec<T>) -> Result<C<T>> {
        self.check(f)?;
        self.check(g)?;
        Ok(self.inner_unchecked(f.as_slice(), g.as_slice()))
    }

    pub(crate) fn inner_unchecked(&self, f: &[C<T>], g: &[C<T>]) -> C<T> {
        let d = self.fiber;
        let mut acc = creal(T::zero());
        for j in 0..self.grid.len() {
            let m = self.metric_block(j);
            for r in 0..d {
                let mut row = creal(T::zero());
                for s in 0..d {
                    row += f[j * d + s] * m[r * d + s];
                }
                acc += row * g[j * d + r].conj();
            }
        }
        acc
    }

    pub fn norm(&self, f: &CVec<T>) -> T {
        self.inner_unchecked(f.as_slice(), f.as_slice()).re.max(T::zero()).sqrt()
    }

    /// Applies the block-diagonal Gram matrix.
    pub fn metric_apply(&self, f: &CVec<T>) -> CVec<T> {
        let mut out = f.clone();
        self.block_apply_rows(&mut out, &self.metric);
        out
    }

    /// Applies the Gram matrix to every column of `x`.
    pub fn metric_apply_cols(&self, x: &CMat<T>) -> CMat<T> {
        let mut out = x.clone();
        self.block_apply_rows(&mut out, &self.metric);
        out
    }

    /// Left-multiplies `m` in place by the block-diagonal matrix with the given blocks.
    fn block_apply_rows<S>(&self, m: &mut nalgebra::Matrix<C<T>, nalgebra::Dyn, S, nalgebra::VecStorage<C<T>, nalgebra::Dyn, S>>, blocks: &[T])
    where
        S: nalgebra::Dim,
    {
        let d = self.fiber;
        let cols = m.ncols();
        if d == 1 {
            for j in 0..self.grid.len() {
                let w = blocks[j];
                for c in 0..cols {
                    m[(j, c)] *= w;
                }
            }
            return;
        }
        for j in 0..self.grid.len() {
            let b = &blocks[j * 4..j * 4 + 4];
            for c in 0..cols {
                let x0 = m[(2 * j, c)];
                let x1 = m[(2 * j + 1, c)];
                m[(2 * j, c)] = x0 * b[0] + x1 * b[1];
                m[(2 * j + 1, c)] = x0 * b[2] + x1 * b[3];
            }
        }
    }

    /// Right-multiplies `m` in place by the block-diagonal Gram matrix.
    fn metric_right_apply(&self, m: &mut CMat<T>) {
        let d = self.fiber;
        let rows = m.nrows();
        for j in 0..self.grid.len() {
            let b = self.metric_block(j);
            if d == 1 {
                for r in 0..rows {
                    m[(r, j)] *= b[0];
                }
            } else {
                for r in 0..rows {
                    let x0 = m[(r, 2 * j)];
                    let x1 = m[(r, 2 * j + 1)];
                    m[(r, 2 * j)] = x0 * b[0] + x1 * b[2];
                    m[(r, 2 * j + 1)] = x0 * b[1] + x1 * b[3];
                }
            }
        }
    }

    /// Matrix of the weighted adjoint: `G⁺ Tᴴ G`.
    pub fn adjoint_matrix(&self, t: &CMat<T>) -> CMat<T> {
        let mut m = t.adjoint();
        self.metric_right_apply(&mut m);
        self.block_apply_rows(&mut m, &self.metric_pinv);
        m
    }

    /// Gram matrix of a set of columns: `Xᴴ G Y`.
    pub fn gram(&self, x: &CMat<T>, y: &CMat<T>) -> CMat<T> {
        cmatmul(&x.adjoint(), &self.metric_apply_cols(y))
    }

    /// A vector of i.i.d. complex Gaussian coordinates.
    pub fn random_vector<R: Rng>(&self, rng: &mut R) -> CVec<T> {
        random_cvec(rng, self.dim())
    }
}

pub fn random_cvec<T: Real, R: Rng>(rng: &mut R, n: usize) -> CVec<T> {
    DVector::from_fn(n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        cplx(T::lit(re), T::lit(im))
    })
}

/// Eigen-decomposition of a real symmetric 2×2 matrix `[[a, b], [b, d]]`:
/// returns `(λ_max, λ_min, unit eigenvector of λ_max)`.
pub fn sym2_eigen<T: Real>(a: T, b: T, d: T) -> (T, T, [T; 2]) {
    let half = T::lit(0.5);
    let mean = half * (a + d);
    let rad = (half * (a - d)).hypot(b);
    let (l1, l2) = (mean + rad, mean - rad);
    let theta = half * (T::lit(2.0) * b).atan2(a - d);
    (l1, l2, [theta.cos(), theta.sin()])
}

/// Complex matrix product through real products, so that the optimized real
/// kernels are used for `f32`/`f64`.
pub fn cmatmul<T: Real>(a: &CMat<T>, b: &CMat<T>) -> CMat<T> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let ar = a.map(|z| z.re);
    let ai = a.map(|z| z.im);
    let br = b.map(|z| z.re);
    let bi = b.map(|z| z.im);
    let re = &ar * &br - &ai * &bi;
    let im = &ar * &bi + &ai * &br;
    re.zip_map(&im, cplx)
}

pub fn cmatvec<T: Real>(a: &CMat<T>, x: &CVec<T>) -> CVec<T> {
    assert_eq!(a.ncols(), x.len(), "dimensions differ");
    let mut out = DVector::from_element(a.nrows(), creal(T::zero()));
    for (j, &xj) in x.iter().enumerate() {
        if xj.re == T::zero() && xj.im == T::zero() {
            continue;
        }
        let col = a.column(j);
        for (o, &c) in out.iter_mut().zip(col.iter()) {
            *o += c * xj;
        }
    }
    out
}

fn same_space<T: Real>(a: &Arc<WeightedSpace<T>>, b: &Arc<WeightedSpace<T>>) -> Result<()> {
    if Arc::ptr_eq(a, b) || **a == **b {
        Ok(())
    } else {
        invalid("operands live on different weighted spaces")
    }
}

/// Dense operator on a weighted space.
#[derive(Debug, Clone)]
pub struct DenseOperator<T: Real> {
    matrix: CMat<T>,
    space: Arc<WeightedSpace<T>>,
}

impl<T: Real> DenseOperator<T> {
    pub fn new(space: Arc<WeightedSpace<T>>, matrix: CMat<T>) -> Result<Self> {
        check_dim(space.dim(), matrix.nrows())?;
        check_dim(space.dim(), matrix.ncols())?;
        Ok(Self { matrix, space })
    }

    pub fn identity(space: Arc<WeightedSpace<T>>) -> Self {
        let n = space.dim();
        Self { matrix: CMat::identity(n, n), space }
    }

    pub fn zero(space: Arc<WeightedSpace<T>>) -> Self {
        let n = space.dim();
        Self { matrix: CMat::from_element(n, n, creal(T::zero())), space }
    }

    /// The rank-one operator `f ↦ ⟨f, x⟩ y`.
    pub fn rank_one(space: Arc<WeightedSpace<T>>, x: &CVec<T>, y: &CVec<T>) -> Result<Self> {
        space.check(x)?;
        space.check(y)?;
        let gx = space.metric_apply(x);
        let matrix = y * gx.adjoint();
        Ok(Self { matrix, space })
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.matrix
    }

    pub fn space(&self) -> &Arc<WeightedSpace<T>> {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, f: &CVec<T>) -> Result<CVec<T>> {
        self.space.check(f)?;
        Ok(cmatvec(&self.matrix, f))
    }

    /// Weighted adjoint: `⟨T f, g⟩ = ⟨f, T* g⟩`.
    pub fn adjoint(&self) -> Self {
        Self { matrix: self.space.adjoint_matrix(&self.matrix), space: self.space.clone() }
    }

    /// `self ∘ rhs`.
    pub fn compose(&self, rhs: &Self) -> Result<Self> {
        same_space(&self.space, &rhs.space)?;
        Ok(Self { matrix: cmatmul(&self.matrix, &rhs.matrix), space: self.space.clone() })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        same_space(&self.space, &rhs.space)?;
        Ok(Self { matrix: &self.matrix + &rhs.matrix, space: self.space.clone() })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        same_space(&self.space, &rhs.space)?;
        Ok(Self { matrix: &self.matrix - &rhs.matrix, space: self.space.clone() })
    }

    pub fn scale(&self, c: C<T>) -> Self {
        Self { matrix: self.matrix.map(|z| z * c), space: self.space.clone() }
    }

    /// `self + ⟨·, x⟩ y`.
    pub fn plus_rank_one(&self, x: &CVec<T>, y: &CVec<T>) -> Result<Self> {
        self.add(&Self::rank_one(self.space.clone(), x, y)?)
    }

    /// `selfᵏ` by repeated squaring.
    pub fn pow(&self, k: u32) -> Self {
        let mut result: Option<CMat<T>> = None;
        let mut base = self.matrix.clone();
        let mut e = k;
        while e > 0 {
            if e & 1 == 1 {
                result = Some(match result {
                    None => base.clone(),
                    Some(r) => cmatmul(&r, &base),
                });
            }
            e >>= 1;
            if e > 0 {
                base = cmatmul(&base, &base);
            }
        }
        let n = self.dim();
        Self { matrix: result.unwrap_or_else(|| CMat::identity(n, n)), space: self.space.clone() }
    }

    /// Operator norm in the weighted (semi)norm, by power iteration on `T* T`.
    pub fn norm(&self) -> T {
        let adj = self.adjoint();
        let n = self.dim();
        let mut v: CVec<T> = DVector::from_fn(n, |i, _| {
            let x = T::from_usize(i % 7 + 1).unwrap();
            cplx(T::one() / x, T::lit(0.25) * T::from_usize(i % 3).unwrap())
        });
        let mut sigma = T::zero();
        for _ in 0..500 {
            let nv = self.space.norm(&v);
            if nv == T::zero() {
                return T::zero();
            }
            v.iter_mut().for_each(|z| *z /= nv);
            let w = cmatvec(&self.matrix, &v);
            let next = self.space.norm(&w);
            let converged = (next - sigma).abs() <= T::lit(1e-13) * next;
            sigma = next;
            if converged || sigma == T::zero() {
                break;
            }
            v = cmatvec(&adj.matrix, &w);
        }
        sigma
    }

    /// Spectral-radius proxies `s_n = ‖Tⁿ‖^{1/n}` for the given exponents.
    pub fn power_norms(&self, exponents: &[u32]) -> Vec<T> {
        exponents
            .iter()
            .map(|&k| {
                let nrm = self.pow(k).norm();
                nrm.powf(T::one() / T::from_u32(k).unwrap())
            })
            .collect()
    }

    /// Largest entry modulus of `self - rhs` relative to the largest entry of `self`.
    pub fn relative_distance(&self, rhs: &Self) -> T {
        let scale = self.matrix.iter().fold(T::zero(), |m, &z| m.max(cabs(z)));
        let diff = self
            .matrix
            .iter()
            .zip(rhs.matrix.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max(cabs(a - b)));
        if scale == T::zero() {
            diff
        } else {
            diff / scale
        }
    }
}

/// Closed subspace given by a weighted-orthonormal frame.
#[derive(Debug, Clone)]
pub struct Subspace<T: Real> {
    frame: CMat<T>,
    space: Arc<WeightedSpace<T>>,
}

impl<T: Real> Subspace<T> {
    /// Wraps a frame already known to be orthonormal.
    pub(crate) fn from_orthonormal(space: Arc<WeightedSpace<T>>, frame: CMat<T>) -> Self {
        Self { frame, space }
    }

    pub fn frame(&self) -> &CMat<T> {
        &self.frame
    }

    pub fn space(&self) -> &Arc<WeightedSpace<T>> {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.frame.ncols()
    }

    /// Frame coefficients `Fᴴ G f`.
    pub fn coefficients(&self, f: &CVec<T>) -> CVec<T> {
        self.frame.adjoint() * self.space.metric_apply(f)
    }

    pub fn project(&self, f: &CVec<T>) -> CVec<T> {
        cmatvec(&self.frame, &self.coefficients(f))
    }

    pub fn project_cols(&self, x: &CMat<T>) -> CMat<T> {
        let coeff = self.space.gram(&self.frame, x);
        cmatmul(&self.frame, &coeff)
    }

    /// `‖(I − P) f‖`.
    pub fn residual_norm(&self, f: &CVec<T>) -> T {
        let r = f - self.project(f);
        self.space.norm(&r)
    }

    /// Largest entry of `Fᴴ G F − I`.
    pub fn orthonormality_defect(&self) -> T {
        let g = self.space.gram(&self.frame, &self.frame);
        let mut worst = T::zero();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { creal(T::one()) } else { creal(T::zero()) };
                worst = worst.max(cabs(g[(i, j)] - target));
            }
        }
        worst
    }

    pub fn same_space(&self, other: &Self) -> Result<()> {
        same_space(&self.space, &other.space)
    }
}

/// Weighted Gram–Schmidt (with one reorthogonalization pass) over the columns of `raw`,
/// dropping columns whose residual norm falls below `1e-10` times the largest input norm.
pub fn orthonormalize<T: Real>(space: Arc<WeightedSpace<T>>, raw: &CMat<T>) -> Result<Subspace<T>> {
    check_dim(space.dim(), raw.nrows())?;
    let norms: Vec<T> = raw.column_iter().map(|c| space.norm(&c.into_owned())).collect();
    let max = norms.iter().fold(T::zero(), |m, &x| m.max(x));
    if max == T::zero() {
        return invalid("cannot orthonormalize an all-zero family");
    }
    let tol = T::lit(1e-10) * max;
    let mut kept: Vec<CVec<T>> = Vec::new();
    for col in raw.column_iter() {
        let mut v = col.into_owned();
        for _ in 0..2 {
            for q in &kept {
                let c = space.inner_unchecked(v.as_slice(), q.as_slice());
                v.axpy(-c, q, creal(T::one()));
            }
        }
        let nv = space.norm(&v);
        if nv > tol {
            v.iter_mut().for_each(|z| *z /= nv);
            kept.push(v);
        }
    }
    let frame = CMat::from_columns(&kept);
    Ok(Subspace { frame, space })
}

/// Cosines of the principal angles between two subspaces, largest first.
pub fn principal_cosines<T: Real>(a: &Subspace<T>, b: &Subspace<T>) -> Result<Vec<T>> {
    a.same_space(b)?;
    let m = a.space.gram(&a.frame, &b.frame);
    let svd = nalgebra::SVD::new(m, false, false);
    let mut s: Vec<T> = svd.singular_values.iter().map(|&x| x.min(T::one())).collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    Ok(s)
}

/// Angle between the lines spanned by `u` and `v`, computed through the sine
/// so that small angles are resolved.
pub fn line_angle<T: Real>(space: &WeightedSpace<T>, u: &CVec<T>, v: &CVec<T>) -> Result<T> {
    let nu = space.norm(u);
    let nv = space.norm(v);
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::Numerical("angle with a zero vector".into()));
    }
    let uh = u.map(|z| z / nu);
    let vh = v.map(|z| z / nv);
    let c = space.inner(&vh, &uh)?;
    let r = &vh - uh.map(|z| z * c);
    Ok(space.norm(&r).atan2(cabs(c)))
}
