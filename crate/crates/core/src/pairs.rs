//! Discretized admissible pairs `(D, V)`: the classical Volterra operator,
//! Schrödinger Cauchy-data operators, canonical systems and the
//! removable-spectrum example.
//!
//! `V` is a dense operator on a weighted space, `phi0` spans `ker D`, and
//! `apply_d` inverts `V` on `Ran V ⊕ span phi0`.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_volterra, check_regular_ends, detect_singular_intervals, kdb_type, Hamiltonian};
use crate::error::{check_dim, invalid, Error, Result};
use crate::grid::{CMat, CVec, DenseOperator, Grid, WeightedSpace};
use crate::scalar::{cabs, cplx, creal, Real, C};

const DOMAIN_TOL: f64 = 1e-8;
const BLOCK_SINGULAR: f64 = 1e-10;
const PHI_RESCALE: f64 = 1e100;
const WRONSKIAN_TOL: f64 = 1e-6;
const RK4_SUBSTEPS: usize = 4;
const WINDOW_PERIODS: f64 = 40.0;
const WINDOW_RESOLUTION: f64 = 0.5;
const RANK_ONE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Classical,
    Schrodinger,
    Canonical,
    Removable,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Classical => "classical",
            Family::Schrodinger => "schrodinger",
            Family::Canonical => "canonical",
            Family::Removable => "removable",
        }
    }
}

/// Eigenvalue of the self-adjoint restriction with a unit eigenvector.
#[derive(Debug, Clone)]
pub struct EigenPair<T: Real> {
    pub lambda: T,
    pub vector: CVec<T>,
}

/// Which preimage `apply_d` returns when `V` has a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representative {
    /// Weighted-orthogonal to `ker V`.
    MinNorm,
    /// Vanishing at the given node (trapezoid families only).
    Anchored(usize),
}

type Block<T> = [C<T>; 4];

fn zero<T: Real>() -> C<T> {
    creal(T::zero())
}

fn block_mul<T: Real>(b: &Block<T>, v: [C<T>; 2], fb: usize) -> [C<T>; 2] {
    if fb == 1 {
        [b[0] * v[0], zero()]
    } else {
        [b[0] * v[0] + b[1] * v[1], b[2] * v[0] + b[3] * v[1]]
    }
}

/// Inverse of an invertible block, pseudo-inverse of a singular one.
fn block_pinv<T: Real>(b: &Block<T>, fb: usize) -> Result<Block<T>> {
    if fb == 1 {
        if cabs(b[0]) == T::zero() {
            return Err(Error::Singular("zero integrand block".into()));
        }
        return Ok([creal(T::one()) / b[0], zero(), zero(), zero()]);
    }
    let scale = b.iter().fold(T::zero(), |m, z| m.max(cabs(*z)));
    if scale == T::zero() {
        return Ok([zero(); 4]);
    }
    let det = b[0] * b[3] - b[1] * b[2];
    if cabs(det) > T::lit(BLOCK_SINGULAR) * scale * scale {
        return Ok([b[3] / det, -b[1] / det, -b[2] / det, b[0] / det]);
    }
    let m = DMatrix::from_row_slice(2, 2, b);
    let p = m
        .pseudo_inverse(T::lit(BLOCK_SINGULAR) * scale)
        .map_err(|e| Error::Numerical(format!("block pseudo-inverse: {e}")))?;
    Ok([p[(0, 0)], p[(0, 1)], p[(1, 0)], p[(1, 1)]])
}

/// Solves `(I − μ B) x = r` for a block `B`.
fn block_shifted_solve<T: Real>(b: &Block<T>, mu: C<T>, r: [C<T>; 2], fb: usize) -> Result<[C<T>; 2]> {
    let one = creal(T::one());
    if fb == 1 {
        let d = one - mu * b[0];
        if cabs(d) < T::lit(1e-12) {
            return Err(Error::Numerical("near-singular diagonal block in forward substitution".into()));
        }
        return Ok([r[0] / d, zero()]);
    }
    let (a11, a12, a21, a22) = (one - mu * b[0], -mu * b[1], -mu * b[2], one - mu * b[3]);
    let det = a11 * a22 - a12 * a21;
    let scale = cabs(a11).max(cabs(a12)).max(cabs(a21)).max(cabs(a22));
    if cabs(det) < T::lit(1e-12) * scale * scale {
        return Err(Error::Numerical("near-singular diagonal block in forward substitution".into()));
    }
    Ok([(a22 * r[0] - a12 * r[1]) / det, (a11 * r[1] - a21 * r[0]) / det])
}

fn node<T: Real>(v: &CVec<T>, j: usize, fb: usize) -> [C<T>; 2] {
    if fb == 1 {
        [v[j], zero()]
    } else {
        [v[2 * j], v[2 * j + 1]]
    }
}

fn set_node<T: Real>(v: &mut CVec<T>, j: usize, fb: usize, x: [C<T>; 2]) {
    for r in 0..fb {
        v[j * fb + r] = x[r];
    }
}

/// `D` for operators `V f(t_k) = Σ_j c_{kj} M_j f_j` built by cumulative trapezoid quadrature.
#[derive(Debug, Clone)]
struct TrapezoidSolver<T: Real> {
    fiber: usize,
    steps: Vec<T>,
    blocks: Vec<Block<T>>,
    pinv: Vec<Block<T>>,
    kernel: CMat<T>,
    kernel_gram_inv: CMat<T>,
}

impl<T: Real> TrapezoidSolver<T> {
    fn new(space: &WeightedSpace<T>, blocks: Vec<Block<T>>) -> Result<Self> {
        let grid = space.grid();
        let (n, fb) = (grid.len(), space.fiber());
        check_dim(n, blocks.len())?;
        let steps = (0..n).map(|k| if k == 0 { T::zero() } else { grid.step(k) }).collect();
        let pinv = blocks.iter().map(|b| block_pinv(b, fb)).collect::<Result<Vec<_>>>()?;
        // Sawtooth kernel: M_j f_j = (−1)^j e_r.
        let mut kernel = CMat::from_element(n * fb, fb, zero());
        for (j, p) in pinv.iter().enumerate() {
            let sign = if j % 2 == 0 { T::one() } else { -T::one() };
            for r in 0..fb {
                let mut e = [zero(); 2];
                e[r] = creal(sign);
                let x = block_mul(p, e, fb);
                for s in 0..fb {
                    kernel[(j * fb + s, r)] = x[s];
                }
            }
        }
        let gram = space.gram(&kernel, &kernel);
        let tol = T::lit(1e-14) * gram.norm().max(T::tiny());
        let kernel_gram_inv = gram
            .pseudo_inverse(tol)
            .map_err(|e| Error::Numerical(format!("kernel Gram inverse: {e}")))?;
        Ok(Self { fiber: fb, steps, blocks, pinv, kernel, kernel_gram_inv })
    }

    /// Preimage under `V` of `u` (which must vanish at the first node).
    fn solve(&self, space: &WeightedSpace<T>, u: &CVec<T>, rep: Representative) -> Result<CVec<T>> {
        let (fb, n) = (self.fiber, self.steps.len());
        let mut f = CVec::from_element(n * fb, zero());
        let mut g = [zero(); 2];
        let mut g_at = vec![[zero(); 2]; n];
        for k in 1..n {
            let (uk, up) = (node(u, k, fb), node(u, k - 1, fb));
            let two_h = creal(T::lit(2.0) / self.steps[k]);
            for r in 0..fb {
                g[r] = (uk[r] - up[r]) * two_h - g[r];
            }
            g_at[k] = g;
            set_node(&mut f, k, fb, block_mul(&self.pinv[k], g, fb));
        }
        let s = match rep {
            Representative::MinNorm => {
                let c = self.kernel.adjoint() * space.metric_apply(&f);
                -(&self.kernel_gram_inv * c)
            }
            Representative::Anchored(m) => {
                if m >= n {
                    return invalid(format!("anchor node {m} outside the grid"));
                }
                let sign = if m % 2 == 0 { T::one() } else { -T::one() };
                CVec::from_fn(fb, |r, _| -g_at[m][r] * sign)
            }
        };
        f += &self.kernel * s;
        Ok(f)
    }

    /// Discrete `(I − λV)^{-1} p` by the trapezoid recurrence, with a log scale.
    fn phi(&self, p: &CVec<T>, lambda: C<T>) -> Result<(CVec<T>, T)> {
        let (fb, n) = (self.fiber, self.steps.len());
        let mut f = CVec::from_element(n * fb, zero());
        let mut log_scale = T::zero();
        let mut unit = T::one();
        set_node(&mut f, 0, fb, node(p, 0, fb));
        let mut s = [zero(); 2];
        for k in 1..n {
            let half = creal(self.steps[k] * T::lit(0.5));
            let pk = node(p, k, fb).map(|z| z * unit);
            let prev = block_mul(&self.blocks[k - 1], node(&f, k - 1, fb), fb);
            let cur = block_mul(&self.blocks[k], pk, fb);
            let rhs = [s[0] + half * (prev[0] + cur[0]), s[1] + half * (prev[1] + cur[1])];
            s = block_shifted_solve(&self.blocks[k], lambda * half, rhs, fb)?;
            let fk = [pk[0] + lambda * s[0], pk[1] + lambda * s[1]];
            set_node(&mut f, k, fb, fk);
            let mag = cabs(fk[0]).max(cabs(fk[1])).max(cabs(s[0])).max(cabs(s[1]));
            if !mag.is_finite() {
                return Err(Error::Numerical("overflow in the eigenvector recurrence".into()));
            }
            if mag > T::lit(PHI_RESCALE) {
                let r = T::one() / mag;
                f.iter_mut().for_each(|z| *z *= r);
                s = s.map(|z| z * r);
                unit *= r;
                log_scale += mag.ln();
            }
        }
        Ok((f, log_scale))
    }
}

/// `D` realized through the inverse of a two-point Green matrix on its active nodes.
#[derive(Debug, Clone)]
struct GreenSolver<T: Real> {
    a: DMatrix<T>,
    active: Vec<usize>,
    inactive: Vec<usize>,
    end: usize,
    lu: OnceLock<Option<LU<T, Dyn, Dyn>>>,
}

impl<T: Real> GreenSolver<T> {
    fn factor(&self) -> Result<&LU<T, Dyn, Dyn>> {
        self.lu
            .get_or_init(|| {
                let m = self.active.len();
                let sub = DMatrix::from_fn(m, m, |i, j| self.a[(self.active[i], self.active[j])]);
                let lu = sub.lu();
                if lu.is_invertible() {
                    Some(lu)
                } else {
                    None
                }
            })
            .as_ref()
            .ok_or_else(|| Error::Singular("Green matrix is singular on its active nodes".into()))
    }

    fn solve(&self, r: &CVec<T>) -> Result<CVec<T>> {
        let lu = self.factor()?;
        let m = self.active.len();
        let re = DVector::from_fn(m, |i, _| r[self.active[i]].re);
        let im = DVector::from_fn(m, |i, _| r[self.active[i]].im);
        let (xr, xi) = match (lu.solve(&re), lu.solve(&im)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Singular("Green matrix solve failed".into())),
        };
        let mut u = CVec::from_element(r.len(), zero());
        for (i, &k) in self.active.iter().enumerate() {
            u[k] = cplx(xr[i], xi[i]);
        }
        let scale = r.iter().fold(T::zero(), |m, z| m.max(cabs(*z)));
        for &k in &self.inactive {
            let mut acc = r[k];
            for (i, &j) in self.active.iter().enumerate() {
                acc -= cplx(xr[i], xi[i]) * self.a[(k, j)];
            }
            if cabs(acc) > T::lit(DOMAIN_TOL) * scale.max(T::tiny()) {
                return Err(Error::Domain(format!("input violates the boundary condition at node {k}")));
            }
        }
        Ok(u)
    }
}

#[derive(Debug, Clone)]
enum DomainSolver<T: Real> {
    Trapezoid(TrapezoidSolver<T>),
    Green(GreenSolver<T>),
}

/// Sampled potential `q`, linearly interpolated between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential<T: Real> {
    points: Vec<T>,
    values: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialRecord {
    pub t: f64,
    pub q: f64,
}

impl<T: Real> Potential<T> {
    pub fn from_samples(points: Vec<T>, values: Vec<T>) -> Result<Self> {
        check_dim(points.len(), values.len())?;
        if points.len() < 2 {
            return invalid("potential needs at least two samples");
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("potential sample points must be strictly increasing");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("potential values must be finite");
        }
        Ok(Self { points, values })
    }

    pub fn from_fn(grid: &Grid<T>, q: impl Fn(T) -> T) -> Result<Self> {
        Self::from_samples(grid.points().to_vec(), grid.points().iter().map(|&t| q(t)).collect())
    }

    pub fn from_records(records: &[PotentialRecord]) -> Result<Self> {
        Self::from_samples(
            records.iter().map(|r| T::lit(r.t)).collect(),
            records.iter().map(|r| T::lit(r.q)).collect(),
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let records: Vec<PotentialRecord> = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_records(&records)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Parse(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json_str(&s)
    }

    /// Value at `t`, constant beyond the end samples.
    pub fn eval(&self, t: T) -> T {
        let p = &self.points;
        let k = p.partition_point(|&x| x < t).clamp(1, p.len() - 1);
        let s = ((t - p[k - 1]) / (p[k] - p[k - 1])).max(T::zero()).min(T::one());
        self.values[k - 1] + s * (self.values[k] - self.values[k - 1])
    }

    pub fn sample(&self, grid: &Grid<T>) -> Vec<T> {
        grid.points().iter().map(|&t| self.eval(t)).collect()
    }
}

/// Fundamental solutions of `−u'' + q u = 0` and the boundary data of a Schrödinger pair.
#[derive(Debug, Clone)]
pub struct SchrodingerData<T: Real> {
    grid: Grid<T>,
    q: Vec<T>,
    alpha: T,
    /// `u(a) = 0, u'(a) = 1`, stored as `[u, u']` per node.
    u: Vec<[T; 2]>,
    /// `v(a) = 1, v'(a) = 0`.
    v: Vec<[T; 2]>,
    wronskian: T,
    wronskian_drift: T,
}

fn rk4_second_order<T: Real>(grid: &Grid<T>, q: &[T], init: [T; 2]) -> Vec<[T; 2]> {
    let n = grid.len();
    let m = T::from_usize(RK4_SUBSTEPS).unwrap();
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(n);
    let mut y = init;
    out.push(y);
    for k in 1..n {
        let h = grid.step(k) / m;
        let (q0, q1) = (q[k - 1], q[k]);
        let qa = |s: T| q0 + s * (q1 - q0);
        let rhs = |s: T, y: [T; 2]| [y[1], qa(s) * y[0]];
        for sub in 0..RK4_SUBSTEPS {
            let s0 = T::from_usize(sub).unwrap() / m;
            let ds = T::one() / m;
            let k1 = rhs(s0, y);
            let k2 = rhs(s0 + half * ds, [y[0] + half * h * k1[0], y[1] + half * h * k1[1]]);
            let k3 = rhs(s0 + half * ds, [y[0] + half * h * k2[0], y[1] + half * h * k2[1]]);
            let k4 = rhs(s0 + ds, [y[0] + h * k3[0], y[1] + h * k3[1]]);
            let sixth = h / T::lit(6.0);
            y = [
                y[0] + sixth * (k1[0] + T::lit(2.0) * (k2[0] + k3[0]) + k4[0]),
                y[1] + sixth * (k1[1] + T::lit(2.0) * (k2[1] + k3[1]) + k4[1]),
            ];
        }
        out.push(y);
    }
    out
}

impl<T: Real> SchrodingerData<T> {
    /// Integrates the fundamental solutions on `grid` with `q` sampled at its nodes.
    pub fn new(grid: Grid<T>, q: Vec<T>, alpha: T) -> Result<Self> {
        check_dim(grid.len(), q.len())?;
        if q.iter().any(|x| !x.is_finite()) || !alpha.is_finite() {
            return invalid("potential and boundary angle must be finite");
        }
        let u = rk4_second_order(&grid, &q, [T::zero(), T::one()]);
        let v = rk4_second_order(&grid, &q, [T::one(), T::zero()]);
        if u.iter().chain(&v).any(|y| !(y[0].is_finite() && y[1].is_finite())) {
            return Err(Error::Numerical("fundamental solutions overflowed".into()));
        }
        let w = |k: usize| u[k][0] * v[k][1] - u[k][1] * v[k][0];
        let wronskian = w(0);
        if wronskian == T::zero() {
            return Err(Error::Singular("zero Wronskian".into()));
        }
        let wronskian_drift = (0..grid.len()).fold(T::zero(), |m, k| m.max(((w(k) - wronskian) / wronskian).abs()));
        if wronskian_drift > T::lit(WRONSKIAN_TOL) {
            return Err(Error::Numerical(format!("Wronskian drifts by {wronskian_drift:?} along the grid")));
        }
        Ok(Self { grid, q, alpha, u, v, wronskian, wronskian_drift })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn potential(&self) -> &[T] {
        &self.q
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn wronskian(&self) -> T {
        self.wronskian
    }

    /// Largest relative deviation of `W(u, v)` from its value at `a`.
    pub fn wronskian_drift(&self) -> T {
        self.wronskian_drift
    }

    /// `[u, u']` at node `k` for the solution with `u(a) = 0, u'(a) = 1`.
    pub fn u_at(&self, k: usize) -> [T; 2] {
        self.u[k]
    }

    /// `[v, v']` at node `k` for the solution with `v(a) = 1, v'(a) = 0`.
    pub fn v_at(&self, k: usize) -> [T; 2] {
        self.v[k]
    }

    /// Solution of `Du = 0` satisfying `u(a) cos α − u'(a) sin α = 0`.
    pub fn left_solution(&self, k: usize) -> [T; 2] {
        let (s, c) = (self.alpha.sin(), self.alpha.cos());
        [s * self.v[k][0] + c * self.u[k][0], s * self.v[k][1] + c * self.u[k][1]]
    }

    /// Solution of `Du = 0` vanishing at `b`.
    pub fn right_solution(&self, k: usize) -> [T; 2] {
        let e = self.grid.len() - 1;
        let (ub, vb) = (self.u[e][0], self.v[e][0]);
        [vb * self.u[k][0] - ub * self.v[k][0], vb * self.u[k][1] - ub * self.v[k][1]]
    }

    /// Kernel `(u(x)v(t) − u(t)v(x)) / W` of the Cauchy-data operator.
    pub fn cauchy_kernel(&self, k: usize, j: usize) -> T {
        (self.u[k][0] * self.v[j][0] - self.u[j][0] * self.v[k][0]) / self.wronskian
    }

    /// Green function of `D` with the α-condition at `a` and Dirichlet at `b`.
    pub fn green(&self, k: usize, j: usize) -> Result<T> {
        let e = self.grid.len() - 1;
        let w = -self.wronskian * self.left_solution(e)[0];
        if w == T::zero() {
            return Err(Error::Singular("0 is an eigenvalue of the two-point problem".into()));
        }
        let (lo, hi) = if j <= k { (j, k) } else { (k, j) };
        Ok(-self.left_solution(lo)[0] * self.right_solution(hi)[0] / w)
    }

    fn check_two_point(&self) -> Result<()> {
        let e = self.grid.len() - 1;
        let scale = (0..=e).fold(T::zero(), |m, k| m.max(self.left_solution(k)[0].abs()));
        if self.left_solution(e)[0].abs() < T::lit(1e-10) * scale {
            return Err(Error::Singular(
                "left solution vanishes at b: 0 is an eigenvalue, the two-point Wronskian is zero".into(),
            ));
        }
        Ok(())
    }

    /// Weighted Cauchy-data matrix `V_{kj} = w_j K(t_k, t_j)` for `j < k`.
    fn cauchy_matrix(&self) -> DMatrix<T> {
        let n = self.grid.len();
        let w = self.grid.weights();
        DMatrix::from_fn(n, n, |k, j| if j < k { w[j] * self.cauchy_kernel(k, j) } else { T::zero() })
    }

    /// Weighted Green matrix `A_{kj} = w_j G(t_k, t_j)`.
    fn green_matrix(&self) -> Result<DMatrix<T>> {
        self.check_two_point()?;
        let n = self.grid.len();
        let w = self.grid.weights();
        let mut a = DMatrix::zeros(n, n);
        for k in 0..n {
            for j in 0..n {
                a[(k, j)] = w[j] * self.green(k, j)?;
            }
        }
        Ok(a)
    }

    fn dirichlet_at_a(&self) -> bool {
        self.alpha.sin().abs() < T::lit(1e-12)
    }
}

/// A discretized admissible pair.
#[derive(Debug, Clone)]
pub struct AdmissiblePair<T: Real> {
    family: Family,
    space: Arc<WeightedSpace<T>>,
    v: DenseOperator<T>,
    phi0: CVec<T>,
    eig: Vec<EigenPair<T>>,
    solver: DomainSolver<T>,
    restriction: String,
    hamiltonian: Option<Arc<Hamiltonian<T>>>,
    schrodinger: Option<Arc<SchrodingerData<T>>>,
}

impl<T: Real> AdmissiblePair<T> {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn space(&self) -> &Arc<WeightedSpace<T>> {
        &self.space
    }

    pub fn grid(&self) -> &Grid<T> {
        self.space.grid()
    }

    pub fn v(&self) -> &DenseOperator<T> {
        &self.v
    }

    pub fn phi0(&self) -> &CVec<T> {
        &self.phi0
    }

    pub fn eig(&self) -> &[EigenPair<T>] {
        &self.eig
    }

    /// Description of the self-adjoint restriction that produced `eig`.
    pub fn restriction(&self) -> &str {
        &self.restriction
    }

    pub fn hamiltonian(&self) -> Option<&Arc<Hamiltonian<T>>> {
        self.hamiltonian.as_ref()
    }

    pub fn schrodinger(&self) -> Option<&Arc<SchrodingerData<T>>> {
        self.schrodinger.as_ref()
    }

    /// `D w` for `w ∈ Ran V ⊕ span phi0`, choosing the preimage orthogonal to `ker V`.
    pub fn apply_d(&self, w: &CVec<T>) -> Result<CVec<T>> {
        self.apply_d_with(w, Representative::MinNorm)
    }

    /// `D w` with an explicit choice of preimage. Green-matrix families always return
    /// the preimage vanishing at their boundary nodes.
    pub fn apply_d_with(&self, w: &CVec<T>, rep: Representative) -> Result<CVec<T>> {
        self.space.check(w)?;
        match &self.solver {
            DomainSolver::Trapezoid(s) => {
                let fb = s.fiber;
                let p = node(&self.phi0, 0, fb);
                let w0 = node(w, 0, fb);
                let (mut num, mut den) = (zero::<T>(), zero::<T>());
                for r in 0..fb {
                    num += p[r].conj() * w0[r];
                    den += p[r].conj() * p[r];
                }
                let c = num / den;
                let u = w - self.phi0.map(|z| z * c);
                let scale = w.iter().fold(T::zero(), |m, z| m.max(cabs(*z)));
                let u0 = node(&u, 0, fb);
                if cabs(u0[0]).max(cabs(u0[1])) > T::lit(DOMAIN_TOL) * scale {
                    return Err(Error::Domain("input is not in Ran V ⊕ span phi0 at the left end".into()));
                }
                s.solve(&self.space, &u, rep)
            }
            DomainSolver::Green(g) => {
                let c = w[g.end] / self.phi0[g.end];
                let r = w - self.phi0.map(|z| z * c);
                g.solve(&r)
            }
        }
    }

    /// Discrete `(I − λV)^{-1} phi0` by the trapezoid recurrence, as `(vector, log scale)`;
    /// `None` for families without a recurrence.
    pub fn phi_recurrence(&self, lambda: C<T>) -> Option<Result<(CVec<T>, T)>> {
        match &self.solver {
            DomainSolver::Trapezoid(s) => Some(s.phi(&self.phi0, lambda)),
            DomainSolver::Green(_) => None,
        }
    }

    /// Dimension of the weight-visible kernel of `V` handled by `apply_d`.
    pub fn kernel_basis(&self) -> CMat<T> {
        match &self.solver {
            DomainSolver::Trapezoid(s) => s.kernel.clone(),
            DomainSolver::Green(g) => {
                let mut m = CMat::from_element(self.space.dim(), g.inactive.len(), zero());
                for (c, &k) in g.inactive.iter().enumerate() {
                    m[(k, c)] = creal(T::one());
                }
                m
            }
        }
    }

    /// Component of `f` orthogonal to the kernel basis.
    pub fn project_off_kernel(&self, f: &CVec<T>) -> CVec<T> {
        let k = self.kernel_basis();
        let gram = self.space.gram(&k, &k);
        let c = self.space.gram(&k, &CMat::from_column_slice(f.len(), 1, f.as_slice()));
        let tol = T::lit(1e-14) * gram.norm();
        let inv = gram.clone().pseudo_inverse(tol).unwrap_or(gram);
        let coeff = inv * c;
        f - &k * coeff.column(0)
    }

    pub fn to_bundle(&self) -> PairBundle {
        let g = self.grid();
        let f64s = |v: &CVec<T>| (v.iter().map(|z| z.re.as_f64()).collect(), v.iter().map(|z| z.im.as_f64()).collect());
        let m = self.v.matrix();
        let n = m.nrows();
        let (phi0_re, phi0_im) = f64s(&self.phi0);
        let weight_field = (0..g.len()).flat_map(|j| self.space.weight_at(j).iter().map(|x| x.as_f64()).collect::<Vec<_>>()).collect();
        PairBundle {
            family: self.family,
            restriction: self.restriction.clone(),
            fiber: self.space.fiber(),
            points: g.points().iter().map(|x| x.as_f64()).collect(),
            weights: g.weights().iter().map(|x| x.as_f64()).collect(),
            weight_field,
            v_re: (0..n * n).map(|i| m[(i / n, i % n)].re.as_f64()).collect(),
            v_im: (0..n * n).map(|i| m[(i / n, i % n)].im.as_f64()).collect(),
            phi0_re,
            phi0_im,
            eigenvalues: self.eig.iter().map(|e| e.lambda.as_f64()).collect(),
            eigenvectors: self
                .eig
                .iter()
                .map(|e| {
                    let (re, im) = f64s(&e.vector);
                    EigenRecord { re, im }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenRecord {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

/// Serializable snapshot of a realization: grid, weights, `V` (row-major), `phi0` and eigendata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBundle {
    pub family: Family,
    pub restriction: String,
    pub fiber: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub weight_field: Vec<f64>,
    pub v_re: Vec<f64>,
    pub v_im: Vec<f64>,
    pub phi0_re: Vec<f64>,
    pub phi0_im: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<EigenRecord>,
}

fn normalized<T: Real>(space: &WeightedSpace<T>, v: CVec<T>) -> Result<CVec<T>> {
    let nv = space.norm(&v);
    if !(nv > T::zero()) || !nv.is_finite() {
        return Err(Error::Numerical("cannot normalize a zero vector".into()));
    }
    Ok(v.map(|z| z / nv))
}

/// `V f(x) = i ∫_a^x f` on `(a, b)` with the periodic restriction, `K = n/4`.
pub fn classical_pair<T: Real>(a: T, b: T, n: usize) -> Result<AdmissiblePair<T>> {
    classical_pair_with(a, b, n, n / 4)
}

/// Classical pair keeping the periodic eigenpairs with `|k| ≤ k_max`.
pub fn classical_pair_with<T: Real>(a: T, b: T, n: usize, k_max: usize) -> Result<AdmissiblePair<T>> {
    let grid = Grid::uniform(a, b, n)?;
    if 4 * k_max > n {
        return invalid(format!("k_max = {k_max} exceeds n/4"));
    }
    let space = Arc::new(WeightedSpace::scalar(grid.clone()));
    let i = cplx(T::zero(), T::one());
    let v = DenseOperator::new(space.clone(), grid.cumulative_trapezoid().map(|x| i * x))?;
    let len = grid.length();
    let phi0 = CVec::from_element(n, creal(T::one() / len.sqrt()));
    let h = len / T::from_usize(n - 1).unwrap();
    let cells = T::from_usize(n - 1).unwrap();
    let mut eig = Vec::with_capacity(2 * k_max + 1);
    for k in -(k_max as i64)..=(k_max as i64) {
        let theta = T::two_pi() * T::from_i64(k).unwrap() / cells;
        let lambda = T::lit(2.0) / h * (theta / T::lit(2.0)).tan();
        let vector = CVec::from_fn(n, |j, _| {
            let ph = theta * T::from_usize(j).unwrap();
            cplx(ph.cos(), ph.sin()) / len.sqrt()
        });
        eig.push(EigenPair { lambda, vector });
    }
    let solver = DomainSolver::Trapezoid(TrapezoidSolver::new(&space, vec![[i, zero(), zero(), zero()]; n])?);
    Ok(AdmissiblePair {
        family: Family::Classical,
        space,
        v,
        phi0,
        eig,
        solver,
        restriction: "periodic: f(a) = f(b)".into(),
        hamiltonian: None,
        schrodinger: None,
    })
}

fn sturm_count<T: Real>(d: &[T], e: &[T], x: T) -> usize {
    let tiny = T::tiny().sqrt();
    let mut count = 0;
    let mut q = d[0] - x;
    for i in 0..d.len() {
        if i > 0 {
            q = d[i] - x - e[i - 1] * e[i - 1] / q;
        }
        if q == T::zero() {
            q = -tiny;
        }
        if q < T::zero() {
            count += 1;
        }
    }
    count
}

/// Lowest `k` eigenpairs of the symmetric tridiagonal matrix `(d, e)`.
fn tridiagonal_lowest<T: Real>(d: &[T], e: &[T], k: usize) -> Vec<(T, Vec<T>)> {
    let m = d.len();
    let mut lo = T::max_value().unwrap();
    let mut hi = T::min_value().unwrap();
    for i in 0..m {
        let r = if i > 0 { e[i - 1].abs() } else { T::zero() } + if i + 1 < m { e[i].abs() } else { T::zero() };
        lo = lo.min(d[i] - r);
        hi = hi.max(d[i] + r);
    }
    let eps = T::default_epsilon();
    let mut out = Vec::with_capacity(k);
    for idx in 0..k.min(m) {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let mid = (a + b) * T::lit(0.5);
            if sturm_count(d, e, mid) > idx {
                b = mid;
            } else {
                a = mid;
            }
            if b - a <= T::lit(4.0) * eps * a.abs().max(b.abs()).max(T::one()) {
                break;
            }
        }
        let lambda = (a + b) * T::lit(0.5);
        out.push((lambda, inverse_iteration(d, e, lambda)));
    }
    out
}

fn inverse_iteration<T: Real>(d: &[T], e: &[T], lambda: T) -> Vec<T> {
    let m = d.len();
    let shift = lambda + T::lit(1e-10) * lambda.abs().max(T::one()) * T::default_epsilon().sqrt();
    let mut x: Vec<T> = (0..m).map(|i| T::one() + T::lit(0.1) * T::from_usize(i % 5).unwrap()).collect();
    let tiny = T::default_epsilon() * (lambda.abs() + T::one());
    for _ in 0..4 {
        // Thomas algorithm on (S − shift I) y = x.
        let mut c = vec![T::zero(); m];
        let mut y = vec![T::zero(); m];
        let mut piv = d[0] - shift;
        if piv.abs() < tiny {
            piv = tiny;
        }
        c[0] = if m > 1 { e[0] / piv } else { T::zero() };
        y[0] = x[0] / piv;
        for i in 1..m {
            let mut p = d[i] - shift - e[i - 1] * c[i - 1];
            if p.abs() < tiny {
                p = tiny;
            }
            if i + 1 < m {
                c[i] = e[i] / p;
            }
            y[i] = (x[i] - e[i - 1] * y[i - 1]) / p;
        }
        for i in (0..m - 1).rev() {
            let next = y[i + 1];
            y[i] -= c[i] * next;
        }
        let nrm = y.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        x = y.into_iter().map(|v| v / nrm).collect();
    }
    x
}

/// Finite-difference eigenpairs of `−d²/dx² + q` with the α-condition at `a` and Dirichlet at `b`,
/// orthonormal in the trapezoid weights and signed like `(I − λV)^{-1} phi0`.
fn schrodinger_eigenpairs<T: Real>(data: &SchrodingerData<T>, k_max: usize) -> Vec<EigenPair<T>> {
    let grid = data.grid();
    let n = grid.len();
    let h = grid.length() / T::from_usize(n - 1).unwrap();
    let h2 = h * h;
    let start = if data.dirichlet_at_a() { 1 } else { 0 };
    let nodes: Vec<usize> = (start..n - 1).collect();
    let m = nodes.len();
    let omega: Vec<T> = nodes.iter().map(|&k| grid.weights()[k]).collect();
    let two = T::lit(2.0);
    let mut d = Vec::with_capacity(m);
    let mut e = Vec::with_capacity(m.saturating_sub(1));
    for (i, &k) in nodes.iter().enumerate() {
        if k == 0 {
            let cot = data.alpha().cos() / data.alpha().sin();
            d.push(two / h2 + two * cot / h + data.potential()[0]);
        } else {
            d.push(two / h2 + data.potential()[k]);
        }
        if i + 1 < m {
            // Symmetrized off-diagonal sqrt(ω_i/ω_{i+1}) L_{i,i+1} with L_{01} = −2/h² at a Robin row.
            let l = if k == 0 { -two / h2 } else { -T::one() / h2 };
            e.push((omega[i] / omega[i + 1]).sqrt() * l);
        }
    }
    let (s, c) = (data.alpha().sin(), data.alpha().cos());
    tridiagonal_lowest(&d, &e, k_max)
        .into_iter()
        .map(|(lambda, y)| {
            let mut v = CVec::from_element(n, zero());
            for (i, &k) in nodes.iter().enumerate() {
                v[k] = creal(y[i] / omega[i].sqrt());
            }
            let slope = (v[1].re - v[0].re) / h;
            if v[0].re * s + slope * c < T::zero() {
                v.iter_mut().for_each(|z| *z = -*z);
            }
            EigenPair { lambda, vector: v }
        })
        .collect()
}

/// Schrödinger pair on `(a, b)`: `V` is the Cauchy-data Green operator of `−u'' + q u`,
/// `phi0` solves `Du = 0` with `u(a) cos α − u'(a) sin α = 0`; `K = n/4` eigenpairs.
pub fn schrodinger_pair<T: Real>(a: T, b: T, q: &Potential<T>, alpha: T, n: usize) -> Result<AdmissiblePair<T>> {
    schrodinger_pair_with(a, b, q, alpha, n, n / 4)
}

pub fn schrodinger_pair_with<T: Real>(
    a: T,
    b: T,
    q: &Potential<T>,
    alpha: T,
    n: usize,
    k_max: usize,
) -> Result<AdmissiblePair<T>> {
    let grid = Grid::uniform(a, b, n)?;
    let data = Arc::new(SchrodingerData::new(grid.clone(), q.sample(&grid), alpha)?);
    let space = Arc::new(WeightedSpace::scalar(grid));
    let v = DenseOperator::new(space.clone(), data.cauchy_matrix().map(creal))?;
    let raw = CVec::from_fn(n, |k, _| creal(data.left_solution(k)[0]));
    let phi0 = normalized(&space, raw)?;
    let green = data.green_matrix()?;
    let start = if data.dirichlet_at_a() { 1 } else { 0 };
    let active: Vec<usize> = (start..n - 1).collect();
    let inactive: Vec<usize> = (0..start).chain([n - 1]).collect();
    let solver = DomainSolver::Green(GreenSolver { a: green, active, inactive, end: n - 1, lu: OnceLock::new() });
    let eig = schrodinger_eigenpairs(&data, k_max);
    let restriction = if data.dirichlet_at_a() {
        "Dirichlet at both ends".to_string()
    } else {
        format!("u(a) cos α = u'(a) sin α with α = {:?}, Dirichlet at b", alpha.as_f64())
    };
    Ok(AdmissiblePair {
        family: Family::Schrodinger,
        space,
        v,
        phi0,
        eig,
        solver,
        restriction,
        hamiltonian: None,
        schrodinger: Some(data),
    })
}

/// Schrödinger pair with Dirichlet data together with the two-point Green operator `A`
/// and the rank-one factors of `V − A = ⟨·, x⟩ y`.
#[derive(Debug, Clone)]
pub struct RemovablePair<T: Real> {
    pub pair: AdmissiblePair<T>,
    pub a_op: DenseOperator<T>,
    pub x: CVec<T>,
    pub y: CVec<T>,
    /// Largest singular value of `V − A`.
    pub sigma1: T,
    /// Upper bound on the second singular value (Hilbert–Schmidt norm of the deflated difference).
    pub sigma2_bound: T,
}

impl<T: Real> RemovablePair<T> {
    pub fn rank_one_ratio(&self) -> T {
        self.sigma2_bound / self.sigma1
    }
}

/// Weighted Hilbert–Schmidt norm of an operator on a scalar weighted space.
pub fn hilbert_schmidt_norm<T: Real>(op: &DenseOperator<T>) -> Result<T> {
    let space = op.space();
    if space.fiber() != 1 {
        return invalid("Hilbert–Schmidt norm is implemented for scalar spaces");
    }
    let w = space.grid().weights();
    let m = op.matrix();
    let mut acc = T::zero();
    for j in 0..m.ncols() {
        for k in 0..m.nrows() {
            let z = cabs(m[(k, j)]);
            acc += w[k] * z * z / w[j];
        }
    }
    Ok(acc.sqrt())
}

/// The removable-spectrum example: `q`, Dirichlet at `a`, `A` Dirichlet at both ends.
pub fn removable_pair<T: Real>(a: T, b: T, q: &Potential<T>, n: usize) -> Result<RemovablePair<T>> {
    let mut pair = schrodinger_pair(a, b, q, T::zero(), n)?;
    pair.family = Family::Removable;
    let green = match &pair.solver {
        DomainSolver::Green(g) => g.a.map(creal),
        DomainSolver::Trapezoid(_) => unreachable!("Schrödinger pairs use the Green solver"),
    };
    let a_op = DenseOperator::new(pair.space.clone(), green)?;
    let diff = pair.v.sub(&a_op)?;
    let y = pair.phi0.clone();
    let x = diff.adjoint().apply(&y)?;
    let sigma1 = diff.norm();
    if sigma1 == T::zero() {
        return Err(Error::Numerical("V − A vanishes".into()));
    }
    let resid = diff.sub(&DenseOperator::rank_one(pair.space.clone(), &x, &y)?)?;
    let sigma2_bound = hilbert_schmidt_norm(&resid)?;
    if sigma2_bound / sigma1 >= T::lit(RANK_ONE_TOL) {
        return Err(Error::Numerical(format!(
            "V − A is not rank one: σ₂/σ₁ ≤ {:?}",
            (sigma2_bound / sigma1).as_f64()
        )));
    }
    Ok(RemovablePair { pair, a_op, x, y, sigma1, sigma2_bound })
}

/// Grid for a canonical pair: `n` uniform points on `[0, ℓ]` plus singular-interval endpoints.
fn canonical_grid<T: Real>(h: &Hamiltonian<T>, n: usize) -> Result<Grid<T>> {
    let base = Grid::uniform(T::zero(), h.ell(), n)?;
    let ends: Vec<T> = detect_singular_intervals(h).iter().flat_map(|iv| [iv.lo, iv.hi]).collect();
    let gap = T::lit(1e-6) * base.max_step();
    let mut pts: Vec<T> = base
        .points()
        .iter()
        .copied()
        .filter(|&p| p == T::zero() || p == h.ell() || ends.iter().all(|&e| (p - e).abs() > gap))
        .chain(ends.iter().copied().filter(|&e| e > T::zero() && e < h.ell()))
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite grid points"));
    pts.dedup();
    Grid::from_points(pts)
}

/// Real roots of the second component of the discrete `φ_λ(ℓ)` in `[−Λ, Λ]`.
fn theta_roots<T: Real>(solver: &TrapezoidSolver<T>, phi0: &CVec<T>, lambda_max: T, ell: T) -> Result<Vec<T>> {
    let last = phi0.len() - 1;
    let g = |l: T| -> Result<T> { Ok(solver.phi(phi0, creal(l))?.0[last].re) };
    let steps = (T::lit(16.0) * lambda_max * ell / T::pi()).ceil().to_usize().unwrap_or(400).clamp(400, 200_000);
    let dl = lambda_max / T::from_usize(steps).unwrap();
    let mut roots = vec![T::zero()];
    for sign in [T::one(), -T::one()] {
        let mut prev_l = sign * dl;
        let mut prev = g(prev_l)?;
        for i in 2..=steps {
            let l = sign * dl * T::from_usize(i).unwrap();
            let val = g(l)?;
            if val == T::zero() {
                roots.push(l);
            } else if (val < T::zero()) != (prev < T::zero()) && prev != T::zero() {
                let (mut a, mut b, mut fa) = (prev_l, l, prev);
                for _ in 0..200 {
                    let mid = (a + b) * T::lit(0.5);
                    let fm = g(mid)?;
                    if (fm < T::zero()) == (fa < T::zero()) {
                        a = mid;
                        fa = fm;
                    } else {
                        b = mid;
                    }
                    if (b - a).abs() <= T::lit(4.0) * T::default_epsilon() * b.abs().max(T::one()) {
                        break;
                    }
                }
                roots.push((a + b) * T::lit(0.5));
            }
            prev_l = l;
            prev = val;
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).expect("finite roots"));
    Ok(roots)
}

/// Real roots `λ` of `Θ₋(ℓ, λ)` for the discrete transfer recurrence of `H` sampled on `n` points.
pub fn canonical_eigenvalues<T: Real>(h: &Hamiltonian<T>, n: usize, lambda_max: T) -> Result<Vec<T>> {
    let hr = h.resample(canonical_grid(h, n)?)?;
    let space = hr.space()?;
    let phi0 = normalized(&space, CVec::from_fn(space.dim(), |i, _| creal(if i % 2 == 0 { T::one() } else { T::zero() })))?;
    let solver = TrapezoidSolver::new(&space, canonical_blocks(&hr))?;
    theta_roots(&solver, &phi0, lambda_max, hr.ell())
}

fn canonical_blocks<T: Real>(h: &Hamiltonian<T>) -> Vec<Block<T>> {
    h.entries().iter().map(|&[a, b, d]| [creal(b), creal(d), creal(-a), creal(-b)]).collect()
}

/// Canonical-system pair `V f = −Ω ∫_0^x H f` with the restriction `⟨f(ℓ), (0,1)ᵀ⟩ = 0`.
pub fn canonical_pair<T: Real>(h: &Hamiltonian<T>, n: usize) -> Result<AdmissiblePair<T>> {
    canonical_pair_with(h, n, None)
}

/// Canonical pair with an explicit eigenvalue window `|λ| ≤ Λ`; the default is `40π/τ(H)`,
/// clipped to `0.5 / max step`.
pub fn canonical_pair_with<T: Real>(h: &Hamiltonian<T>, n: usize, lambda_max: Option<T>) -> Result<AdmissiblePair<T>> {
    check_regular_ends(h)?;
    let hr = Arc::new(h.resample(canonical_grid(h, n)?)?);
    let space = Arc::new(hr.space()?);
    let v = canonical_volterra(&hr, space.clone())?;
    let raw = CVec::from_fn(space.dim(), |i, _| creal(if i % 2 == 0 { T::one() } else { T::zero() }));
    if space.norm(&raw) == T::zero() {
        return Err(Error::DegeneratePrefix("(1, 0)ᵀ has zero H-norm".into()));
    }
    let phi0 = normalized(&space, raw)?;
    let solver = TrapezoidSolver::new(&space, canonical_blocks(&hr))?;
    let clip = T::lit(WINDOW_RESOLUTION) / hr.grid().max_step();
    let tau = kdb_type(&hr, hr.ell())?;
    let window = match lambda_max {
        Some(l) if l > T::zero() => l,
        Some(l) => return invalid(format!("eigenvalue window must be positive, got {l:?}")),
        None if tau > T::zero() => (T::lit(WINDOW_PERIODS) * T::pi() / tau).min(clip),
        None => clip,
    };
    let roots = theta_roots(&solver, &phi0, window, hr.ell())?;
    if roots.len() < 2 {
        return Err(Error::Numerical(format!("no nonzero eigenvalues in the window |λ| ≤ {:?}", window.as_f64())));
    }
    let eig = roots
        .into_iter()
        .map(|lambda| {
            let (f, _) = solver.phi(&phi0, creal(lambda))?;
            Ok(EigenPair { lambda, vector: normalized(&space, f)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdmissiblePair {
        family: Family::Canonical,
        space,
        v,
        phi0,
        eig,
        solver: DomainSolver::Trapezoid(solver),
        restriction: "⟨f(ℓ), (0, 1)ᵀ⟩ = 0".into(),
        hamiltonian: Some(hr),
        schrodinger: None,
    })
}

/// Loads a pair bundle written by [`AdmissiblePair::to_bundle`].
pub fn load_bundle(s: &str) -> Result<PairBundle> {
    serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
}
