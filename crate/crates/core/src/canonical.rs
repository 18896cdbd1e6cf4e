//! Canonical systems `Ω X' = z H X` with a trace-normalized PSD Hamiltonian.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::grid::{sym2_eigen, CMat, DenseOperator, Grid, WeightedSpace};
use crate::scalar::{cabs, cexp, cln_abs, cplx, creal, Real, C};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Constant,
    RankOneField,
    User,
}

/// Sampled Hamiltonian on `[0, ℓ]`; entries are stored as `[h11, h12, h22]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian<T: Real> {
    grid: Grid<T>,
    entries: Vec<[T; 3]>,
    provenance: Provenance,
    angles: Option<Vec<T>>,
}

/// One row of the Hamiltonian file format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianRecord {
    pub t: f64,
    pub h11: f64,
    pub h12: f64,
    pub h22: f64,
}

const TRACE_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-9;
const ANGLE_TOL: f64 = 1e-9;
const DET_FLOOR: f64 = 1e-14;

fn rank_one_entries<T: Real>(theta: T) -> [T; 3] {
    let (s, c) = theta.sin_cos();
    [c * c, c * s, s * s]
}

impl<T: Real> Hamiltonian<T> {
    /// Validates samples on a grid starting at 0.
    pub fn from_samples(grid: Grid<T>, entries: Vec<[T; 3]>, provenance: Provenance) -> Result<Self> {
        check_dim(grid.len(), entries.len())?;
        if grid.a().abs() > T::lit(1e-12) {
            return invalid(format!("Hamiltonian grid must start at 0, starts at {:?}", grid.a()));
        }
        for (j, &[a, b, d]) in entries.iter().enumerate() {
            if ![a, b, d].iter().all(|x| x.is_finite()) {
                return invalid(format!("non-finite Hamiltonian entry at node {j}"));
            }
            if (a + d - T::one()).abs() > T::lit(TRACE_TOL) {
                return invalid(format!("Hamiltonian trace {:?} != 1 at node {j}", a + d));
            }
            if sym2_eigen(a, b, d).1 < -T::lit(TRACE_TOL) {
                return invalid(format!("Hamiltonian not PSD at node {j}"));
            }
        }
        Ok(Self { grid, entries, provenance, angles: None })
    }

    pub fn from_fn(grid: Grid<T>, f: impl Fn(T) -> [T; 3]) -> Result<Self> {
        let entries = grid.points().iter().map(|&t| f(t)).collect();
        Self::from_samples(grid, entries, Provenance::User)
    }

    /// Constant Hamiltonian on a uniform `n`-point grid of `[0, ℓ]`.
    pub fn constant(ell: T, n: usize, h: [T; 3]) -> Result<Self> {
        let grid = Grid::uniform(T::zero(), ell, n)?;
        let entries = vec![h; grid.len()];
        Self::from_samples(grid, entries, Provenance::Constant)
    }

    /// `H = I/2` on `[0, ℓ]`.
    pub fn half_identity(ell: T, n: usize) -> Result<Self> {
        let h = T::lit(0.5);
        Self::constant(ell, n, [h, T::zero(), h])
    }

    /// Rank-one field `H(t) = e_θ(t) e_θ(t)ᵀ` with `e_θ = (cos θ, sin θ)`.
    pub fn rank_one_field(grid: Grid<T>, angle: impl Fn(T) -> T) -> Result<Self> {
        let angles: Vec<T> = grid.points().iter().map(|&t| angle(t)).collect();
        let entries = angles.iter().map(|&a| rank_one_entries(a)).collect();
        let mut h = Self::from_samples(grid, entries, Provenance::RankOneField)?;
        h.angles = Some(angles);
        Ok(h)
    }

    pub fn from_records(records: &[HamiltonianRecord]) -> Result<Self> {
        let points = records.iter().map(|r| T::lit(r.t)).collect();
        let grid = Grid::from_points(points)?;
        let entries = records.iter().map(|r| [T::lit(r.h11), T::lit(r.h12), T::lit(r.h22)]).collect();
        Self::from_samples(grid, entries, Provenance::User)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let records: Vec<HamiltonianRecord> =
            serde_json::from_str(s).map_err(|e| Error::Parse(format!("Hamiltonian JSON: {e}")))?;
        Self::from_records(&records)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&s)
    }

    pub fn to_records(&self) -> Vec<HamiltonianRecord> {
        self.grid
            .points()
            .iter()
            .zip(&self.entries)
            .map(|(&t, &[a, b, d])| HamiltonianRecord { t: t.as_f64(), h11: a.as_f64(), h12: b.as_f64(), h22: d.as_f64() })
            .collect()
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn entries(&self) -> &[[T; 3]] {
        &self.entries
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn ell(&self) -> T {
        self.grid.b()
    }

    pub fn det_at(&self, j: usize) -> T {
        let [a, b, d] = self.entries[j];
        a * d - b * b
    }

    /// `√det H(t_j)`, with determinants at rounding level treated as zero.
    pub fn sqrt_det_at(&self, j: usize) -> T {
        let det = self.det_at(j);
        if det <= T::lit(DET_FLOOR) {
            T::zero()
        } else {
            det.sqrt()
        }
    }

    /// Value inside cell `k` (between nodes `k-1` and `k`) at fraction `s ∈ [0, 1]`.
    fn eval_cell(&self, k: usize, s: T) -> [T; 3] {
        match self.provenance {
            Provenance::Constant => self.entries[k],
            Provenance::RankOneField => {
                let th = self.angles.as_ref().expect("rank-one field keeps its angles");
                rank_one_entries(th[k - 1] + s * (th[k] - th[k - 1]))
            }
            Provenance::User => {
                let (p, q) = (self.entries[k - 1], self.entries[k]);
                [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1]), p[2] + s * (q[2] - p[2])]
            }
        }
    }

    /// Interpolated value at `t ∈ [0, ℓ]`.
    pub fn eval(&self, t: T) -> [T; 3] {
        let pts = self.grid.points();
        let k = pts.partition_point(|&p| p < t).clamp(1, pts.len() - 1);
        let s = ((t - pts[k - 1]) / (pts[k] - pts[k - 1])).max(T::zero()).min(T::one());
        self.eval_cell(k, s)
    }

    /// The same Hamiltonian sampled on another grid of `[0, ℓ]`.
    pub fn resample(&self, grid: Grid<T>) -> Result<Self> {
        if (grid.b() - self.ell()).abs() > T::lit(1e-12) * self.ell().max(T::one()) {
            return invalid("resampling grid must span the same interval");
        }
        let entries = grid.points().iter().map(|&t| self.eval(t)).collect();
        let angles = self
            .angles
            .as_ref()
            .map(|_| grid.points().iter().map(|&t| self.angle_at(t)).collect());
        let mut h = Self::from_samples(grid, entries, self.provenance)?;
        h.angles = angles;
        Ok(h)
    }

    fn angle_at(&self, t: T) -> T {
        let th = self.angles.as_ref().expect("angles present");
        let pts = self.grid.points();
        let k = pts.partition_point(|&p| p < t).clamp(1, pts.len() - 1);
        let s = ((t - pts[k - 1]) / (pts[k] - pts[k - 1])).max(T::zero()).min(T::one());
        th[k - 1] + s * (th[k] - th[k - 1])
    }

    /// Hamiltonian on `[0, ℓ₁ + ℓ₂]` following `self` by `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let shift = self.ell();
        let mut points = self.grid.points().to_vec();
        points.extend(other.grid.points()[1..].iter().map(|&t| t + shift));
        let mut entries = self.entries.clone();
        entries.extend_from_slice(&other.entries[1..]);
        let provenance = if self.provenance == other.provenance && self.provenance != Provenance::Constant {
            self.provenance
        } else if self.provenance == Provenance::Constant
            && other.provenance == Provenance::Constant
            && self.entries[0] == other.entries[0]
        {
            Provenance::Constant
        } else {
            Provenance::User
        };
        let mut h = Self::from_samples(Grid::from_points(points)?, entries, provenance)?;
        if provenance == Provenance::RankOneField {
            let mut th = self.angles.clone().unwrap_or_default();
            th.extend_from_slice(&other.angles.as_ref().map(|a| a[1..].to_vec()).unwrap_or_default());
            h.angles = Some(th);
        }
        Ok(h)
    }

    /// Weighted space `L²((0, ℓ); H)` on the Hamiltonian's grid.
    pub fn space(&self) -> Result<WeightedSpace<T>> {
        WeightedSpace::matrix_field(self.grid.clone(), &self.entries)
    }
}

/// Maximal interval on which `H` is the projection onto a fixed direction `e_angle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingularInterval<T> {
    pub lo: T,
    pub hi: T,
    pub angle: T,
}

fn rank_one_angle<T: Real>(h: [T; 3]) -> Option<T> {
    let (l1, l2, v) = sym2_eigen(h[0], h[1], h[2]);
    if l2.abs() < T::lit(RANK_TOL) && l1 > T::lit(RANK_TOL) {
        let mut a = v[1].atan2(v[0]);
        let pi = T::pi();
        let half = pi / T::lit(2.0);
        while a > half + T::lit(ANGLE_TOL) {
            a -= pi;
        }
        while a <= -half + T::lit(ANGLE_TOL) {
            a += pi;
        }
        Some(a)
    } else {
        None
    }
}

fn same_line<T: Real>(a: T, b: T) -> bool {
    let pi = T::pi();
    let mut d = (a - b) % pi;
    if d < T::zero() {
        d += pi;
    }
    d.min(pi - d) <= T::lit(ANGLE_TOL)
}

/// Maximal runs of nodes where `H` is rank one with a constant angle.
pub fn detect_singular_intervals<T: Real>(h: &Hamiltonian<T>) -> Vec<SingularInterval<T>> {
    let pts = h.grid.points();
    let angles: Vec<Option<T>> = h.entries.iter().map(|&e| rank_one_angle(e)).collect();
    let mut out = Vec::new();
    let mut j = 0;
    while j < pts.len() {
        let Some(a0) = angles[j] else {
            j += 1;
            continue;
        };
        let mut k = j;
        while k + 1 < pts.len() && angles[k + 1].is_some_and(|a| same_line(a, a0)) {
            k += 1;
        }
        if k > j {
            out.push(SingularInterval { lo: pts[j], hi: pts[k], angle: a0 });
        }
        j = k + 1;
    }
    out
}

/// True when `H ≈ [[0,0],[0,1]]` at every node of `[0, t]`.
fn degenerate_prefix<T: Real>(h: &Hamiltonian<T>, t: T) -> bool {
    let tol = T::lit(RANK_TOL);
    h.grid
        .points()
        .iter()
        .zip(&h.entries)
        .take_while(|(&s, _)| s <= t)
        .all(|(_, &[a, b, _])| a.abs() < tol && b.abs() < tol)
}

/// Checks the conditions excluding a vertical prefix and a singular suffix.
pub fn check_regular_ends<T: Real>(h: &Hamiltonian<T>) -> Result<()> {
    let sing = detect_singular_intervals(h);
    let vertical = T::pi() / T::lit(2.0);
    if let Some(first) = sing.first() {
        if first.lo <= h.grid.a() && same_line(first.angle, vertical) {
            return Err(Error::DegeneratePrefix(format!(
                "H = e_(π/2) e_(π/2)ᵀ on (0, {:?})",
                first.hi
            )));
        }
    }
    if let Some(last) = sing.last() {
        if last.hi >= h.ell() {
            return Err(Error::Singular(format!("singular suffix ({:?}, ℓ)", last.lo)));
        }
    }
    Ok(())
}

/// Cumulative `∫_0^{t_k} √det H` at every node.
pub fn kdb_profile<T: Real>(h: &Hamiltonian<T>) -> Vec<T> {
    let g = &h.grid;
    let f: Vec<T> = (0..g.len()).map(|j| h.sqrt_det_at(j)).collect();
    let mut cum = vec![T::zero(); g.len()];
    for k in 1..g.len() {
        cum[k] = cum[k - 1] + T::lit(0.5) * g.step(k) * (f[k - 1] + f[k]);
    }
    cum
}

/// Krein–de Branges integral `∫_0^t √det H(s) ds`.
pub fn kdb_type<T: Real>(h: &Hamiltonian<T>, t: T) -> Result<T> {
    if t < T::zero() || t > h.ell() * (T::one() + T::lit(1e-14)) {
        return invalid(format!("t = {t:?} outside [0, ℓ]"));
    }
    let cum = kdb_profile(h);
    let pts = h.grid.points();
    let k = pts.partition_point(|&p| p < t).clamp(1, pts.len() - 1);
    let f0 = h.sqrt_det_at(k - 1);
    let f1 = h.sqrt_det_at(k);
    let hk = pts[k] - pts[k - 1];
    let tau = (t - pts[k - 1]).max(T::zero()).min(hk);
    Ok(cum[k - 1] + f0 * tau + (f1 - f0) * tau * tau / (T::lit(2.0) * hk))
}

/// Prefix of `H` whose Krein–de Branges integral equals `target`, with the cut point moved
/// left out of any singular interval.
pub fn truncate<T: Real>(h: &Hamiltonian<T>, target: T) -> Result<(Hamiltonian<T>, T)> {
    let cum = kdb_profile(h);
    let total = cum[cum.len() - 1];
    if !(target > T::zero() && target < total) {
        return invalid(format!("target type {target:?} not in (0, {total:?})"));
    }
    let pts = h.grid.points();
    let k = cum.partition_point(|&c| c < target).max(1);
    let f0 = h.sqrt_det_at(k - 1);
    let f1 = h.sqrt_det_at(k);
    let hk = pts[k] - pts[k - 1];
    let r = target - cum[k - 1];
    let slope = (f1 - f0) / hk;
    let tau = if slope.abs() * hk <= T::lit(1e-14) * (f0 + f1) {
        r / f0
    } else {
        let disc = (f0 * f0 + T::lit(2.0) * slope * r).max(T::zero()).sqrt();
        T::lit(2.0) * r / (f0 + disc)
    };
    let mut t_cut = pts[k - 1] + tau.min(hk);
    for iv in detect_singular_intervals(h) {
        if t_cut > iv.lo && t_cut <= iv.hi {
            t_cut = iv.lo;
        }
    }
    let mut points: Vec<T> = pts.iter().copied().filter(|&p| p < t_cut).collect();
    let rel = T::lit(1e-12) * h.ell();
    if points.last().is_some_and(|&p| t_cut - p <= rel) {
        points.pop();
    }
    points.push(t_cut);
    if points.len() < Grid::<T>::MIN_POINTS {
        points = Grid::uniform(T::zero(), t_cut, Grid::<T>::MIN_POINTS)?.points().to_vec();
    }
    let grid = Grid::from_points(points)?;
    let entries = grid.points().iter().map(|&t| h.eval(t)).collect();
    let angles = h.angles.as_ref().map(|_| grid.points().iter().map(|&t| h.angle_at(t)).collect());
    let mut out = Hamiltonian::from_samples(grid, entries, h.provenance)?;
    out.angles = angles;
    Ok((out, t_cut))
}

type Mat2<T> = [[C<T>; 2]; 2];

fn mat2_mul<T: Real>(a: &Mat2<T>, b: &Mat2<T>) -> Mat2<T> {
    let mut c = [[creal(T::zero()); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn mat2_axpy<T: Real>(x: &Mat2<T>, s: C<T>, y: &Mat2<T>) -> Mat2<T> {
    let mut c = *x;
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] += s * y[i][j];
        }
    }
    c
}

fn mat2_max<T: Real>(a: &Mat2<T>) -> T {
    a.iter().flatten().fold(T::zero(), |m, &z| m.max(cabs(z)))
}

/// Generator `−Ω z H` of `X' = −Ω z H X`.
fn generator<T: Real>(z: C<T>, h: [T; 3]) -> Mat2<T> {
    [[z * h[1], z * h[2]], [-(z * h[0]), -(z * h[1])]]
}

/// Fundamental solution at `t` scaled by `exp(-log_scale)`.
#[derive(Debug, Clone, Copy)]
pub struct Transfer<T: Real> {
    pub matrix: [[C<T>; 2]; 2],
    pub log_scale: T,
}

impl<T: Real> Transfer<T> {
    /// First column (the solution with `Θ(0) = (1, 0)`), unscaled.
    pub fn theta(&self) -> [C<T>; 2] {
        let s = creal(self.log_scale.exp());
        [self.matrix[0][0] * s, self.matrix[1][0] * s]
    }

    pub fn unscaled(&self) -> Mat2<T> {
        let s = creal(self.log_scale.exp());
        [[self.matrix[0][0] * s, self.matrix[0][1] * s], [self.matrix[1][0] * s, self.matrix[1][1] * s]]
    }
}

fn rk4_sweep<T: Real>(h: &Hamiltonian<T>, z: C<T>, t: T, m: usize) -> Transfer<T> {
    let pts = h.grid.points();
    let one = creal(T::one());
    let zero = creal(T::zero());
    let mut x: Mat2<T> = [[one, zero], [zero, one]];
    let mut log_scale = T::zero();
    let big = T::lit(1e100);
    let mf = T::from_usize(m).unwrap();
    let (half, sixth) = (T::lit(0.5), T::lit(1.0 / 6.0));
    for k in 1..pts.len() {
        if pts[k - 1] >= t {
            break;
        }
        let hk = pts[k] - pts[k - 1];
        let span = (t.min(pts[k]) - pts[k - 1]) / hk;
        let ds = span / mf;
        let dt = creal(ds * hk);
        for i in 0..m {
            let s0 = ds * T::from_usize(i).unwrap();
            let a0 = generator(z, h.eval_cell(k, s0));
            let am = generator(z, h.eval_cell(k, s0 + half * ds));
            let a1 = generator(z, h.eval_cell(k, s0 + ds));
            let k1 = mat2_mul(&a0, &x);
            let k2 = mat2_mul(&am, &mat2_axpy(&x, dt * half, &k1));
            let k3 = mat2_mul(&am, &mat2_axpy(&x, dt * half, &k2));
            let k4 = mat2_mul(&a1, &mat2_axpy(&x, dt, &k3));
            for r in 0..2 {
                for c in 0..2 {
                    x[r][c] += dt * creal(sixth) * (k1[r][c] + (k2[r][c] + k3[r][c]) * T::lit(2.0) + k4[r][c]);
                }
            }
        }
        let mx = mat2_max(&x);
        if mx > big {
            let inv = creal(T::one() / mx);
            x.iter_mut().flatten().for_each(|v| *v *= inv);
            log_scale += mx.ln();
        }
    }
    Transfer { matrix: x, log_scale }
}

/// Fundamental solution of `Ω X' = z H X`, `X(0) = I`, at `t`, refined by step halving
/// until two successive results agree to `1e-10` relative.
pub fn transfer_matrix<T: Real>(h: &Hamiltonian<T>, z: C<T>, t: T) -> Result<Transfer<T>> {
    if t < T::zero() || t > h.ell() * (T::one() + T::lit(1e-14)) {
        return invalid(format!("t = {t:?} outside [0, ℓ]"));
    }
    let t = t.min(h.ell());
    let max_cell = h.grid.max_step();
    let mut m = 1usize;
    let zh = cabs(z) * max_cell;
    while T::from_usize(m).unwrap() < zh * T::lit(2.0) {
        m *= 2;
    }
    let mut prev = rk4_sweep(h, z, t, m);
    for _ in 0..14 {
        m *= 2;
        let next = rk4_sweep(h, z, t, m);
        let rescale = creal((prev.log_scale - next.log_scale).exp());
        let mut diff = T::zero();
        for r in 0..2 {
            for c in 0..2 {
                diff = diff.max(cabs(prev.matrix[r][c] * rescale - next.matrix[r][c]));
            }
        }
        if diff <= T::lit(1e-10) * mat2_max(&next.matrix) {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Numerical(format!("transfer integration did not converge at z = {z:?}")))
}

/// `Θ(t, z)` with `Θ(0) = (1, 0)ᵀ`.
pub fn solve_transfer<T: Real>(h: &Hamiltonian<T>, z: C<T>, t: T) -> Result<[C<T>; 2]> {
    Ok(transfer_matrix(h, z, t)?.theta())
}

/// Where an HB function comes from.
#[derive(Clone)]
pub enum HbOrigin<T: Real> {
    /// `E_t = Θ₊(t, ·) + i Θ₋(t, ·)` for a Hamiltonian.
    Transfer { hamiltonian: Arc<Hamiltonian<T>>, t: T },
    /// `e^{-i a z}`.
    Exponential { a: T },
    /// Pointwise product of evaluators.
    Product(Vec<HbEvaluator<T>>),
    /// User-supplied closure.
    Closure { label: String, f: Arc<dyn Fn(C<T>) -> C<T> + Send + Sync> },
}

impl<T: Real> std::fmt::Debug for HbOrigin<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Transfer { t, .. } => write!(f, "transfer-matrix(t = {t:?})"),
            Self::Exponential { a } => write!(f, "exp(-i {a:?} z)"),
            Self::Product(v) => write!(f, "product of {} factors", v.len()),
            Self::Closure { label, .. } => write!(f, "closure({label})"),
        }
    }
}

/// Lazily evaluated entire function `E` with `E#(z) = conj(E(conj z))`.
pub struct HbEvaluator<T: Real> {
    origin: HbOrigin<T>,
    cache: Mutex<HashMap<(u64, u64), (C<T>, T)>>,
}

impl<T: Real> Clone for HbEvaluator<T> {
    fn clone(&self) -> Self {
        Self::new(self.origin.clone())
    }
}

impl<T: Real> std::fmt::Debug for HbEvaluator<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HbEvaluator").field("origin", &self.origin).finish()
    }
}

impl<T: Real> HbEvaluator<T> {
    pub fn new(origin: HbOrigin<T>) -> Self {
        Self { origin, cache: Mutex::new(HashMap::new()) }
    }

    pub fn exponential(a: T) -> Self {
        Self::new(HbOrigin::Exponential { a })
    }

    pub fn product(factors: Vec<HbEvaluator<T>>) -> Self {
        Self::new(HbOrigin::Product(factors))
    }

    pub fn from_fn(label: impl Into<String>, f: impl Fn(C<T>) -> C<T> + Send + Sync + 'static) -> Self {
        Self::new(HbOrigin::Closure { label: label.into(), f: Arc::new(f) })
    }

    pub fn origin(&self) -> &HbOrigin<T> {
        &self.origin
    }

    /// `(E(z) / e^{s}, s)` with `s` a log-scale keeping the mantissa representable.
    pub fn eval_scaled(&self, z: C<T>) -> Result<(C<T>, T)> {
        let key = (z.re.as_f64().to_bits(), z.im.as_f64().to_bits());
        if let Some(&v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v);
        }
        let v = match &self.origin {
            HbOrigin::Transfer { hamiltonian, t } => {
                let tr = transfer_matrix(hamiltonian, z, *t)?;
                let e = tr.matrix[0][0] + cplx(T::zero(), T::one()) * tr.matrix[1][0];
                (e, tr.log_scale)
            }
            HbOrigin::Exponential { a } => {
                let w = cplx(T::zero(), -*a) * z;
                (cexp(cplx(T::zero(), w.im)), w.re)
            }
            HbOrigin::Product(fs) => {
                let mut acc = (creal(T::one()), T::zero());
                for f in fs {
                    let (e, s) = f.eval_scaled(z)?;
                    acc = (acc.0 * e, acc.1 + s);
                }
                acc
            }
            HbOrigin::Closure { f, .. } => (f(z), T::zero()),
        };
        self.cache.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    pub fn eval(&self, z: C<T>) -> Result<C<T>> {
        let (e, s) = self.eval_scaled(z)?;
        Ok(e * s.exp())
    }

    pub fn eval_sharp(&self, z: C<T>) -> Result<C<T>> {
        Ok(self.eval(z.conj())?.conj())
    }

    /// `ln |E(z)|`, valid beyond the overflow range of `E` itself.
    pub fn log_abs(&self, z: C<T>) -> Result<T> {
        let (e, s) = self.eval_scaled(z)?;
        Ok(cln_abs(e) + s)
    }
}

/// Structure function `E_t` of a canonical system.
pub fn structure_function<T: Real>(h: &Arc<Hamiltonian<T>>, t: T) -> Result<HbEvaluator<T>> {
    if !(t > T::zero() && t <= h.ell() * (T::one() + T::lit(1e-14))) {
        return invalid(format!("t = {t:?} outside (0, ℓ]"));
    }
    if degenerate_prefix(h, t) {
        return Err(Error::DegeneratePrefix("H = [[0,0],[0,1]] on (0, t)".into()));
    }
    for iv in detect_singular_intervals(h) {
        if t > iv.lo && t < iv.hi {
            return Err(Error::Singular(format!("t = {t:?} inside singular interval ({:?}, {:?})", iv.lo, iv.hi)));
        }
    }
    let e = HbEvaluator::new(HbOrigin::Transfer { hamiltonian: h.clone(), t });
    for x in [-3.0, -1.0, 0.0, 1.0, 3.0] {
        for y in [0.25, 0.5, 1.0, 2.0] {
            let z = cplx(T::lit(x), T::lit(y));
            let upper = e.log_abs(z)?;
            let lower = e.log_abs(z.conj())?;
            if upper <= lower {
                return Err(Error::Numerical(format!("structure function fails the HB test at z = {x} + {y}i")));
            }
        }
    }
    Ok(e)
}

/// `V f(x) = −Ω ∫_0^x H f` by cumulative trapezoid quadrature.
pub fn canonical_volterra<T: Real>(h: &Hamiltonian<T>, space: Arc<WeightedSpace<T>>) -> Result<DenseOperator<T>> {
    if space.fiber() != 2 || space.grid() != h.grid() {
        return invalid("space must be built on the Hamiltonian's grid with fiber dimension 2");
    }
    let n = h.grid.len();
    let mut m = CMat::from_element(2 * n, 2 * n, creal(T::zero()));
    for k in 1..n {
        for j in 0..=k {
            let w = h.grid.cumulative_weight(k, j);
            let [a, b, d] = h.entries[j];
            m[(2 * k, 2 * j)] = creal(w * b);
            m[(2 * k, 2 * j + 1)] = creal(w * d);
            m[(2 * k + 1, 2 * j)] = creal(-w * a);
            m[(2 * k + 1, 2 * j + 1)] = creal(-w * b);
        }
    }
    DenseOperator::new(space, m)
}
