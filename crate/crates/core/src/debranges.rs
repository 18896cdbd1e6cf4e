//! Reproducing kernels of de Branges spaces, Hermite–Biehler checks, type
//! estimation and structure functions of nearly invariant frames.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::canonical::HbEvaluator;
use crate::error::{invalid, Error, Result};
use crate::grid::{CVec, Subspace, WeightedSpace};
use crate::scalar::{cabs, cplx, creal, csqrt, Real, C};

const DIAGONAL_SWITCH: f64 = 1e-6;
const DIAGONAL_STEP: f64 = 1e-3;

fn kernel_formula<T: Real>(e: &HbEvaluator<T>, lambda: C<T>, z: C<T>) -> Result<C<T>> {
    let num = e.eval(z)? * e.eval(lambda)?.conj() - e.eval_sharp(z)? * e.eval_sharp(lambda)?.conj();
    let den = cplx(T::zero(), T::two_pi()) * (lambda.conj() - z);
    Ok(num / den)
}

/// `k_λ(z) = (E(z) conj E(λ) − E#(z) conj E#(λ)) / (2πi (λ̄ − z))`.
///
/// Near `z = λ̄` the removable singularity is filled by the symmetric average
/// `(k(z + δ) + k(z − δ)) / 2`, accurate to second order in `δ`.
pub fn kernel<T: Real>(e: &HbEvaluator<T>, lambda: C<T>, z: C<T>) -> Result<C<T>> {
    let scale = T::one().max(cabs(z));
    if cabs(lambda.conj() - z) < T::lit(DIAGONAL_SWITCH) * scale {
        // Richardson-extrapolated symmetric average.
        let avg = |d: T| -> Result<C<T>> {
            let d = creal(d);
            Ok((kernel_formula(e, lambda, z + d)? + kernel_formula(e, lambda, z - d)?) * T::lit(0.5))
        };
        let d = T::lit(DIAGONAL_STEP) * scale;
        let (coarse, fine) = (avg(d)?, avg(d * T::lit(0.5))?);
        return Ok((fine * T::lit(4.0) - coarse) / T::lit(3.0));
    }
    kernel_formula(e, lambda, z)
}

/// Evaluates `k_λ(z)` for a fixed structure function.
#[derive(Debug, Clone)]
pub struct KernelSampler<T: Real> {
    e: Arc<HbEvaluator<T>>,
}

impl<T: Real> KernelSampler<T> {
    pub fn new(e: Arc<HbEvaluator<T>>) -> Self {
        Self { e }
    }

    pub fn eval(&self, lambda: C<T>, z: C<T>) -> Result<C<T>> {
        kernel(&self.e, lambda, z)
    }

    pub fn evaluator(&self) -> &HbEvaluator<T> {
        &self.e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HbCheck<T> {
    pub pass: bool,
    /// `min |E(z)| − |E#(z)|` over the samples.
    pub worst_margin: T,
}

/// Tests `|E(z)| > |E#(z)|` on points of the open upper half-plane.
pub fn hb_check<T: Real>(e: &HbEvaluator<T>, samples: &[C<T>]) -> Result<HbCheck<T>> {
    if samples.is_empty() {
        return invalid("no sample points");
    }
    let mut worst: Option<T> = None;
    for &z in samples {
        if z.im <= T::zero() {
            return invalid(format!("sample {z:?} not in the open upper half-plane"));
        }
        let m = cabs(e.eval(z)?) - cabs(e.eval_sharp(z)?);
        worst = Some(worst.map_or(m, |w: T| w.min(m)));
    }
    let worst_margin = worst.expect("nonempty");
    Ok(HbCheck { pass: worst_margin > T::zero(), worst_margin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalfPlane {
    Upper,
    Lower,
}

/// Growth rate of `log|E(±iy)|` fitted on the top three octaves below `y_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeEstimate<T> {
    pub value: T,
    pub half_plane: HalfPlane,
    pub y_samples: Vec<T>,
    /// Root-mean-square residual of the fit, in log units.
    pub residual: T,
    /// Coefficient of the `ln y` regressor (polynomial order of the prefactor).
    pub log_coefficient: T,
}

/// Number of ladder points used for growth fits.
pub const LADDER_POINTS: usize = 16;

/// Geometric ladder of `LADDER_POINTS` values in `[y_max / 8, y_max]`.
pub fn y_ladder<T: Real>(y_max: T) -> Vec<T> {
    let lo = y_max / T::lit(8.0);
    let ratio = T::lit(8.0).powf(T::one() / T::from_usize(LADDER_POINTS - 1).unwrap());
    let mut y = lo;
    let mut out = Vec::with_capacity(LADDER_POINTS);
    for k in 0..LADDER_POINTS {
        out.push(if k + 1 == LADDER_POINTS { y_max } else { y });
        y *= ratio;
    }
    out
}

/// Least-squares fit `v ≈ τ y + p ln y + c`; returns `(τ, p, rms residual)`.
pub fn growth_fit<T: Real>(ys: &[T], values: &[T]) -> Result<(T, T, T)> {
    if ys.len() != values.len() || ys.len() < 4 {
        return invalid("growth fit needs at least four matched samples");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite log-magnitude in growth fit".into()));
    }
    // Scale columns to comparable magnitude for conditioning.
    let ymax = ys.iter().fold(T::zero(), |m, &y| m.max(y));
    let a = DMatrix::from_fn(ys.len(), 3, |i, j| match j {
        0 => ys[i] / ymax,
        1 => (ys[i] / ymax).ln(),
        _ => T::one(),
    });
    let b = DVector::from_column_slice(values);
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(&b, T::lit(1e-14))
        .map_err(|e| Error::Numerical(format!("growth fit: {e}")))?;
    let r = &a * &x - &b;
    let rms = (r.norm_squared() / T::from_usize(ys.len()).unwrap()).sqrt();
    Ok((x[0] / ymax, x[1], rms))
}

/// Mean type of `E` along the positive (upper) or negative (lower) imaginary axis.
pub fn estimate_type<T: Real>(e: &HbEvaluator<T>, y_max: T, half_plane: HalfPlane) -> Result<TypeEstimate<T>> {
    if !(y_max >= T::lit(50.0)) {
        return invalid(format!("y_max must be at least 50, got {y_max:?}"));
    }
    let ys = y_ladder(y_max);
    let sign = match half_plane {
        HalfPlane::Upper => T::one(),
        HalfPlane::Lower => -T::one(),
    };
    let logs: Vec<T> = ys.iter().map(|&y| e.log_abs(cplx(T::zero(), sign * y))).collect::<Result<_>>()?;
    let (value, log_coefficient, residual) = growth_fit(&ys, &logs)?;
    Ok(TypeEstimate { value, half_plane, y_samples: ys, residual, log_coefficient })
}

/// Exponential type as the larger of the two mean types.
///
/// For HB functions `|E(−iy)| ≤ |E(iy)|`; when the lower values underflow the upper type is returned.
pub fn exponential_type<T: Real>(e: &HbEvaluator<T>, y_max: T) -> Result<T> {
    let up = estimate_type(e, y_max, HalfPlane::Upper)?.value;
    match estimate_type(e, y_max, HalfPlane::Lower) {
        Ok(down) => Ok(up.max(down.value)),
        Err(Error::Numerical(_)) => Ok(up),
        Err(err) => Err(err),
    }
}

/// Whether `e^{iβz}` is associated to `H(E)`: `|β| ≤ τ(E)`.
pub fn exp_associated<T: Real>(beta: T, tau_e: T) -> bool {
    beta.abs() <= tau_e + T::lit(1e-6)
}

/// Point evaluation realizing vectors of a frame as entire functions.
pub type PointEval<T> = Arc<dyn Fn(&CVec<T>, C<T>) -> C<T> + Send + Sync>;

/// Reproducing kernel `k_λ(z) = Σ_j conj(e_j(λ)) e_j(z)` of a frame.
#[derive(Clone)]
pub struct FrameKernel<T: Real> {
    frame: Subspace<T>,
    eval: PointEval<T>,
}

impl<T: Real> FrameKernel<T> {
    pub fn new(frame: Subspace<T>, eval: PointEval<T>) -> Self {
        Self { frame, eval }
    }

    /// The vector `Σ_j conj(e_j(λ)) e_j`, whose point evaluations give `k_λ`.
    pub fn kernel_vector(&self, lambda: C<T>) -> CVec<T> {
        let f = self.frame.frame();
        let mut v = CVec::from_element(f.nrows(), creal(T::zero()));
        for col in f.column_iter() {
            let c = (self.eval)(&col.into_owned(), lambda).conj();
            v.axpy(c, &col, creal(T::one()));
        }
        v
    }

    pub fn kernel(&self, lambda: C<T>, z: C<T>) -> C<T> {
        (self.eval)(&self.kernel_vector(lambda), z)
    }

    pub fn point_eval(&self, v: &CVec<T>, z: C<T>) -> C<T> {
        (self.eval)(v, z)
    }
}

/// Functions `F`, `G` with `k_λ(z) = (F(z) conj F(λ) − G(z) conj G(λ)) / (2πi(λ̄ − z))`.
#[derive(Clone)]
pub struct StructurePair<T: Real> {
    kernel: FrameKernel<T>,
    k_plus: CVec<T>,
    k_minus: CVec<T>,
    norm_plus: T,
    norm_minus: T,
}

impl<T: Real> StructurePair<T> {
    /// `F(z) = √π k_i(z) k_i(i)^{-1/2} (z + i)`.
    pub fn f(&self, z: C<T>) -> C<T> {
        let i = cplx(T::zero(), T::one());
        self.kernel.point_eval(&self.k_plus, z) * (z + i) * (T::pi().sqrt() / self.norm_plus.sqrt())
    }

    /// `G(z) = √π k_{-i}(z) k_{-i}(-i)^{-1/2} (z − i)`.
    pub fn g(&self, z: C<T>) -> C<T> {
        let i = cplx(T::zero(), T::one());
        self.kernel.point_eval(&self.k_minus, z) * (z - i) * (T::pi().sqrt() / self.norm_minus.sqrt())
    }

    /// `u² = G# / F`.
    pub fn u_squared(&self, z: C<T>) -> C<T> {
        self.g(z.conj()).conj() / self.f(z)
    }

    /// Principal square root of `u²`.
    pub fn u(&self, z: C<T>) -> C<T> {
        csqrt(self.u_squared(z))
    }

    pub fn kernel(&self) -> &FrameKernel<T> {
        &self.kernel
    }
}

/// Structure functions of the space spanned by a frame, realized through `point_eval`.
pub fn structure_from_frame<T: Real>(
    space: &Arc<WeightedSpace<T>>,
    frame: &Subspace<T>,
    point_eval: PointEval<T>,
) -> Result<StructurePair<T>> {
    if frame.dim() == 0 {
        return invalid("empty frame");
    }
    if frame.space().dim() != space.dim() {
        return invalid("frame lives on a different space");
    }
    let kernel = FrameKernel::new(frame.clone(), point_eval);
    let i = cplx(T::zero(), T::one());
    let k_plus = kernel.kernel_vector(i);
    let k_minus = kernel.kernel_vector(-i);
    let norm_plus = kernel.point_eval(&k_plus, i).re;
    let norm_minus = kernel.point_eval(&k_minus, -i).re;
    let floor = T::lit(1e-12);
    if !(norm_plus > floor && norm_minus > floor) {
        return Err(Error::Numerical(format!(
            "frame kernel degenerate at ±i: k_i(i) = {norm_plus:?}, k_-i(-i) = {norm_minus:?}"
        )));
    }
    Ok(StructurePair { kernel, k_plus, k_minus, norm_plus, norm_minus })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    AInB,
    BInA,
    Equal,
    Incomparable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceComparison<T> {
    pub relation: Relation,
    /// `max_a ‖(I − P_B) a‖` over unit frame columns of `A`.
    pub a_in_b_residual: T,
    pub b_in_a_residual: T,
}

/// Containment threshold on unit vectors.
pub const CONTAINMENT_TOL: f64 = 1e-8;

fn containment_residual<T: Real>(a: &Subspace<T>, b: &Subspace<T>) -> T {
    if a.dim() == 0 {
        return T::zero();
    }
    if b.dim() == 0 {
        return T::one();
    }
    let r = a.frame() - b.project_cols(a.frame());
    r.column_iter().map(|c| a.space().norm(&c.into_owned())).fold(T::zero(), |m, x| m.max(x))
}

pub fn compare_subspaces<T: Real>(a: &Subspace<T>, b: &Subspace<T>) -> Result<SubspaceComparison<T>> {
    a.same_space(b)?;
    let ab = containment_residual(a, b);
    let ba = containment_residual(b, a);
    let tol = T::lit(CONTAINMENT_TOL);
    let relation = match (ab < tol, ba < tol) {
        (true, true) => Relation::Equal,
        (true, false) => Relation::AInB,
        (false, true) => Relation::BInA,
        (false, false) => Relation::Incomparable,
    };
    Ok(SubspaceComparison { relation, a_in_b_residual: ab, b_in_a_residual: ba })
}

/// `∫_{-T}^{T} f(t) conj g(t) / |E(t)|² dt` by the trapezoid rule on `n` points.
pub fn real_line_inner<T: Real>(
    e: &HbEvaluator<T>,
    f: impl Fn(C<T>) -> Result<C<T>>,
    g: impl Fn(C<T>) -> Result<C<T>>,
    half_width: T,
    n: usize,
) -> Result<C<T>> {
    let grid = crate::grid::Grid::uniform(-half_width, half_width, n)?;
    let mut acc = creal(T::zero());
    for (&t, &w) in grid.points().iter().zip(grid.weights()) {
        let z = creal(t);
        let em = cabs(e.eval(z)?);
        acc += f(z)? * g(z)?.conj() * (w / (em * em));
    }
    Ok(acc)
}
