//! The transform `W f(λ) = ⟨f, φ_λ̄⟩`, model parameters `(α, τ(E))`, and the
//! rank-one right inverses `V_β = V + ⟨·, x_β⟩ phi0`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::canonical::kdb_type;
use crate::debranges::{growth_fit, y_ladder};
use crate::error::{invalid, Error, Result};
use crate::grid::{cmatvec, CVec, DenseOperator};
use crate::pairs::AdmissiblePair;
use crate::scalar::{cabs, cexp, cplx, creal, Real, C};

const PHI_RESIDUAL_TOL: f64 = 1e-8;
const PHI_RESCALE: f64 = 1e100;
const TAIL_TOL: f64 = 1e-3;
const RANGE_SLACK: f64 = 1e-6;
const COINCIDE_TOL: f64 = 0.02;
const LIMIT_STEP: f64 = 1e-4;
const LOW_CONFIDENCE: f64 = 0.05;

/// Block forward substitution on `(I − λV) φ = phi0` for a lower-triangular `V`.
fn forward_substitution<T: Real>(pair: &AdmissiblePair<T>, lambda: C<T>) -> Result<(CVec<T>, T)> {
    let m = pair.v().matrix();
    let p = pair.phi0();
    let fb = pair.space().fiber();
    let n = p.len() / fb;
    let mut phi = CVec::from_element(p.len(), creal(T::zero()));
    let mut unit = T::one();
    let mut log_scale = T::zero();
    for k in 0..n {
        let rows = k * fb..(k + 1) * fb;
        let mut rhs = [creal(T::zero()); 2];
        for (r, row) in rows.clone().enumerate() {
            let mut acc = creal(T::zero());
            for j in 0..k * fb {
                acc += m[(row, j)] * phi[j];
            }
            rhs[r] = p[row] * unit + lambda * acc;
        }
        let one = creal(T::one());
        let x = if fb == 1 {
            let d = one - lambda * m[(k, k)];
            if cabs(d) < T::lit(1e-12) {
                return Err(Error::Numerical("near-singular diagonal block in forward substitution".into()));
            }
            [rhs[0] / d, creal(T::zero())]
        } else {
            let r0 = rows.start;
            let (a11, a12) = (one - lambda * m[(r0, r0)], -lambda * m[(r0, r0 + 1)]);
            let (a21, a22) = (-lambda * m[(r0 + 1, r0)], one - lambda * m[(r0 + 1, r0 + 1)]);
            let det = a11 * a22 - a12 * a21;
            let scale = cabs(a11).max(cabs(a12)).max(cabs(a21)).max(cabs(a22));
            if cabs(det) < T::lit(1e-12) * scale * scale {
                return Err(Error::Numerical("near-singular diagonal block in forward substitution".into()));
            }
            [(a22 * rhs[0] - a12 * rhs[1]) / det, (a11 * rhs[1] - a21 * rhs[0]) / det]
        };
        for r in 0..fb {
            phi[k * fb + r] = x[r];
        }
        let mag = x.iter().fold(T::zero(), |a, z| a.max(cabs(*z)));
        if !mag.is_finite() {
            return Err(Error::Numerical("overflow in forward substitution".into()));
        }
        if mag > T::lit(PHI_RESCALE) {
            let s = T::one() / mag;
            phi.iter_mut().for_each(|z| *z *= s);
            unit *= s;
            log_scale += mag.ln();
        }
    }
    Ok((phi, log_scale))
}

/// `(I − λV)^{-1} phi0` as `(ψ, s)` with `φ_λ = e^s ψ`; refuses when the solve is unreliable.
pub fn phi_scaled<T: Real>(pair: &AdmissiblePair<T>, lambda: C<T>) -> Result<(CVec<T>, T)> {
    if lambda == creal(T::zero()) {
        return Ok((pair.phi0().clone(), T::zero()));
    }
    let (phi, log_scale) = match pair.phi_recurrence(lambda) {
        Some(r) => r?,
        None => forward_substitution(pair, lambda)?,
    };
    // Relative residual of (I − λV)ψ = e^{−s} phi0.
    let unit = (-log_scale).exp();
    let vphi = cmatvec(pair.v().matrix(), &phi);
    let lv = vphi.map(|z| z * lambda);
    let target = pair.phi0().map(|z| z * unit);
    let r = &phi - &lv - &target;
    let space = pair.space();
    let denom = space.norm(&phi) + space.norm(&lv) + space.norm(&target);
    let rel = space.norm(&r) / denom;
    if !(rel <= T::lit(PHI_RESIDUAL_TOL)) {
        return Err(Error::Numerical(format!(
            "φ_λ at λ = {lambda} is unreliable (relative residual {:.3e}); λ is too deep in the pseudospectrum",
            rel.as_f64()
        )));
    }
    Ok((phi, log_scale))
}

/// `φ_λ = (I − λV)^{-1} phi0`.
pub fn phi<T: Real>(pair: &AdmissiblePair<T>, lambda: C<T>) -> Result<CVec<T>> {
    let (v, s) = phi_scaled(pair, lambda)?;
    if s == T::zero() {
        return Ok(v);
    }
    let f = s.exp();
    if !f.is_finite() {
        return Err(Error::Numerical(format!("‖φ_λ‖ overflows at λ = {lambda}")));
    }
    Ok(v.map(|z| z * f))
}

/// `W f(λ) = ⟨f, φ_λ̄⟩`.
pub fn transform<T: Real>(pair: &AdmissiblePair<T>, f: &CVec<T>, lambda: C<T>) -> Result<C<T>> {
    pair.space().check(f)?;
    let p = phi(pair, lambda.conj())?;
    pair.space().inner(f, &p)
}

/// Samples of `W f` on a list of points.
pub fn transform_samples<T: Real>(pair: &AdmissiblePair<T>, f: &CVec<T>, lambdas: &[C<T>]) -> Result<Vec<C<T>>> {
    lambdas.iter().map(|&l| transform(pair, f, l)).collect()
}

/// `(g(λ) − g(0)) / λ`, filled at `λ = 0` by a Richardson-extrapolated symmetric difference.
fn backward_shift_at<T: Real>(pair: &AdmissiblePair<T>, f: &CVec<T>, lambda: C<T>, at_zero: C<T>) -> Result<C<T>> {
    if cabs(lambda) > T::lit(1e-8) {
        return Ok((transform(pair, f, lambda)? - at_zero) / lambda);
    }
    let d = |h: T| -> Result<C<T>> {
        let h = creal(h);
        Ok((transform(pair, f, h)? - transform(pair, f, -h)?) / (h * T::lit(2.0)))
    };
    let h = T::lit(LIMIT_STEP);
    let (coarse, fine) = (d(h)?, d(h * T::lit(0.5))?);
    Ok((fine * T::lit(4.0) - coarse) / T::lit(3.0))
}

/// `max_λ |W(V* f)(λ) − (W f(λ) − W f(0)) / λ|` relative to `max_λ |W f(λ)|`.
pub fn backward_shift_test<T: Real>(pair: &AdmissiblePair<T>, f: &CVec<T>, lambdas: &[C<T>]) -> Result<T> {
    if lambdas.is_empty() {
        return invalid("backward shift test needs at least one point");
    }
    let vf = pair.v().adjoint().apply(f)?;
    let at_zero = transform(pair, f, creal(T::zero()))?;
    let mut worst = T::zero();
    let mut scale = cabs(at_zero);
    for &l in lambdas {
        let lhs = transform(pair, &vf, l)?;
        let rhs = backward_shift_at(pair, f, l, at_zero)?;
        worst = worst.max(cabs(lhs - rhs));
        scale = scale.max(cabs(transform(pair, f, l)?));
    }
    if scale == T::zero() {
        return Ok(worst);
    }
    Ok(worst / scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParameterMethod {
    GrowthFit,
    KdbFormula,
}

/// `α` and `τ(E)` in `e^{iαz} W H = H(E)` (module conventions: `W f(λ) = ⟨f, φ_λ̄⟩`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters<T> {
    pub alpha: T,
    pub tau_e: T,
    pub method: ParameterMethod,
    /// Growth rate of `log ‖φ(iy)‖`.
    pub g_plus: T,
    /// Growth rate of `log ‖φ(−iy)‖`.
    pub g_minus: T,
    pub residual_plus: T,
    pub residual_minus: T,
    /// Growth-fit value of `τ(E)` (equal to `tau_e` unless the Krein–de Branges formula was used).
    pub tau_fit: T,
    pub low_confidence: bool,
    /// Whether `|α| ≤ τ(E)` up to the fit tolerance.
    pub alpha_within_type: bool,
}

impl<T: Real> ModelParameters<T> {
    /// Whether `e^{iβz}`-type right inverses with this `β` are quasi-nilpotent: `|β − α| ≤ τ(E)`.
    pub fn in_range(&self, beta: T) -> bool {
        (beta - self.alpha).abs() <= self.tau_e + T::lit(RANGE_SLACK)
    }

    /// `(β₊, β₋) = (τ + α, α − τ)`.
    pub fn extremes(&self) -> (T, T) {
        (self.tau_e + self.alpha, self.alpha - self.tau_e)
    }

    /// `τ(E) = |α| = 0` within the estimation tolerance.
    pub fn coincide(&self) -> bool {
        self.tau_e <= T::lit(COINCIDE_TOL) && self.alpha.abs() <= T::lit(COINCIDE_TOL)
    }
}

/// Estimates `(α, τ(E))` from the growth of `‖φ(±iy)‖` on the top three octaves below `y_max`.
/// For pairs built from a Hamiltonian, `τ(E)` is the Krein–de Branges integral.
pub fn estimate_model_parameters<T: Real>(pair: &AdmissiblePair<T>, y_max: T) -> Result<ModelParameters<T>> {
    if !(y_max >= T::lit(50.0)) {
        return invalid(format!("y_max must be at least 50, got {y_max:?}"));
    }
    let ys = y_ladder(y_max);
    let space = pair.space();
    let growth = |sign: T| -> Result<(T, T)> {
        let logs = ys
            .iter()
            .map(|&y| {
                let (v, s) = phi_scaled(pair, cplx(T::zero(), sign * y))?;
                Ok(space.norm(&v).ln() + s)
            })
            .collect::<Result<Vec<T>>>()?;
        let (slope, _, rms) = growth_fit(&ys, &logs)?;
        Ok((slope, rms))
    };
    let (g_plus, residual_plus) = growth(T::one())?;
    let (g_minus, residual_minus) = growth(-T::one())?;
    let alpha = (g_plus - g_minus) / T::lit(2.0);
    let tau_fit = ((g_plus + g_minus) / T::lit(2.0)).max(T::zero());
    let (tau_e, method) = match pair.hamiltonian() {
        Some(h) => (kdb_type(h, h.ell())?, ParameterMethod::KdbFormula),
        None => (tau_fit, ParameterMethod::GrowthFit),
    };
    // Fit residual against the growth it is meant to resolve over the ladder.
    let span = y_max - ys[0];
    let shaky = |g: T, rms: T| g.abs() > T::lit(0.01) && rms > T::lit(LOW_CONFIDENCE) * g.abs() * span;
    let low_confidence = shaky(g_plus, residual_plus) || shaky(g_minus, residual_minus);
    let alpha_within_type = alpha.abs() <= tau_e + T::lit(COINCIDE_TOL);
    Ok(ModelParameters {
        alpha,
        tau_e,
        method,
        g_plus,
        g_minus,
        residual_plus,
        residual_minus,
        tau_fit,
        low_confidence,
        alpha_within_type,
    })
}

/// `ŝ_β(λ) = (1 − e^{iβλ}) / λ`, with `ŝ_β(0) = −iβ`.
pub fn s_hat<T: Real>(beta: T, lambda: C<T>) -> C<T> {
    if lambda == creal(T::zero()) {
        return cplx(T::zero(), -beta);
    }
    (creal(T::one()) - cexp(cplx(T::zero(), beta) * lambda)) / lambda
}

/// `V_β` together with its rank-one factor and truncation diagnostics.
#[derive(Debug, Clone)]
pub struct VBeta<T: Real> {
    pub beta: T,
    pub op: DenseOperator<T>,
    pub x: CVec<T>,
    /// Estimated relative `‖x_β‖²` mass carried by eigenvalues outside the retained window.
    pub tail: T,
    pub in_range: bool,
}

/// `V_β = V + ⟨·, x_β⟩ phi0` with `W x_β = ŝ_β` on the retained eigenvalues.
pub fn build_v_beta<T: Real>(pair: &AdmissiblePair<T>, beta: T, params: &ModelParameters<T>) -> Result<VBeta<T>> {
    let eig = pair.eig();
    if eig.len() < 2 {
        return invalid("pair has no eigenbasis to expand x_β in");
    }
    let space = pair.space();
    let mut x = CVec::from_element(space.dim(), creal(T::zero()));
    let mut retained = T::zero();
    let mut edge_norms = Vec::new();
    let (lo, hi) = (eig[0].lambda, eig[eig.len() - 1].lambda);
    for e in eig {
        let s = s_hat(beta, creal(e.lambda));
        if s == creal(T::zero()) {
            continue;
        }
        let p = phi(pair, creal(e.lambda))?;
        let overlap = space.inner(&e.vector, &p)?;
        if cabs(overlap) == T::zero() {
            return Err(Error::Numerical(format!("eigenvector at λ = {:?} is orthogonal to φ_λ", e.lambda)));
        }
        let c = s / overlap;
        x.axpy(c, &e.vector, creal(T::one()));
        retained += cabs(c) * cabs(c);
        if e.lambda == lo || e.lambda == hi {
            edge_norms.push(space.norm(&p));
        }
    }
    let tail = if beta == T::zero() {
        T::zero()
    } else {
        // Beyond the window |ŝ_β|² averages 2/λ²; with spacing Δ the mass past Λ is ≈ 2/(ΛΔ) per side.
        let mut est = T::zero();
        let n = eig.len();
        for (edge, gap, nrm) in [
            (lo.abs(), (eig[1].lambda - eig[0].lambda).abs(), edge_norms[0]),
            (hi.abs(), (eig[n - 1].lambda - eig[n - 2].lambda).abs(), *edge_norms.last().unwrap()),
        ] {
            est += T::lit(2.0) / (edge * gap * nrm * nrm);
        }
        est / (retained + est)
    };
    if tail > T::lit(TAIL_TOL) {
        return Err(Error::Numerical(format!(
            "eigenbasis too small for x_β: tail estimate {:.3e} > {TAIL_TOL:e}",
            tail.as_f64()
        )));
    }
    let op = pair.v().plus_rank_one(&x, pair.phi0())?;
    Ok(VBeta { beta, op, x, tail, in_range: params.in_range(beta) })
}

/// The unicellular right inverses at `β₊` and `β₋`.
#[derive(Debug, Clone)]
pub struct Extremes<T: Real> {
    pub plus: VBeta<T>,
    pub minus: VBeta<T>,
    /// `τ(E) = α = 0`: both extremes equal `V`.
    pub coincide: bool,
}

/// `V_{β±}` for `β₊ = τ + α`, `β₋ = α − τ`; when the parameters vanish within tolerance both are `V`.
pub fn unicellular_extremes<T: Real>(pair: &AdmissiblePair<T>, params: &ModelParameters<T>) -> Result<Extremes<T>> {
    let coincide = params.coincide();
    let (bp, bm) = if coincide { (T::zero(), T::zero()) } else { params.extremes() };
    Ok(Extremes { plus: build_v_beta(pair, bp, params)?, minus: build_v_beta(pair, bm, params)?, coincide })
}

/// Finite-order functional `x ↦ Σ_{j ≤ N} ⟨D^j x, y_j⟩`.
#[derive(Debug, Clone)]
pub struct FunctionalRep<T: Real> {
    ys: Vec<CVec<T>>,
}

impl<T: Real> FunctionalRep<T> {
    pub fn new(ys: Vec<CVec<T>>) -> Result<Self> {
        match ys.last() {
            None => invalid("a functional needs at least one coefficient vector"),
            Some(y) if y.iter().all(|z| *z == creal(T::zero())) => invalid("leading coefficient vector is zero"),
            Some(_) => Ok(Self { ys }),
        }
    }

    pub fn order(&self) -> usize {
        self.ys.len() - 1
    }

    pub fn coefficients(&self) -> &[CVec<T>] {
        &self.ys
    }

    /// `Σ ⟨D^j x, y_j⟩` with `D` applied through the pair.
    pub fn apply(&self, pair: &AdmissiblePair<T>, x: &CVec<T>) -> Result<C<T>> {
        let mut acc = creal(T::zero());
        let mut dx = x.clone();
        for (j, y) in self.ys.iter().enumerate() {
            if j > 0 {
                dx = pair.apply_d(&dx)?;
            }
            acc += pair.space().inner(&dx, y)?;
        }
        Ok(acc)
    }
}

/// `Wφ(z) = Σ_j z^j ⟨y_j, φ_z̄⟩` on the given points.
pub fn functional_transform<T: Real>(
    pair: &AdmissiblePair<T>,
    functional: &FunctionalRep<T>,
    lambdas: &[C<T>],
) -> Result<Vec<C<T>>> {
    lambdas
        .iter()
        .map(|&z| {
            let p = phi(pair, z.conj())?;
            let mut acc = creal(T::zero());
            let mut zj = creal(T::one());
            for y in functional.coefficients() {
                acc += zj * pair.space().inner(y, &p)?;
                zj *= z;
            }
            Ok(acc)
        })
        .collect()
}

/// CSV rows `lambda_re,lambda_im,value_re,value_im` with a header.
pub fn trace_csv<T: Real>(lambdas: &[C<T>], values: &[C<T>]) -> Result<String> {
    if lambdas.len() != values.len() {
        return Err(Error::DimensionMismatch { expected: lambdas.len(), got: values.len() });
    }
    let mut out = String::from("lambda_re,lambda_im,value_re,value_im\n");
    for (l, v) in lambdas.iter().zip(values) {
        writeln!(out, "{:e},{:e},{:e},{:e}", l.re.as_f64(), l.im.as_f64(), v.re.as_f64(), v.im.as_f64())
            .expect("writing to a String");
    }
    Ok(out)
}
