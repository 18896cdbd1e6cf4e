//! Invariant-subspace experiments: interval subspaces, invariance residuals,
//! chain versus incomparability probes, and finite-order membership checks.

use std::sync::Arc;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::canonical::{kdb_type, Hamiltonian};
use crate::debranges::{compare_subspaces, Relation};
use crate::error::{check_dim, invalid, Error, Result};
use crate::grid::{cmatmul, orthonormalize, sym2_eigen, CMat, CVec, DenseOperator, Subspace, WeightedSpace};
use crate::model::{build_v_beta, ModelParameters};
use crate::pairs::{AdmissiblePair, Family, Representative};
use crate::scalar::{cabs, creal, Real};

/// Default invariance threshold on unit-norm frames.
pub const INVARIANCE_TOL: f64 = 1e-8;
/// Relative tolerance of `residual_membership`.
pub const MEMBERSHIP_TOL: f64 = 1e-6;
/// Largest `det H` accepted as singular by `greens_chain_check`.
pub const SINGULAR_DET_TOL: f64 = 1e-10;
/// Relative positions of ladder cut points.
pub const LADDER: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
const NODE_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-12;

/// `{f : f = 0 at the nodes in [c, d]}` as an orthonormal frame of node-supported vectors.
pub fn interval_subspace<T: Real>(space: &Arc<WeightedSpace<T>>, c: T, d: T) -> Result<Subspace<T>> {
    let grid = space.grid();
    let (a, b) = (grid.a(), grid.b());
    if !(a <= c && c < d && d <= b) {
        return invalid(format!("need a ≤ c < d ≤ b, got [{c:?}, {d:?}] in [{a:?}, {b:?}]"));
    }
    let slack = T::lit(NODE_TOL) * grid.length();
    let fb = space.fiber();
    let mut cols: Vec<(usize, [T; 2])> = Vec::new();
    for (j, &t) in grid.points().iter().enumerate() {
        if t >= c - slack && t <= d + slack {
            continue;
        }
        let g = space.metric_block(j);
        if fb == 1 {
            if g[0] > T::zero() {
                cols.push((j, [T::one() / g[0].sqrt(), T::zero()]));
            }
            continue;
        }
        let (l1, l2, v) = sym2_eigen(g[0], g[1], g[3]);
        let tol = T::lit(RANK_TOL) * l1.abs().max(l2.abs());
        for (mu, dir) in [(l1, [v[0], v[1]]), (l2, [-v[1], v[0]])] {
            if mu > tol {
                let s = T::one() / mu.sqrt();
                cols.push((j, [dir[0] * s, dir[1] * s]));
            }
        }
    }
    if cols.is_empty() {
        return invalid(format!("no grid nodes outside [{c:?}, {d:?}]"));
    }
    let mut frame = CMat::from_element(space.dim(), cols.len(), creal(T::zero()));
    for (k, (j, v)) in cols.iter().enumerate() {
        for r in 0..fb {
            frame[(j * fb + r, k)] = creal(v[r]);
        }
    }
    Ok(Subspace::from_orthonormal(space.clone(), frame))
}

/// Orthonormal frame of the range of `op`.
pub fn range_subspace<T: Real>(op: &DenseOperator<T>) -> Result<Subspace<T>> {
    orthonormalize(op.space().clone(), op.matrix())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Invariant,
    NotInvariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport<T> {
    pub operator: String,
    pub subspace: String,
    /// `‖(I − P_M) V P_M‖`.
    pub residual: T,
    pub verdict: Verdict,
    pub threshold: T,
}

impl<T: Real> InvarianceReport<T> {
    pub fn labeled(mut self, operator: impl Into<String>, subspace: impl Into<String>) -> Self {
        self.operator = operator.into();
        self.subspace = subspace.into();
        self
    }

    pub fn at_threshold(mut self, threshold: T) -> Self {
        self.threshold = threshold;
        self.verdict = if self.residual < threshold { Verdict::Invariant } else { Verdict::NotInvariant };
        self
    }

    pub fn is_invariant(&self) -> bool {
        self.verdict == Verdict::Invariant
    }
}

/// `‖(I − P_M) V P_M‖` as `sqrt(λ_max(Rᴴ G R))` with `R = (I − F Fᴴ G) V F`.
pub fn invariance_residual<T: Real>(v: &DenseOperator<T>, m: &Subspace<T>) -> Result<InvarianceReport<T>> {
    check_dim(v.dim(), m.space().dim())?;
    if !Arc::ptr_eq(v.space(), m.space()) && v.space().as_ref() != m.space().as_ref() {
        return invalid("operator and subspace live on different spaces");
    }
    let residual = if m.dim() == 0 {
        T::zero()
    } else {
        let vf = cmatmul(v.matrix(), m.frame());
        let r = &vf - m.project_cols(&vf);
        let g = m.space().gram(&r, &r);
        let g = (&g + g.adjoint()).map(|z| z * T::lit(0.5));
        let top = SymmetricEigen::new(g).eigenvalues.iter().fold(T::zero(), |a, &x| a.max(x));
        top.max(T::zero()).sqrt()
    };
    Ok(InvarianceReport {
        operator: String::new(),
        subspace: String::new(),
        residual,
        verdict: Verdict::NotInvariant,
        threshold: T::zero(),
    }
    .at_threshold(T::lit(INVARIANCE_TOL)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Interior base point: two invariant subspaces predicted incomparable.
    Interior,
    /// Extreme `β±`: a ladder predicted totally ordered.
    Endpoint,
    /// Singular Hamiltonian: the `M_c` chain of the Green's operator.
    GreensChain,
    NotProbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChainVerdict {
    TotallyOrdered,
    /// Index pairs of subspaces neither of which contains the other.
    Incomparable { witnesses: Vec<(usize, usize)> },
    NotProbed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeProbe<T> {
    pub kind: ProbeKind,
    pub operator: String,
    pub labels: Vec<String>,
    /// `relations[i][j]` compares subspace `i` (as A) with subspace `j` (as B).
    pub relations: Vec<Vec<Relation>>,
    pub reports: Vec<InvarianceReport<T>>,
    pub verdict: ChainVerdict,
    pub all_invariant: bool,
    pub base_point: Option<T>,
    /// Krein–de Branges type, for Green's chains.
    pub type_estimate: Option<T>,
    /// Entrywise relative distance between the eigen-expanded `V_β` and the grid-level base-point operator.
    pub eigen_operator_distance: Option<T>,
}

impl<T: Real> LatticeProbe<T> {
    /// Pairwise comparisons and invariance reports of labeled subspaces under `op`.
    pub fn new(
        kind: ProbeKind,
        op: &DenseOperator<T>,
        op_label: &str,
        subspaces: &[(String, Subspace<T>)],
    ) -> Result<Self> {
        let k = subspaces.len();
        let mut relations = vec![vec![Relation::Equal; k]; k];
        let mut witnesses = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let cmp = compare_subspaces(&subspaces[i].1, &subspaces[j].1)?;
                relations[i][j] = cmp.relation;
                relations[j][i] = match cmp.relation {
                    Relation::AInB => Relation::BInA,
                    Relation::BInA => Relation::AInB,
                    r => r,
                };
                if cmp.relation == Relation::Incomparable {
                    witnesses.push((i, j));
                }
            }
        }
        let reports = subspaces
            .iter()
            .map(|(label, m)| Ok(invariance_residual(op, m)?.labeled(op_label, label.clone())))
            .collect::<Result<Vec<_>>>()?;
        let verdict =
            if witnesses.is_empty() { ChainVerdict::TotallyOrdered } else { ChainVerdict::Incomparable { witnesses } };
        Ok(Self {
            kind,
            operator: op_label.to_string(),
            labels: subspaces.iter().map(|(l, _)| l.clone()).collect(),
            relations,
            all_invariant: reports.iter().all(InvarianceReport::is_invariant),
            reports,
            verdict,
            base_point: None,
            type_estimate: None,
            eigen_operator_distance: None,
        })
    }

    pub fn not_probed(operator: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            kind: ProbeKind::NotProbed,
            operator: operator.into(),
            labels: Vec::new(),
            relations: Vec::new(),
            reports: Vec::new(),
            verdict: ChainVerdict::NotProbed { reason: reason.into() },
            all_invariant: false,
            base_point: None,
            type_estimate: None,
            eigen_operator_distance: None,
        }
    }

    pub fn is_totally_ordered(&self) -> bool {
        self.verdict == ChainVerdict::TotallyOrdered
    }

    pub fn has_incomparable_pair(&self) -> bool {
        matches!(self.verdict, ChainVerdict::Incomparable { .. })
    }
}

/// `V_c = V + ⟨·, x_c⟩ phi0` with `x_c` chosen so that `V_c f` vanishes at the node `k`.
/// For the classical pair this is the grid-level `i ∫_c^t`.
pub fn base_point_operator<T: Real>(pair: &AdmissiblePair<T>, k: usize) -> Result<DenseOperator<T>> {
    let space = pair.space();
    if space.fiber() != 1 {
        return invalid("base-point operators are defined for scalar spaces");
    }
    if k >= space.dim() {
        return Err(Error::DimensionMismatch { expected: space.dim(), got: k });
    }
    let p = pair.phi0()[k];
    if cabs(p) == T::zero() {
        return invalid("phi0 vanishes at the base point");
    }
    let m = pair.v().matrix();
    let mut x = CVec::from_element(space.dim(), creal(T::zero()));
    for j in 0..space.dim() {
        let w = space.metric_block(j)[0];
        if w > T::zero() {
            x[j] = (-m[(k, j)] / (p * w)).conj();
        } else if cabs(m[(k, j)]) > T::zero() {
            return invalid("zero weight at a node the base-point functional depends on");
        }
    }
    pair.v().plus_rank_one(&x, pair.phi0())
}

fn fmt_point<T: Real>(t: T) -> String {
    format!("{:.4}", t.as_f64())
}

fn ladder<T: Real>(space: &Arc<WeightedSpace<T>>, from_left: bool) -> Result<Vec<(String, Subspace<T>)>> {
    let grid = space.grid();
    let (a, b, len) = (grid.a(), grid.b(), grid.length());
    LADDER
        .iter()
        .map(|&s| {
            let c = a + T::lit(s) * len;
            let (lo, hi) = if from_left { (a, c) } else { (c, b) };
            Ok((format!("vanish on [{}, {}]", fmt_point(lo), fmt_point(hi)), interval_subspace(space, lo, hi)?))
        })
        .collect()
}

fn is_singular<T: Real>(h: &Hamiltonian<T>) -> bool {
    (0..h.grid().len()).all(|j| h.det_at(j).abs() < T::lit(SINGULAR_DET_TOL))
}

/// Probes the invariant-subspace lattice of the right inverse selected by `β`
/// (requires `|β − α| ≤ τ(E)`).
pub fn dichotomy_experiment<T: Real>(
    pair: &AdmissiblePair<T>,
    params: &ModelParameters<T>,
    beta: T,
) -> Result<LatticeProbe<T>> {
    if !params.in_range(beta) {
        return invalid(format!(
            "β = {beta:?} is outside |β − α| ≤ τ(E) (α = {:?}, τ = {:?})",
            params.alpha, params.tau_e
        ));
    }
    let space = pair.space();
    match pair.family() {
        Family::Classical => classical_dichotomy(pair, params, beta),
        Family::Schrodinger => {
            let mut probe = LatticeProbe::new(ProbeKind::Endpoint, pair.v(), "V", &ladder(space, true)?)?;
            probe.base_point = Some(pair.grid().a());
            Ok(probe)
        }
        Family::Canonical => match pair.hamiltonian() {
            Some(h) if is_singular(h) => greens_chain_check(h, pair),
            _ => Ok(LatticeProbe::not_probed(
                format!("V_β, β = {}", fmt_point(beta)),
                "no concrete invariant subspaces are known for canonical systems with det H > 0",
            )),
        },
        Family::Removable => Ok(LatticeProbe::not_probed(
            format!("V_β, β = {}", fmt_point(beta)),
            "no concrete invariant subspaces are known for the removable family",
        )),
    }
}

fn classical_dichotomy<T: Real>(
    pair: &AdmissiblePair<T>,
    params: &ModelParameters<T>,
    beta: T,
) -> Result<LatticeProbe<T>> {
    let space = pair.space();
    let grid = pair.grid();
    let (a, b, len) = (grid.a(), grid.b(), grid.length());
    let (bp, bm) = params.extremes();
    let span = bp - bm;
    if !(span > T::zero()) {
        return invalid("classical probe needs τ(E) > 0");
    }
    // β₊ ↔ a, β₋ ↔ b, linearly in between.
    let c = (a + (bp - beta) / span * len).max(a).min(b);
    let k = grid.nearest_index(c);
    let c = grid.points()[k];
    let op = base_point_operator(pair, k)?;
    let label = format!("V_c, c = {}", fmt_point(c));
    let mut probe = if k == 0 || k == grid.len() - 1 {
        LatticeProbe::new(ProbeKind::Endpoint, &op, &label, &ladder(space, k == 0)?)?
    } else {
        let delta = (c - a).min(b - c);
        let intervals = [
            (c - T::lit(0.6) * delta, c + T::lit(0.2) * delta),
            (c - T::lit(0.2) * delta, c + T::lit(0.6) * delta),
        ];
        let subspaces = intervals
            .iter()
            .map(|&(p, q)| {
                Ok((format!("vanish on [{}, {}]", fmt_point(p), fmt_point(q)), interval_subspace(space, p, q)?))
            })
            .collect::<Result<Vec<_>>>()?;
        LatticeProbe::new(ProbeKind::Interior, &op, &label, &subspaces)?
    };
    probe.base_point = Some(c);
    probe.eigen_operator_distance = build_v_beta(pair, beta, params).ok().map(|vb| op.relative_distance(&vb.op));
    Ok(probe)
}

/// `M_c` chain of the Green's operator of a Hamiltonian with `det H = 0` a.e.
pub fn greens_chain_check<T: Real>(h: &Hamiltonian<T>, pair: &AdmissiblePair<T>) -> Result<LatticeProbe<T>> {
    if !is_singular(h) {
        return invalid("greens_chain_check needs det H = 0 at every node");
    }
    if pair.family() != Family::Canonical {
        return invalid("greens_chain_check needs a canonical pair");
    }
    let tau = kdb_type(h, h.ell())?;
    let mut probe = LatticeProbe::new(ProbeKind::GreensChain, pair.v(), "V", &ladder(pair.space(), true)?)?;
    probe.type_estimate = Some(tau);
    probe.base_point = Some(pair.grid().a());
    Ok(probe)
}

/// Preimage used by the iterated-`D` routines: vanishing at the left end, so that
/// `D^j Vᴺ g = V^{N−j} g` exactly on trapezoid families.
pub const LEFT_ANCHOR: Representative = Representative::Anchored(0);

fn iterate_d<T: Real>(pair: &AdmissiblePair<T>, x: &CVec<T>, order: usize, rep: Representative) -> Result<Vec<CVec<T>>> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(x.clone());
    for j in 0..order {
        let next = pair.apply_d_with(&out[j], rep)?;
        out.push(next);
    }
    Ok(out)
}

/// `Σ_{k ≤ N} ‖D^k x‖²`.
pub fn graph_norm<T: Real>(pair: &AdmissiblePair<T>, x: &CVec<T>, order: usize) -> Result<T> {
    graph_norm_with(pair, x, order, LEFT_ANCHOR)
}

pub fn graph_norm_with<T: Real>(pair: &AdmissiblePair<T>, x: &CVec<T>, order: usize, rep: Representative) -> Result<T> {
    let space = pair.space();
    Ok(iterate_d(pair, x, order, rep)?.iter().fold(T::zero(), |acc, d| acc + space.norm(d).powi(2)))
}

/// `d(x, y) = Σ_{j ≤ N} 2^{−j} ‖D^j(x − y)‖ / (1 + ‖D^j(x − y)‖)`.
pub fn metric_distance<T: Real>(pair: &AdmissiblePair<T>, x: &CVec<T>, y: &CVec<T>, order: usize) -> Result<T> {
    let space = pair.space();
    let mut acc = T::zero();
    let mut weight = T::one();
    for d in iterate_d(pair, &(x - y), order, LEFT_ANCHOR)? {
        let n = space.norm(&d);
        acc += weight * n / (T::one() + n);
        weight *= T::lit(0.5);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership<T> {
    pub member: bool,
    /// `‖(I − P_M) D^j x‖ / ‖D^j x‖` for `j = 0..=N` (zero for zero vectors).
    pub residuals: Vec<T>,
}

/// Whether `D^j x ∈ M` for every `j ≤ N`.
pub fn residual_membership<T: Real>(
    pair: &AdmissiblePair<T>,
    m: &Subspace<T>,
    x: &CVec<T>,
    order: usize,
) -> Result<Membership<T>> {
    residual_membership_with(pair, m, x, order, LEFT_ANCHOR)
}

pub fn residual_membership_with<T: Real>(
    pair: &AdmissiblePair<T>,
    m: &Subspace<T>,
    x: &CVec<T>,
    order: usize,
    rep: Representative,
) -> Result<Membership<T>> {
    let space = pair.space();
    let residuals: Vec<T> = iterate_d(pair, x, order, rep)?
        .iter()
        .map(|d| {
            let n = space.norm(d);
            if n == T::zero() {
                T::zero()
            } else {
                m.residual_norm(d) / n
            }
        })
        .collect();
    let member = residuals.iter().all(|&r| r < T::lit(MEMBERSHIP_TOL));
    Ok(Membership { member, residuals })
}
