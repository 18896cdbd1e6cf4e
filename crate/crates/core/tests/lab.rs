use dbpairs::debranges::{compare_subspaces, Relation};
use dbpairs::lab::{
    base_point_operator, dichotomy_experiment, graph_norm, graph_norm_with, greens_chain_check, interval_subspace,
    invariance_residual, metric_distance, range_subspace, residual_membership, residual_membership_with, ChainVerdict,
    LatticeProbe, ProbeKind, Verdict,
};
use dbpairs::model::{ModelParameters, ParameterMethod};
use dbpairs::pairs::{canonical_pair, classical_pair, removable_pair, schrodinger_pair, AdmissiblePair, Potential, Representative};
use dbpairs::scalar::{cabs, cplx, creal};
use dbpairs::{make_grid, orthonormalize, CMat, CVec, Hamiltonian64 as Hamiltonian, C};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(alpha: f64, tau: f64) -> ModelParameters<f64> {
    ModelParameters {
        alpha,
        tau_e: tau,
        method: ParameterMethod::GrowthFit,
        g_plus: tau + alpha,
        g_minus: tau - alpha,
        residual_plus: 0.0,
        residual_minus: 0.0,
        tau_fit: tau,
        low_confidence: false,
        alpha_within_type: true,
    }
}

fn classical() -> AdmissiblePair<f64> {
    classical_pair(0.0, 1.0, 257).unwrap()
}

fn sample(pair: &AdmissiblePair<f64>, f: impl Fn(f64) -> C<f64>) -> CVec<f64> {
    CVec::from_iterator(pair.grid().len(), pair.grid().points().iter().map(|&t| f(t)))
}

fn rotating() -> Hamiltonian {
    let grid = make_grid(0.0, 1.0, 201).unwrap();
    Hamiltonian::rank_one_field(grid, |t: f64| 0.8 * t).unwrap()
}

#[test]
fn interval_subspace_dimension_and_errors() {
    let pair = classical_pair(0.0, 1.0, 101).unwrap();
    let m = interval_subspace(pair.space(), 0.0, 0.5).unwrap();
    assert_eq!(m.dim(), 50);
    assert!(m.orthonormality_defect() < 1e-14);
    assert!(interval_subspace(pair.space(), 0.3, 0.3).is_err());
    assert!(interval_subspace(pair.space(), 0.0, 1.0).is_err());
    assert!(interval_subspace(pair.space(), -0.1, 0.5).is_err());
}

#[test]
fn nested_intervals_give_nested_subspaces() {
    let pair = classical();
    let wide = interval_subspace(pair.space(), 0.1, 0.7).unwrap();
    let narrow = interval_subspace(pair.space(), 0.2, 0.5).unwrap();
    assert_eq!(compare_subspaces(&wide, &narrow).unwrap().relation, Relation::AInB);
}

#[test]
fn matrix_field_interval_subspace_drops_null_directions() {
    let h = rotating();
    let pair = canonical_pair(&h, 201).unwrap();
    let m = interval_subspace(pair.space(), 0.0, 0.5).unwrap();
    // Rank-one blocks leave one direction per node outside [0, 0.5].
    assert_eq!(m.dim(), 100);
    assert!(m.orthonormality_defect() < 1e-10);
}

#[test]
fn classical_v_left_intervals_are_invariant() {
    let pair = classical();
    let m = interval_subspace(pair.space(), 0.0, 0.4).unwrap();
    let r = invariance_residual(pair.v(), &m).unwrap();
    assert!(r.residual < 1e-12, "{}", r.residual);
    assert_eq!(r.verdict, Verdict::Invariant);
    let right = interval_subspace(pair.space(), 0.4, 1.0).unwrap();
    let r = invariance_residual(pair.v(), &right).unwrap();
    assert!(r.residual > 0.1, "{}", r.residual);
    assert_eq!(r.verdict, Verdict::NotInvariant);
}

#[test]
fn invariance_residual_matches_projection_identity() {
    // Residual is zero exactly when P V P = V P; a random subspace is far from invariant.
    let pair = classical_pair(0.0, 1.0, 33).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cols: Vec<CVec<f64>> = (0..5).map(|_| pair.space().random_vector(&mut rng)).collect();
    let raw = CMat::from_columns(&cols);
    let m = orthonormalize(pair.space().clone(), &raw).unwrap();
    let r = invariance_residual(pair.v(), &m).unwrap();
    assert!(r.residual > 1e-3);
    let whole = interval_subspace(pair.space(), 0.0, 1e-9).unwrap();
    assert!(invariance_residual(pair.v(), &whole).unwrap().residual < 1e-12);
}

#[test]
fn threshold_verdict_is_monotone() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    let m = interval_subspace(pair.space(), 0.3, 1.0).unwrap();
    let r = invariance_residual(pair.v(), &m).unwrap();
    let mut last = false;
    for t in [1e-12, 1e-6, 1e-2, 1.0, 10.0] {
        let now = r.clone().at_threshold(t).is_invariant();
        assert!(now || !last);
        last = now;
    }
    assert!(last);
}

#[test]
fn base_point_operator_is_integral_from_c() {
    let pair = classical();
    let k = pair.grid().nearest_index(0.5);
    let op = base_point_operator(&pair, k).unwrap();
    let f = sample(&pair, |t| cplx((3.0 * t).cos(), t * t));
    let got = op.apply(&f).unwrap();
    let vf = pair.v().apply(&f).unwrap();
    for j in 0..pair.grid().len() {
        assert!(cabs(got[j] - (vf[j] - vf[k])) < 1e-14);
    }
    assert!(cabs(got[k]) < 1e-15);
    let m = interval_subspace(pair.space(), 0.3, 0.7).unwrap();
    assert!(invariance_residual(&op, &m).unwrap().residual < 1e-10);
}

#[test]
fn classical_interior_dichotomy() {
    let pair = classical();
    let probe = dichotomy_experiment(&pair, &params(-0.5, 0.5), -0.5).unwrap();
    assert_eq!(probe.kind, ProbeKind::Interior);
    assert_eq!(probe.base_point, Some(0.5));
    assert_eq!(probe.labels, vec!["vanish on [0.2000, 0.6000]", "vanish on [0.4000, 0.8000]"]);
    for r in &probe.reports {
        assert!(r.residual < 1e-10, "{r:?}");
    }
    assert!(probe.all_invariant);
    assert_eq!(probe.verdict, ChainVerdict::Incomparable { witnesses: vec![(0, 1)] });
}

#[test]
fn classical_interior_base_points_all_split() {
    let pair = classical();
    for beta in [-0.2, -0.35, -0.8] {
        let probe = dichotomy_experiment(&pair, &params(-0.5, 0.5), beta).unwrap();
        assert!(probe.all_invariant && probe.has_incomparable_pair(), "β = {beta}: {probe:?}");
    }
}

#[test]
fn classical_endpoint_ladders() {
    let pair = classical();
    for beta in [0.0, -1.0] {
        let probe = dichotomy_experiment(&pair, &params(-0.5, 0.5), beta).unwrap();
        assert_eq!(probe.kind, ProbeKind::Endpoint);
        assert_eq!(probe.labels.len(), 4);
        assert!(probe.all_invariant, "{probe:?}");
        assert!(probe.is_totally_ordered());
    }
    let left = dichotomy_experiment(&pair, &params(-0.5, 0.5), 0.0).unwrap();
    assert_eq!(left.base_point, Some(0.0));
    let right = dichotomy_experiment(&pair, &params(-0.5, 0.5), -1.0).unwrap();
    assert_eq!(right.base_point, Some(1.0));
}

#[test]
fn relations_are_antisymmetric() {
    let pair = classical();
    let probe = dichotomy_experiment(&pair, &params(-0.5, 0.5), 0.0).unwrap();
    let k = probe.relations.len();
    for i in 0..k {
        for j in 0..k {
            let (r, s) = (probe.relations[i][j], probe.relations[j][i]);
            let mirrored = match r {
                Relation::AInB => Relation::BInA,
                Relation::BInA => Relation::AInB,
                x => x,
            };
            assert_eq!(s, mirrored);
        }
    }
}

#[test]
fn out_of_range_beta_is_rejected() {
    let pair = classical_pair(0.0, 1.0, 33).unwrap();
    assert!(dichotomy_experiment(&pair, &params(-0.5, 0.5), 0.5).is_err());
}

#[test]
fn schrodinger_ladder_is_invariant_chain() {
    let q = Potential::from_samples(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
    let pair = schrodinger_pair(0.0, 1.0, &q, 0.0, 301).unwrap();
    let probe = dichotomy_experiment(&pair, &params(0.0, 0.004), 0.0).unwrap();
    assert_eq!(probe.kind, ProbeKind::Endpoint);
    assert!(probe.all_invariant, "{probe:?}");
    assert!(probe.is_totally_ordered());
}

#[test]
fn unsupported_families_are_not_probed() {
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    let pair = canonical_pair(&h, 101).unwrap();
    let probe = dichotomy_experiment(&pair, &params(0.0, 1.0), 0.3).unwrap();
    assert_eq!(probe.kind, ProbeKind::NotProbed);
    assert!(matches!(probe.verdict, ChainVerdict::NotProbed { .. }));
    assert!(!probe.all_invariant && !probe.is_totally_ordered());
    let q = Potential::from_samples(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
    let removable = removable_pair(0.0, 1.0, &q, 101).unwrap();
    let probe = dichotomy_experiment(&removable.pair, &params(0.0, 0.0), 0.0).unwrap();
    assert_eq!(probe.kind, ProbeKind::NotProbed);
}

#[test]
fn greens_chain_for_rotating_rank_one_hamiltonian() {
    let h = rotating();
    let pair = canonical_pair(&h, 201).unwrap();
    let probe = greens_chain_check(&h, &pair).unwrap();
    assert_eq!(probe.kind, ProbeKind::GreensChain);
    assert!(probe.type_estimate.unwrap() <= 1e-2);
    for r in &probe.reports {
        assert!(r.residual < 1e-8, "{r:?}");
    }
    assert!(probe.is_totally_ordered());
    let via_dichotomy = dichotomy_experiment(&pair, &params(0.0, 0.0), 0.0).unwrap();
    assert_eq!(via_dichotomy.kind, ProbeKind::GreensChain);
}

#[test]
fn greens_chain_needs_singular_hamiltonian() {
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    let pair = canonical_pair(&h, 101).unwrap();
    assert!(greens_chain_check(&h, &pair).is_err());
}

#[test]
fn two_cut_points_are_nested() {
    let pair = classical();
    let subspaces: Vec<(String, _)> = [0.3, 0.6]
        .iter()
        .map(|&c| (format!("{c}"), interval_subspace(pair.space(), 0.0, c).unwrap()))
        .collect();
    let probe = LatticeProbe::new(ProbeKind::Endpoint, pair.v(), "V", &subspaces).unwrap();
    assert_eq!(probe.relations[0][1], Relation::BInA);
    assert!(probe.is_totally_ordered());
}

#[test]
fn graph_norm_examples() {
    let pair = classical();
    for order in 0..4 {
        assert!((graph_norm(&pair, pair.phi0(), order).unwrap() - 1.0).abs() < 1e-12);
    }
    // f vanishing at a is its own left-anchored preimage.
    let f = sample(&pair, |t| cplx(t.sin(), t * (1.0 - t)));
    let vf = pair.v().apply(&f).unwrap();
    let space = pair.space();
    let expect = space.norm(&vf).powi(2) + space.norm(&f).powi(2);
    assert!((graph_norm(&pair, &vf, 1).unwrap() - expect).abs() < 1e-10 * expect);
    let g = pair.project_off_kernel(&space.random_vector(&mut ChaCha8Rng::seed_from_u64(8)));
    let vg = pair.v().apply(&g).unwrap();
    let expect = space.norm(&vg).powi(2) + space.norm(&g).powi(2);
    let got = graph_norm_with(&pair, &vg, 1, Representative::MinNorm).unwrap();
    assert!((got - expect).abs() < 1e-8 * expect);
}

#[test]
fn graph_norm_rejects_domain_violation() {
    // At the left end Ran V ⊕ span phi0 only contains multiples of phi0(0) = (1, 0)ᵀ.
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    let pair = canonical_pair(&h, 41).unwrap();
    let mut x = CVec::from_element(pair.space().dim(), creal(0.0));
    x[1] = creal(1.0);
    assert!(graph_norm(&pair, &x, 1).is_err());
    assert!(graph_norm(&pair, &x, 0).is_ok());
}

#[test]
fn metric_is_bounded_and_monotone() {
    let pair = classical();
    let x = pair.v().pow(3).apply(&sample(&pair, |t| cplx(t.cos(), 1.0))).unwrap();
    let zero = CVec::from_element(x.len(), creal(0.0));
    let mut last = 0.0;
    for order in 0..4 {
        let d = metric_distance(&pair, &x, &zero, order).unwrap();
        let bound: f64 = (0..=order).map(|j| 0.5f64.powi(j as i32)).sum();
        assert!(d >= last && d <= bound);
        last = d;
    }
    assert_eq!(metric_distance(&pair, &x, &x, 3).unwrap(), 0.0);
}

#[test]
fn membership_of_iterated_integrals() {
    let pair = classical();
    let g = sample(&pair, |t| if t > 0.6 { cplx((t - 0.6).sin(), 1.0) } else { creal(0.0) });
    let x = pair.v().pow(2).apply(&g).unwrap();
    let m = interval_subspace(pair.space(), 0.0, 0.5).unwrap();
    let res = residual_membership(&pair, &m, &x, 2).unwrap();
    assert!(res.member, "{res:?}");
    assert_eq!(res.residuals.len(), 3);
    let not = residual_membership(&pair, &m, pair.phi0(), 2).unwrap();
    assert!(!not.member && not.residuals[0] > 0.1);
}

#[test]
fn membership_in_base_point_range() {
    let pair = classical_pair(0.0, 1.0, 129).unwrap();
    let k = pair.grid().nearest_index(0.5);
    let op = base_point_operator(&pair, k).unwrap();
    let m = range_subspace(&op).unwrap();
    let y = sample(&pair, |t| cplx((2.0 * t).exp(), t.cos()));
    let n = 3;
    let x = op.pow(n).apply(&y).unwrap();
    let res = residual_membership_with(&pair, &m, &x, n as usize - 1, Representative::Anchored(k)).unwrap();
    assert!(res.member, "{res:?}");
}

#[test]
fn membership_is_monotone_in_the_subspace() {
    let pair = classical();
    let g = sample(&pair, |t| if t > 0.7 { creal(t) } else { creal(0.0) });
    let x = pair.v().apply(&g).unwrap();
    let small = interval_subspace(pair.space(), 0.0, 0.6).unwrap();
    let large = interval_subspace(pair.space(), 0.0, 0.3).unwrap();
    assert!(residual_membership(&pair, &small, &x, 1).unwrap().member);
    assert!(residual_membership(&pair, &large, &x, 1).unwrap().member);
}

#[test]
fn reports_serialize() {
    let pair = classical_pair(0.0, 1.0, 33).unwrap();
    let m = interval_subspace(pair.space(), 0.0, 0.5).unwrap();
    let r = invariance_residual(pair.v(), &m).unwrap().labeled("V", "vanish on [0, 0.5]");
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for key in ["operator", "subspace", "residual", "verdict", "threshold"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["verdict"], "invariant");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn left_interval_subspaces_are_v_invariant(c in 0.05f64..0.95) {
        let pair = classical_pair(0.0, 1.0, 41).unwrap();
        let m = interval_subspace(pair.space(), 0.0, c).unwrap();
        prop_assert!(invariance_residual(pair.v(), &m).unwrap().residual < 1e-12);
    }

    #[test]
    fn verdict_matches_threshold(t in 1e-14f64..1.0) {
        let pair = classical_pair(0.0, 1.0, 33).unwrap();
        let m = interval_subspace(pair.space(), 0.2, 0.9).unwrap();
        let r = invariance_residual(pair.v(), &m).unwrap().at_threshold(t);
        prop_assert_eq!(r.is_invariant(), r.residual < t);
    }
}
