use std::f64::consts::{E, PI};
use std::sync::Arc;

use dbpairs::grid::line_angle;
use dbpairs::pairs::{
    canonical_eigenvalues, canonical_pair, classical_pair, load_bundle, removable_pair, schrodinger_pair,
    schrodinger_pair_with, AdmissiblePair, Family, Potential, Representative,
};
use dbpairs::scalar::{cabs, cplx, creal};
use dbpairs::{make_grid, CVec, Error, Hamiltonian64 as Hamiltonian, WeightedSpace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs(v: &CVec<f64>) -> f64 {
    v.iter().fold(0.0, |m, z| m.max(cabs(*z)))
}

fn zero_potential(a: f64, b: f64) -> Potential<f64> {
    Potential::from_samples(vec![a, b], vec![0.0, 0.0]).unwrap()
}

fn cosine_potential(a: f64, b: f64) -> Potential<f64> {
    let grid = make_grid(a, b, 401).unwrap();
    Potential::from_fn(&grid, |t| 10.0 * (2.0 * PI * t).cos()).unwrap()
}

fn check_right_inverse(pair: &AdmissiblePair<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..3 {
        let f = pair.project_off_kernel(&pair.space().random_vector(&mut rng));
        let vf = pair.v().apply(&f).unwrap();
        let back = pair.apply_d(&vf).unwrap();
        let err = pair.space().norm(&(&back - &f)) / pair.space().norm(&f);
        assert!(err < 1e-8, "{:?}: DV = I error {err}", pair.family());
    }
    let d0 = pair.apply_d(pair.phi0()).unwrap();
    assert!(max_abs(&d0) < 1e-10, "{:?}: D phi0 = {}", pair.family(), max_abs(&d0));
}

fn check_orthonormal(pair: &AdmissiblePair<f64>, tol: f64) {
    let eig = pair.eig();
    let space = pair.space();
    let mut worst: f64 = 0.0;
    for (i, a) in eig.iter().enumerate() {
        for b in &eig[i..] {
            let ip = space.inner(&a.vector, &b.vector).unwrap();
            let target = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
            worst = worst.max(cabs(ip - creal(target)));
        }
    }
    assert!(worst < tol, "{:?}: orthonormality defect {worst}", pair.family());
}

fn check_quasi_nilpotent(pair: &AdmissiblePair<f64>) -> Vec<f64> {
    let s = pair.v().power_norms(&[4, 8, 16, 32]);
    assert!(s.windows(2).all(|w| w[1] < w[0]), "{:?}: {s:?}", pair.family());
    assert!(s[3] < 0.25 * s[0], "{:?}: {s:?}", pair.family());
    s
}

fn check_phi_consistency(pair: &AdmissiblePair<f64>, count: usize) {
    let space = pair.space();
    for e in pair.eig().iter().take(count) {
        if let Some(phi) = pair.phi_recurrence(creal(e.lambda)) {
            let (phi, _) = phi.unwrap();
            let angle = line_angle(space, &phi, &e.vector).unwrap();
            assert!(angle < 1e-5, "{:?} λ = {}: angle {angle}", pair.family(), e.lambda);
        }
    }
}

#[test]
fn classical_volterra_of_constant() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    let one = CVec::from_element(65, creal(1.0));
    let v1 = pair.v().apply(&one).unwrap();
    for (k, &t) in pair.grid().points().iter().enumerate() {
        assert!(cabs(v1[k] - cplx(0.0, t)) < 1e-14);
    }
}

#[test]
fn classical_eigenvector_relation() {
    let pair = classical_pair(0.0, 1.0, 257).unwrap();
    let e1 = pair.eig().iter().find(|e| e.lambda > 0.0).unwrap();
    assert!((e1.lambda - 2.0 * PI).abs() < 1e-3);
    for (j, &t) in pair.grid().points().iter().enumerate() {
        assert!(cabs(e1.vector[j] - cplx((2.0 * PI * t).cos(), (2.0 * PI * t).sin())) < 1e-12);
    }
    let d = pair.apply_d(&e1.vector).unwrap();
    let err = max_abs(&(d - e1.vector.map(|z| z * e1.lambda)));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn classical_power_norm_rate() {
    let pair = classical_pair(0.0, 1.0, 512).unwrap();
    let s32 = pair.v().power_norms(&[32])[0];
    let target = E / 32.0;
    assert!(s32 > target / 2.0 && s32 < 2.0 * target, "{s32} vs {target}");
}

#[test]
fn classical_invariants() {
    let pair = classical_pair(-1.0, 2.0, 129).unwrap();
    assert_eq!(pair.eig().len(), 2 * 32 + 1);
    check_right_inverse(&pair, 1);
    check_orthonormal(&pair, 1e-8);
    check_quasi_nilpotent(&pair);
    check_phi_consistency(&pair, 65);
}

#[test]
fn anchored_representative_vanishes_at_anchor() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    let f = CVec::from_fn(65, |j, _| creal((j as f64 * 0.1).sin()));
    let vf = pair.v().apply(&f).unwrap();
    let back = pair.apply_d_with(&vf, Representative::Anchored(20)).unwrap();
    assert!(cabs(back[20]) < 1e-12);
    // Differs from f only by a kernel vector of V.
    let diff = &back - &f;
    assert!(max_abs(&pair.v().apply(&diff).unwrap()) < 1e-12);
}

#[test]
fn apply_d_rejects_inputs_outside_the_domain() {
    let pair = classical_pair(0.0, 1.0, 33).unwrap();
    let mut w = CVec::from_element(33, creal(0.0));
    w[0] = creal(1.0);
    w[1] = creal(-3.0);
    // w(a) is matched by phi0, so this is admissible; an input with fiber mismatch is not.
    assert!(pair.apply_d(&w).is_ok());
    assert!(pair.apply_d(&CVec::from_element(10, creal(0.0))).is_err());

    let h = Hamiltonian::half_identity(1.0, 33).unwrap();
    let cpair = canonical_pair(&h, 33).unwrap();
    let mut w = CVec::from_element(66, creal(0.0));
    w[1] = creal(1.0);
    assert!(matches!(cpair.apply_d(&w), Err(Error::Domain(_))));
}

#[test]
fn schrodinger_dirichlet_spectrum() {
    let pair = schrodinger_pair(0.0, 1.0, &zero_potential(0.0, 1.0), 0.0, 2000).unwrap();
    for k in 1..=10 {
        let exact = (k as f64 * PI).powi(2);
        let got = pair.eig()[k - 1].lambda;
        assert!((got - exact).abs() < 0.005 * exact, "k = {k}: {got} vs {exact}");
    }
}

#[test]
fn schrodinger_green_kernel_vanishes_on_diagonal() {
    let pair = schrodinger_pair_with(0.0, 1.0, &cosine_potential(0.0, 1.0), 0.0, 201, 10).unwrap();
    let data = pair.schrodinger().unwrap();
    let (mut diag, mut all) = (0.0f64, 0.0f64);
    for k in 0..201 {
        diag = diag.max(data.cauchy_kernel(k, k).abs());
        for j in 0..201 {
            all = all.max(data.cauchy_kernel(k, j).abs());
        }
    }
    assert!(diag < 1e-8 * all);
}

#[test]
fn schrodinger_volterra_of_constant() {
    let n = 401;
    let pair = schrodinger_pair_with(0.0, 1.0, &zero_potential(0.0, 1.0), 0.0, n, 5).unwrap();
    let one = CVec::from_element(n, creal(1.0));
    let v1 = pair.v().apply(&one).unwrap();
    let h = 1.0 / (n - 1) as f64;
    for (k, &x) in pair.grid().points().iter().enumerate() {
        assert!(cabs(v1[k] + creal(x * x / 2.0)) < h * h, "{x}");
    }
}

#[test]
fn schrodinger_wronskian_is_constant() {
    let pair = schrodinger_pair_with(0.0, 1.0, &cosine_potential(0.0, 1.0), 0.3, 801, 5).unwrap();
    let data = pair.schrodinger().unwrap();
    assert!(data.wronskian_drift() < 1e-6);
    assert_eq!(data.wronskian(), -1.0);
}

#[test]
fn schrodinger_invariants() {
    for alpha in [0.0, 0.7] {
        let pair = schrodinger_pair_with(0.0, 1.0, &cosine_potential(0.0, 1.0), alpha, 301, 40).unwrap();
        check_right_inverse(&pair, 2);
        check_orthonormal(&pair, 1e-8);
        check_quasi_nilpotent(&pair);
        // phi0 satisfies the boundary condition at a.
        let data = pair.schrodinger().unwrap();
        let phi = data.left_solution(0);
        assert!((phi[0] * alpha.cos() - phi[1] * alpha.sin()).abs() < 1e-14);
    }
}

#[test]
fn schrodinger_eigenvector_relation_for_low_modes() {
    let pair = schrodinger_pair_with(0.0, 1.0, &cosine_potential(0.0, 1.0), 0.0, 801, 5).unwrap();
    for e in pair.eig() {
        let d = pair.apply_d(&e.vector).unwrap();
        let r = &d - e.vector.map(|z| z * e.lambda);
        let rel = pair.space().norm(&r) / e.lambda.abs();
        assert!(rel < 1e-3, "λ = {}: {rel}", e.lambda);
    }
}

#[test]
fn schrodinger_counting_function_is_monotone() {
    let pair = schrodinger_pair_with(0.0, 1.0, &cosine_potential(0.0, 1.0), 0.0, 401, 60).unwrap();
    let lam: Vec<f64> = pair.eig().iter().map(|e| e.lambda).collect();
    let mut last = 0;
    for cut in (0..200).map(|i| i as f64 * 200.0) {
        let count = lam.iter().filter(|&&l| l < cut).count();
        assert!(count >= last);
        last = count;
    }
    assert!(lam.windows(2).all(|w| w[1] - w[0] > 10.0));
}

#[test]
fn schrodinger_rejects_zero_wronskian() {
    let q = Potential::from_samples(vec![0.0, 1.0], vec![-PI * PI, -PI * PI]).unwrap();
    assert!(matches!(schrodinger_pair(0.0, 1.0, &q, 0.0, 401), Err(Error::Singular(_))));
}

#[test]
fn canonical_half_identity_eigenvalues() {
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    let n = 2001;
    let roots = canonical_eigenvalues(&h, n, 10.0).unwrap();
    let k_of = |l: f64| (l / PI).round();
    assert!(roots.iter().any(|&l| (l - PI).abs() < 1e-6));
    assert!(roots.iter().any(|&l| (l + PI).abs() < 1e-6));
    let step = 2.0 / (n - 1) as f64;
    for &l in &roots {
        let k = k_of(l);
        let discrete = 4.0 / step * (k * PI / (2.0 * (n - 1) as f64)).tan();
        assert!((l - discrete).abs() < 1e-9, "{l} vs {discrete}");
    }
    assert_eq!(roots.len(), 7);
}

#[test]
fn canonical_invariants() {
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    let pair = canonical_pair(&h, 129).unwrap();
    let zero = pair.eig().iter().find(|e| e.lambda == 0.0).unwrap();
    assert!(line_angle(pair.space(), &zero.vector, pair.phi0()).unwrap() < 1e-12);
    check_right_inverse(&pair, 3);
    check_orthonormal(&pair, 1e-8);
    check_quasi_nilpotent(&pair);
    check_phi_consistency(&pair, 200);
}

#[test]
fn canonical_variable_hamiltonian() {
    let grid = make_grid(0.0, 1.5, 301).unwrap();
    let h = Hamiltonian::from_fn(grid, |t: f64| [0.5 + 0.3 * t.sin(), 0.2 * t.cos(), 0.5 - 0.3 * t.sin()]).unwrap();
    let pair = canonical_pair(&h, 301).unwrap();
    assert!(pair.eig().len() > 10);
    check_right_inverse(&pair, 4);
    check_orthonormal(&pair, 1e-8);
    check_quasi_nilpotent(&pair);
}

#[test]
fn canonical_rejects_degenerate_prefix() {
    let grid = make_grid(0.0, 1.0, 101).unwrap();
    let h = Hamiltonian::from_fn(grid, |t: f64| if t < 0.5 { [0.0, 0.0, 1.0] } else { [0.5, 0.0, 0.5] }).unwrap();
    assert!(matches!(canonical_pair(&h, 101), Err(Error::DegeneratePrefix(_))));
}

#[test]
fn removable_pair_is_rank_one_perturbation() {
    for q in [zero_potential(0.0, 1.0), cosine_potential(0.0, 1.0)] {
        let r = removable_pair(0.0, 1.0, &q, 301).unwrap();
        assert_eq!(r.pair.family(), Family::Removable);
        assert!(r.rank_one_ratio() < 1e-8, "{}", r.rank_one_ratio());
        let adj = r.a_op.adjoint();
        assert!(r.a_op.sub(&adj).unwrap().norm() < 1e-9);
        // The range of V − A is spanned by phi0.
        let diff = r.pair.v().sub(&r.a_op).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = diff.apply(&r.pair.space().random_vector(&mut rng)).unwrap();
        assert!(line_angle(r.pair.space(), &out, r.pair.phi0()).unwrap() < 1e-6);
        check_right_inverse(&r.pair, 6);
        check_quasi_nilpotent(&r.pair);
    }
}

#[test]
fn removable_pair_factor_for_zero_potential() {
    // V − A has kernel −x(1 − t) and phi0 = t/‖t‖, so x = −(1 − t)‖t‖ with the trapezoid norm.
    let r = removable_pair(0.0, 1.0, &zero_potential(0.0, 1.0), 201).unwrap();
    let g = r.pair.grid();
    let norm_t = g.points().iter().zip(g.weights()).map(|(t, w)| w * t * t).sum::<f64>().sqrt();
    assert!((norm_t - 3f64.sqrt().recip()).abs() < 1e-4);
    for (k, &t) in g.points().iter().enumerate() {
        assert!(cabs(r.x[k] - creal(-(1.0 - t) * norm_t)) < 1e-10, "{t} {}", r.x[k]);
    }
}

#[test]
fn bundle_round_trip() {
    let pair = classical_pair(0.0, 1.0, 33).unwrap();
    let bundle = pair.to_bundle();
    let json = serde_json::to_string(&bundle).unwrap();
    assert_eq!(load_bundle(&json).unwrap(), bundle);
    assert_eq!(bundle.v_re.len(), 33 * 33);
    assert_eq!(bundle.eigenvalues.len(), 17);
}

#[test]
fn potential_from_json() {
    let q = Potential::<f64>::from_json_str(r#"[{"t":0.0,"q":1.0},{"t":1.0,"q":3.0}]"#).unwrap();
    assert!((q.eval(0.25) - 1.5).abs() < 1e-15);
    assert!(Potential::<f64>::from_json_str(r#"[{"t":0.0,"q":1.0}]"#).is_err());
}

#[test]
fn single_precision_classical_pair() {
    let pair = classical_pair(0.0f32, 1.0, 33).unwrap();
    let d = pair.apply_d(pair.phi0()).unwrap();
    assert!(d.iter().all(|z| z.norm() < 1e-5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn classical_right_inverse_on_random_intervals(a in -2.0f64..0.0, len in 0.5f64..3.0, seed in 0u64..1000) {
        let pair = classical_pair(a, a + len, 65).unwrap();
        check_right_inverse(&pair, seed);
    }

    #[test]
    fn weighted_space_of_canonical_pair_matches_hamiltonian(ell in 0.5f64..3.0) {
        let h = Hamiltonian::half_identity(ell, 9).unwrap();
        let pair = canonical_pair(&h, 65).unwrap();
        let space = WeightedSpace::matrix_field(pair.grid().clone(), &vec![[0.5, 0.0, 0.5]; 65]).unwrap();
        prop_assert_eq!(pair.space().as_ref(), &space);
        let _ = Arc::clone(pair.space());
    }
}
