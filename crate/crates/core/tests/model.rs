use std::f64::consts::PI;

use dbpairs::model::{
    backward_shift_test, build_v_beta, estimate_model_parameters, functional_transform, phi, s_hat, trace_csv,
    transform, unicellular_extremes, FunctionalRep, ModelParameters, ParameterMethod,
};
use dbpairs::pairs::{
    canonical_pair, classical_pair, classical_pair_with, removable_pair, schrodinger_pair, AdmissiblePair, Potential,
};
use dbpairs::scalar::{cabs, cexp, cplx, creal};
use dbpairs::{CVec, Hamiltonian64 as Hamiltonian, C};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs(v: &CVec<f64>) -> f64 {
    v.iter().fold(0.0, |m, z| m.max(cabs(*z)))
}

fn zero_potential() -> Potential<f64> {
    Potential::from_samples(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap()
}

fn sample(pair: &AdmissiblePair<f64>, f: impl Fn(f64) -> C<f64>) -> CVec<f64> {
    CVec::from_iterator(pair.grid().len(), pair.grid().points().iter().map(|&t| f(t)))
}

fn classical_params(alpha: f64, tau: f64) -> ModelParameters<f64> {
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

/// Trapezoid value of `i ∫_c^t f` at each node, with `c` a node.
fn integral_from(pair: &AdmissiblePair<f64>, f: &CVec<f64>, c: usize) -> CVec<f64> {
    let t = pair.grid().points();
    let mut cum = vec![creal(0.0); t.len()];
    for k in 1..t.len() {
        cum[k] = cum[k - 1] + (f[k] + f[k - 1]) * (0.5 * (t[k] - t[k - 1]));
    }
    CVec::from_fn(t.len(), |k, _| (cum[k] - cum[c]) * cplx(0.0, 1.0))
}

/// Off-eigenvalue bound on `|W x_β − ŝ_β|` for the classical pair on (0, 1): the dropped
/// `1/λ_k` coefficients add coherently to about `Σ_{|k|>K} 2/(2πk)²`.
fn symbol_tail(k_max: usize) -> f64 {
    2.0 / (PI * PI * k_max as f64)
}

fn random_lambdas(rng: &mut ChaCha8Rng, count: usize, radius: f64) -> Vec<C<f64>> {
    (0..count)
        .map(|_| {
            let re = rng.gen_range(0.5..radius) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            cplx(re, rng.gen_range(-2.0..2.0))
        })
        .collect()
}

#[test]
fn phi_at_zero_is_phi0() {
    let pair = classical_pair(0.0, 1.0, 33).unwrap();
    assert_eq!(phi(&pair, creal(0.0)).unwrap(), *pair.phi0());
}

#[test]
fn classical_phi_is_exponential() {
    for n in [257, 513] {
        let pair = classical_pair(0.0, 1.0, n).unwrap();
        let lambda = cplx(3.0, 0.5);
        let p = phi(&pair, lambda).unwrap();
        let exact = sample(&pair, |t| cexp(cplx(0.0, 1.0) * lambda * t));
        let h = 1.0 / (n - 1) as f64;
        let err = max_abs(&(p - exact));
        assert!(err < 2.0 * h * h * cabs(lambda).powi(3), "n = {n}: {err}");
    }
}

#[test]
fn canonical_phi_matches_transfer_solution() {
    // H = I/2 on (0, 2): Θ(t, λ) = (cos(λt/2), −sin(λt/2)) with phi0 ∝ (1, 0).
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    let pair = canonical_pair(&h, 4001).unwrap();
    let lambda = 1.7;
    let p = phi(&pair, creal(lambda)).unwrap();
    let scale = cabs(pair.phi0()[0]);
    let mut worst: f64 = 0.0;
    for (k, &t) in pair.grid().points().iter().enumerate() {
        let exact = [(lambda * t / 2.0).cos(), -(lambda * t / 2.0).sin()];
        for r in 0..2 {
            worst = worst.max(cabs(p[2 * k + r] - creal(scale * exact[r])));
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn phi_refuses_deep_pseudospectrum() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    // −(2/h)·i makes a diagonal block of I − λV singular.
    let h = 1.0 / 64.0;
    assert!(phi(&pair, cplx(0.0, -2.0 / h)).is_err());
}

#[test]
fn transform_of_phi0_at_zero_is_one() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    let v = transform(&pair, pair.phi0(), creal(0.0)).unwrap();
    assert!(cabs(v - creal(1.0)) < 1e-14);
}

#[test]
fn classical_transform_of_constant() {
    let n = 1025;
    let pair: AdmissiblePair<f64> = classical_pair(0.0, 1.0, n).unwrap();
    let one = CVec::from_element(n, creal(1.0));
    let h = 1.0 / (n - 1) as f64;
    for lambda in [cplx(1.0, 0.0), cplx(-4.0, 0.3), cplx(7.5, -1.0), cplx(0.2, 2.0)] {
        let got = transform(&pair, &one, lambda).unwrap();
        let i = cplx(0.0, 1.0);
        let exact = (creal(1.0) - cexp(-i * lambda)) / (i * lambda);
        let err = cabs(got - exact);
        assert!(err < h * h * (1.0 + cabs(lambda).powi(2)), "λ = {lambda}: {err}");
    }
}

#[test]
fn parseval_on_eigenbasis() {
    let pair = classical_pair(0.0, 1.0, 257).unwrap();
    let f = sample(&pair, |t| cplx((2.0 * PI * t).cos().exp(), (4.0 * PI * t).sin()));
    let space = pair.space();
    let total: f64 = pair.eig().iter().map(|e| cabs(space.inner(&f, &e.vector).unwrap()).powi(2)).sum();
    let norm2 = space.norm(&f).powi(2);
    assert!((total - norm2).abs() / norm2 < 1e-4, "{total} vs {norm2}");
}

#[test]
fn transform_determines_eigen_coefficients() {
    let pair = classical_pair(0.0, 1.0, 129).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coeffs: Vec<C<f64>> = pair.eig().iter().map(|_| cplx(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let mut f = CVec::from_element(129, creal(0.0));
    for (c, e) in coeffs.iter().zip(pair.eig()) {
        f.axpy(*c, &e.vector, creal(1.0));
    }
    let space = pair.space();
    let mut worst: f64 = 0.0;
    for (c, e) in coeffs.iter().zip(pair.eig()) {
        let w = transform(&pair, &f, creal(e.lambda)).unwrap();
        let p = phi(&pair, creal(e.lambda)).unwrap();
        let rec = w / space.inner(&e.vector, &p).unwrap();
        worst = worst.max(cabs(rec - c));
    }
    assert!(worst < 1e-8, "{worst}");
}

fn check_backward_shift(pair: &AdmissiblePair<f64>, seed: u64, radius: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas = random_lambdas(&mut rng, 20, radius);
    for _ in 0..5 {
        let f = pair.space().random_vector(&mut rng);
        let r = backward_shift_test(pair, &f, &lambdas).unwrap();
        assert!(r < 1e-6, "{:?}: residual {r}", pair.family());
    }
    let r = backward_shift_test(pair, pair.phi0(), &lambdas).unwrap();
    assert!(r < 1e-6, "{:?}: phi0 residual {r}", pair.family());
}

#[test]
fn backward_shift_all_families() {
    check_backward_shift(&classical_pair(0.0, 1.0, 129).unwrap(), 1, 30.0);
    check_backward_shift(&schrodinger_pair(0.0, 1.0, &zero_potential(), 0.3, 201).unwrap(), 2, 30.0);
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    check_backward_shift(&canonical_pair(&h, 201).unwrap(), 3, 30.0);
    let q = Potential::from_samples(vec![0.0, 0.5, 1.0], vec![1.0, -2.0, 1.0]).unwrap();
    check_backward_shift(&removable_pair(0.0, 1.0, &q, 201).unwrap().pair, 4, 30.0);
}

#[test]
fn backward_shift_limit_at_zero() {
    let pair = classical_pair(0.0, 1.0, 129).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = pair.space().random_vector(&mut rng);
    let r = backward_shift_test(&pair, &f, &[creal(0.0)]).unwrap();
    assert!(r < 1e-6, "{r}");
}

#[test]
fn classical_parameters() {
    let pair: AdmissiblePair<f64> = classical_pair(0.0, 1.0, 513).unwrap();
    let p = estimate_model_parameters(&pair, 200.0).unwrap();
    assert_eq!(p.method, ParameterMethod::GrowthFit);
    assert!((p.alpha + 0.5).abs() < 0.02, "{p:?}");
    assert!((p.tau_e - 0.5).abs() < 0.02, "{p:?}");
    assert!(p.alpha_within_type && !p.coincide());
    let (bp, bm) = p.extremes();
    assert!(bp.abs() < 0.04 && (bm + 1.0).abs() < 0.04, "{bp} {bm}");
}

#[test]
fn schrodinger_parameters() {
    let pair = schrodinger_pair(0.0, 1.0, &zero_potential(), 0.0, 2000).unwrap();
    let p = estimate_model_parameters(&pair, 5000.0).unwrap();
    assert!(p.alpha.abs() < 0.02, "{p:?}");
    assert!(p.tau_e <= 0.02, "{p:?}");
    assert!(p.coincide());
}

#[test]
fn canonical_parameters_use_kdb_formula() {
    let h = Hamiltonian::half_identity(2.0, 9).unwrap();
    let pair = canonical_pair(&h, 801).unwrap();
    let p = estimate_model_parameters(&pair, 200.0).unwrap();
    assert_eq!(p.method, ParameterMethod::KdbFormula);
    assert!(p.alpha.abs() < 0.02, "{p:?}");
    assert!((p.tau_e - 1.0).abs() < 0.02, "{p:?}");
    assert!((p.tau_fit - 1.0).abs() < 0.05, "{p:?}");
}

#[test]
fn parameters_reject_small_y_max() {
    let pair = classical_pair(0.0, 1.0, 33).unwrap();
    assert!(estimate_model_parameters(&pair, 10.0).is_err());
}

#[test]
fn s_hat_limit() {
    assert_eq!(s_hat(0.7, creal(0.0)), cplx(0.0, -0.7));
    let near = s_hat(0.7, creal(1e-7));
    assert!(cabs(near - cplx(0.0, -0.7)) < 1e-6);
}

#[test]
fn v_beta_zero_is_v() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    let vb = build_v_beta(&pair, 0.0, &classical_params(-0.5, 0.5)).unwrap();
    assert_eq!(max_abs(&vb.x), 0.0);
    assert_eq!(vb.tail, 0.0);
    assert_eq!(vb.op.relative_distance(pair.v()), 0.0);
}

#[test]
fn v_beta_matches_base_point_integral() {
    let n = 1024;
    let pair = classical_pair_with(0.0, 1.0, n, 256).unwrap();
    let params = classical_params(-0.5, 0.5);
    let vb = build_v_beta(&pair, -0.5, &params).unwrap();
    assert!(vb.in_range);
    assert!(vb.tail < 1e-3, "{}", vb.tail);
    let c = pair.grid().nearest_index(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let (a, w) = (rng.gen_range(-1.0..1.0), rng.gen_range(1.0..8.0));
        let f = sample(&pair, |t| cplx((w * t).cos(), a * (t * t - t).exp()));
        let got = vb.op.apply(&f).unwrap();
        let err = max_abs(&(got - integral_from(&pair, &f, c)));
        assert!(err < 1e-3, "sup error {err}");
    }
}

#[test]
fn v_beta_symbol_identity() {
    let pair = classical_pair_with(0.0, 1.0, 1024, 256).unwrap();
    let params = classical_params(-0.5, 0.5);
    for beta in [-0.5, -0.2, -0.9] {
        let vb = build_v_beta(&pair, beta, &params).unwrap();
        let mut worst: f64 = 0.0;
        for e in pair.eig() {
            let got = transform(&pair, &vb.x, creal(e.lambda)).unwrap();
            worst = worst.max(cabs(got - s_hat(beta, creal(e.lambda))));
        }
        assert!(worst < 1e-10, "β = {beta}: {worst}");
    }
}

#[test]
fn v_beta_symbol_off_eigenvalues() {
    let pair = classical_pair_with(0.0, 1.0, 1024, 256).unwrap();
    let vb = build_v_beta(&pair, -0.5, &classical_params(-0.5, 0.5)).unwrap();
    for lambda in [cplx(3.3, 0.0), cplx(-11.1, 0.5), cplx(0.7, -1.0)] {
        let err = cabs(transform(&pair, &vb.x, lambda).unwrap() - s_hat(-0.5, lambda));
        assert!(err < symbol_tail(256), "λ = {lambda}: {err}");
    }
}

#[test]
fn v_beta_is_right_inverse() {
    let pair = classical_pair(0.0, 1.0, 513).unwrap();
    let vb = build_v_beta(&pair, -0.7, &classical_params(-0.5, 0.5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let f = pair.project_off_kernel(&pair.space().random_vector(&mut rng));
        let back = pair.apply_d(&vb.op.apply(&f).unwrap()).unwrap();
        let err = pair.space().norm(&(&back - &f)) / pair.space().norm(&f);
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn v_beta_in_range_versus_out_of_range() {
    // Truncating x_β leaves a rank-one error whose eigenvalues shrink only like 1/ln K,
    // so the in-range proxies decrease but stay far below the out-of-range spectral radius.
    let pair = classical_pair_with(0.0, 1.0, 769, 192).unwrap();
    let params = classical_params(-0.5, 0.5);
    let inside = build_v_beta(&pair, -0.5, &params).unwrap().op.power_norms(&[4, 8, 16, 32]);
    let outside = build_v_beta(&pair, 0.5, &params).unwrap().op.power_norms(&[4, 8, 16, 32]);
    assert!(inside.windows(2).all(|w| w[1] < w[0]), "{inside:?}");
    assert!(inside[3] < 0.1 * outside[3], "{inside:?} vs {outside:?}");
}

#[test]
fn v_beta_out_of_range_keeps_spectral_radius() {
    let params = classical_params(-0.5, 0.5);
    let mut radii = Vec::new();
    for n in [385, 769] {
        let pair = classical_pair(0.0, 1.0, n).unwrap();
        let vb = build_v_beta(&pair, 0.5, &params).unwrap();
        assert!(!vb.in_range);
        let s = vb.op.power_norms(&[32, 64]);
        radii.push(s[1]);
        assert!(s[1] > 0.9, "n = {n}: {s:?}");
    }
    assert!(radii[1] > 0.5 * radii[0], "{radii:?}");
}

#[test]
fn extremes_are_endpoint_volterra_operators() {
    let n = 1024;
    let pair = classical_pair_with(0.0, 1.0, n, 256).unwrap();
    let ex = unicellular_extremes(&pair, &classical_params(-0.5, 0.5)).unwrap();
    assert!(!ex.coincide);
    assert_eq!(ex.plus.beta, 0.0);
    assert_eq!(ex.minus.beta, -1.0);
    // Periodic and smooth: the trapezoid eigenvalues lag 2πk at high k, which the
    // slowly decaying spectrum of a non-periodic f would pick up at the 1e-3 level.
    let f = sample(&pair, |t| cplx((2.0 * PI * t).cos().exp(), (4.0 * PI * t).sin()));
    let plus = ex.plus.op.apply(&f).unwrap();
    assert!(max_abs(&(plus - integral_from(&pair, &f, 0))) < 1e-12);
    let minus = ex.minus.op.apply(&f).unwrap();
    let err = max_abs(&(minus - integral_from(&pair, &f, n - 1)));
    assert!(err < 1e-3, "{err} tail {}", ex.minus.tail);
}

#[test]
fn extremes_coincide_for_schrodinger() {
    let pair = schrodinger_pair(0.0, 1.0, &zero_potential(), 0.0, 400).unwrap();
    let ex = unicellular_extremes(&pair, &classical_params(0.004, 0.01)).unwrap();
    assert!(ex.coincide);
    assert_eq!(ex.plus.op.relative_distance(pair.v()), 0.0);
    assert_eq!(ex.minus.op.relative_distance(pair.v()), 0.0);
}

#[test]
fn functional_rep_rejects_zero_leading_term() {
    assert!(FunctionalRep::<f64>::new(vec![]).is_err());
    let z = CVec::from_element(5, creal(0.0));
    assert!(FunctionalRep::new(vec![CVec::from_element(5, creal(1.0)), z]).is_err());
}

#[test]
fn functional_of_order_zero_is_transform() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y = pair.space().random_vector(&mut rng);
    let fr = FunctionalRep::new(vec![y.clone()]).unwrap();
    assert_eq!(fr.order(), 0);
    let lambdas = random_lambdas(&mut rng, 5, 10.0);
    let got = functional_transform(&pair, &fr, &lambdas).unwrap();
    for (l, g) in lambdas.iter().zip(got) {
        let expect = transform(&pair, &y, *l).unwrap();
        assert!(cabs(g - expect) < 1e-12 * (1.0 + cabs(expect)));
    }
}

#[test]
fn functional_linearity() {
    let pair = classical_pair(0.0, 1.0, 65).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let y = pair.space().random_vector(&mut rng);
    let fr = FunctionalRep::new(vec![y.clone(), y.clone()]).unwrap();
    let base = FunctionalRep::new(vec![y]).unwrap();
    let lambdas = random_lambdas(&mut rng, 8, 10.0);
    let got = functional_transform(&pair, &fr, &lambdas).unwrap();
    let plain = functional_transform(&pair, &base, &lambdas).unwrap();
    for ((l, g), p) in lambdas.iter().zip(got).zip(plain) {
        let expect = (creal(1.0) + l) * p;
        assert!(cabs(g - expect) <= 1e-10 * cabs(expect).max(1.0));
    }
}

#[test]
fn functional_apply_uses_derivatives() {
    let pair = classical_pair(0.0, 1.0, 129).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let y0 = pair.space().random_vector(&mut rng);
    let y1 = pair.space().random_vector(&mut rng);
    let fr = FunctionalRep::new(vec![y0.clone(), y1.clone()]).unwrap();
    let f = pair.project_off_kernel(&pair.space().random_vector(&mut rng));
    let x = pair.v().apply(&f).unwrap();
    let expect = pair.space().inner(&x, &y0).unwrap() + pair.space().inner(&f, &y1).unwrap();
    assert!(cabs(fr.apply(&pair, &x).unwrap() - expect) < 1e-10);
}

#[test]
fn exponential_functional() {
    let k_max = 256;
    let pair = classical_pair_with(0.0, 1.0, 1024, k_max).unwrap();
    let params = classical_params(-0.5, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for beta in [-0.5, -0.25] {
        let vb = build_v_beta(&pair, beta, &params).unwrap();
        let x0 = pair.phi0().clone();
        let y1 = vb.op.adjoint().apply(&x0).unwrap().map(|z| -z);
        let fr = FunctionalRep::new(vec![x0, y1]).unwrap();
        let on_grid: Vec<C<f64>> = pair.eig().iter().map(|e| creal(e.lambda)).collect();
        let got = functional_transform(&pair, &fr, &on_grid).unwrap();
        for (l, g) in on_grid.iter().zip(got) {
            let err = cabs(g - cexp(cplx(0.0, beta) * l));
            assert!(err < 1e-4, "β = {beta}, λ = {l}: {err}");
        }
        // Between eigenvalues the error is |λ| times the interpolation tail of the symbol.
        let off_grid: Vec<C<f64>> = (0..6).map(|_| creal(rng.gen_range(-20.0..20.0))).collect();
        let got = functional_transform(&pair, &fr, &off_grid).unwrap();
        for (l, g) in off_grid.iter().zip(got) {
            let err = cabs(g - cexp(cplx(0.0, beta) * l));
            assert!(err < cabs(*l) * symbol_tail(k_max), "β = {beta}, λ = {l}: {err}");
        }
    }
}

#[test]
fn trace_csv_layout() {
    let l = vec![cplx(1.0, 0.5), cplx(-2.0, 0.0)];
    let v = vec![cplx(0.25, -1.0), cplx(3.0, 4.0)];
    let csv = trace_csv(&l, &v).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda_re,lambda_im,value_re,value_im");
    assert_eq!(lines.len(), 3);
    let fields: Vec<f64> = lines[1].split(',').map(|s| s.parse().unwrap()).collect();
    assert_eq!(fields, vec![1.0, 0.5, 0.25, -1.0]);
    assert!(trace_csv(&l, &v[..1]).is_err());
}
