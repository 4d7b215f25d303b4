use lagsid::dynamics::{PhysicalParams, SystemId, SystemSpec};
use lagsid::library::{CandidateLibrary, CandidateTerm, TermJet};
use lagsid::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn term(s: &str) -> CandidateTerm {
    s.parse().unwrap()
}

#[test]
fn quadratic_kinetic_term() {
    let j = term("qd1^2").eval_jet(&[0.3], &[2.0]).unwrap();
    assert_eq!(j.value, 4.0);
    assert_eq!(j.grad_qd[0], 4.0);
    assert_eq!(j.hess_qd_qd[(0, 0)], 2.0);
    assert_eq!(j.grad_q[0], 0.0);
    assert_eq!(j.mixed_q_qd[(0, 0)], 0.0);
}

#[test]
fn cosine_gradient() {
    let t = term("cos(q1)");
    let j = t.eval_jet(&[0.0], &[0.0]).unwrap();
    assert_eq!((j.value, j.grad_q[0]), (1.0, 0.0));
    let j = t.eval_jet(&[std::f64::consts::FRAC_PI_2], &[0.0]).unwrap();
    assert!((j.grad_q[0] + 1.0).abs() < 1e-15);
}

#[test]
fn magnetic_term_domain_error_names_the_term() {
    let t = term("invr(q1,q2;1,0,0)");
    match t.eval_jet(&[1.0, 0.0], &[0.0, 0.0]) {
        Err(Error::TermDomain { term, .. }) => assert_eq!(term, "invr(q1,q2;1,0,0)"),
        other => panic!("expected a domain error, got {other:?}"),
    }
    assert!(term("invr(q1,q2;1,0,0.3)")
        .eval_jet(&[1.0, 0.0], &[0.0, 0.0])
        .is_ok());
}

fn fd_check(t: &CandidateTerm, q: &[f64], qd: &[f64]) {
    let n = q.len();
    let h = 1e-5;
    let jet = t.eval_jet(q, qd).unwrap();
    let tol = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs());
    let shifted = |dq: Option<(usize, f64)>, dv: Option<(usize, f64)>| -> TermJet {
        let mut q2 = q.to_vec();
        let mut v2 = qd.to_vec();
        if let Some((i, s)) = dq {
            q2[i] += s;
        }
        if let Some((i, s)) = dv {
            v2[i] += s;
        }
        t.eval_jet(&q2, &v2).unwrap()
    };
    for i in 0..n {
        let (p, m) = (shifted(Some((i, h)), None), shifted(Some((i, -h)), None));
        let g = (p.value - m.value) / (2.0 * h);
        assert!(
            tol(jet.grad_q[i], g),
            "{}: dq{i} {} vs {g}",
            t.name(),
            jet.grad_q[i]
        );
        for a in 0..n {
            // ∂²φ/∂q̇_a∂q_i
            let mixed = (p.grad_qd[a] - m.grad_qd[a]) / (2.0 * h);
            assert!(
                tol(jet.mixed_q_qd[(a, i)], mixed),
                "{}: mixed {a},{i}",
                t.name()
            );
        }
        let (p, m) = (shifted(None, Some((i, h))), shifted(None, Some((i, -h))));
        let g = (p.value - m.value) / (2.0 * h);
        assert!(
            tol(jet.grad_qd[i], g),
            "{}: dqd{i} {} vs {g}",
            t.name(),
            jet.grad_qd[i]
        );
        for a in 0..n {
            let hess = (p.grad_qd[a] - m.grad_qd[a]) / (2.0 * h);
            assert!(
                tol(jet.hess_qd_qd[(a, i)], hess),
                "{}: hess {a},{i}",
                t.name()
            );
        }
    }
    assert_eq!(jet.hess_qd_qd, jet.hess_qd_qd.transpose());
    assert!(jet.value.is_finite());
}

#[test]
fn every_factor_family_matches_finite_differences() {
    let terms = [
        "qd1*qd2*cos(q1-q2)",
        "qd1*qd2*sin(q1-q2)",
        "q1^2*sin(q2)^2*qd3^2",
        "q1*cos(q2)",
        "(q1-1)^2",
        "(q2+0.5)^3*qd1",
        "cos(q1)*qd2^2",
        "sin(q3)^3",
        "cos(q2-q3)^2",
        "qd1^3*q2",
        "q1*q2",
        "invr(q1,q2;0.5,-0.8660254037844386,0.3)",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in terms {
        let t = term(name);
        for _ in 0..100 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let qd: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            fd_check(&t, &q, &qd);
        }
    }
}

#[test]
fn single_pendulum_library_values() {
    let lib = CandidateLibrary::from_text("qd1^2\ncos(q1)\n").unwrap();
    let jets = lib
        .eval_library(
            &DMatrix::from_element(1, 1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
    assert_eq!(jets[0][0].value, 1.0);
    assert_eq!(jets[0][1].value, 1.0);
    let empty = lib
        .eval_library(&DMatrix::zeros(0, 1), &DMatrix::zeros(0, 1))
        .unwrap();
    assert!(empty.is_empty());
}

#[test]
fn batch_evaluation_equals_loop() {
    let spec = SystemSpec::with_defaults(SystemId::DoublePendulum).unwrap();
    let lib = &spec.library;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-3.0..3.0));
    let qd = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-3.0..3.0));
    let batch = lib.eval_library(&q, &qd).unwrap();
    assert_eq!(batch.len(), 30);
    for t in 0..30 {
        let qr: Vec<f64> = q.row(t).iter().copied().collect();
        let vr: Vec<f64> = qd.row(t).iter().copied().collect();
        for (k, term) in lib.terms().iter().enumerate() {
            assert_eq!(batch[t][k], term.eval_jet(&qr, &vr).unwrap());
        }
    }
}

#[test]
fn batch_domain_error_carries_location() {
    let lib = CandidateLibrary::from_text("qd1^2\ninvr(q1,q2;0,0,0)\n").unwrap();
    let q = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 0.0]);
    match lib.eval_library(&q, &DMatrix::zeros(3, 2)) {
        Err(Error::LibraryEval { sample, term, .. }) => {
            assert_eq!(sample, 2);
            assert_eq!(term, "invr(q1,q2;0,0,0)");
        }
        other => panic!("expected a located error, got {other:?}"),
    }
}

#[test]
fn system_libraries_contain_their_true_terms() {
    let names = |id| SystemSpec::with_defaults(id).unwrap().library.names();
    let single = names(SystemId::SinglePendulum);
    assert!(single.len() >= 6);
    for t in ["qd1^2", "cos(q1)", "q1^2", "qd1^2*cos(q1)"] {
        assert!(single.iter().any(|n| n == t), "{t}");
    }
    let double = names(SystemId::DoublePendulum);
    for t in ["qd1^2", "qd2^2", "qd1*qd2*cos(q1-q2)", "cos(q1)", "cos(q2)"] {
        assert!(double.iter().any(|n| n == t), "{t}");
    }
    let magnetic = names(SystemId::MagneticPendulum);
    for t in ["qd1^2", "qd2^2", "q1^2", "q2^2"] {
        assert!(magnetic.iter().any(|n| n == t), "{t}");
    }
    assert_eq!(
        magnetic.iter().filter(|n| n.starts_with("invr(")).count(),
        3
    );
}

#[test]
fn true_coefficients_sit_on_the_true_terms() {
    let p = PhysicalParams::default();
    let spec = SystemSpec::with_defaults(SystemId::SinglePendulum).unwrap();
    assert_eq!(spec.true_terms(), vec!["qd1^2", "cos(q1)"]);
    assert_eq!(spec.true_coeffs[0], 0.5 * p.m * p.l * p.l);
    assert_eq!(spec.true_coeffs[1], p.m * p.g * p.l);
    for id in SystemId::ALL {
        let spec = SystemSpec::with_defaults(id).unwrap();
        assert_eq!(spec.true_coeffs.len(), spec.library.len());
        if let Some(k) = spec.mode.known() {
            assert_eq!(spec.true_coeffs[k], 1.0, "{id}");
        }
    }
}

#[test]
fn exclusion_rules() {
    assert!(CandidateLibrary::from_text("sin(q1)^2\ncos(q1)^2\n").is_err());
    assert!(CandidateLibrary::from_text("qd1*sin(q1)\n").is_err());
    assert!(CandidateLibrary::from_text("qd1^2\nqd1^2\n").is_err());
    assert!(CandidateLibrary::from_text("dof = 1\nq2\n").is_err());
}

#[test]
fn text_round_trip() {
    for id in SystemId::ALL {
        let lib = SystemSpec::with_defaults(id).unwrap().library;
        assert_eq!(CandidateLibrary::from_text(&lib.to_text()).unwrap(), lib);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn library_jet_is_linear_in_coefficients(
        coeffs in prop::collection::vec(-3.0f64..3.0, 10),
        q in prop::collection::vec(-2.0f64..2.0, 2),
        qd in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let lib = SystemSpec::with_defaults(SystemId::ChaosPendulum).unwrap().library;
        let c = &coeffs[..lib.len()];
        let combined = lib.combined_jet(c, &q, &qd).unwrap();
        let mut sum = TermJet::zeros(2);
        for (t, &w) in lib.terms().iter().zip(c) {
            sum.axpy(w, &t.eval_jet(&q, &qd).unwrap());
        }
        prop_assert!((combined.value - sum.value).abs() < 1e-12);
        prop_assert!((&combined.grad_q - &sum.grad_q).amax() < 1e-12);
        prop_assert!((&combined.grad_qd - &sum.grad_qd).amax() < 1e-12);
        prop_assert!((&combined.hess_qd_qd - &sum.hess_qd_qd).amax() < 1e-12);
        prop_assert!((&combined.mixed_q_qd - &sum.mixed_q_qd).amax() < 1e-12);
    }

    #[test]
    fn velocity_hessian_is_symmetric(
        q in prop::collection::vec(-2.0f64..2.0, 3),
        qd in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let lib = SystemSpec::with_defaults(SystemId::SphericalSpringPendulum).unwrap().library;
        let q = [q[0].abs() + 0.2, q[1], q[2]];
        for t in lib.terms() {
            let j = t.eval_jet(&q, &qd).unwrap();
            prop_assert_eq!(&j.hess_qd_qd, &j.hess_qd_qd.transpose());
        }
    }
}
