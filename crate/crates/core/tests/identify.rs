use std::time::Instant;

use lagsid::bspline::{default_control_count, KnotVector};
use lagsid::dynamics::{generate_dataset, Dataset, Mode, SamplingConfig, SystemId, SystemSpec};
use lagsid::identify::{
    fit, fit_from, init_control_points, physics_residual, CoeffInit, CoefficientVector, FitConfig,
    LossWeights, OptimizerConfig, Problem, StlsConfig, Threshold,
};
use lagsid::library::CandidateLibrary;
use lagsid::metrics::evaluate;
use lagsid::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dataset(
    id: SystemId,
    noise: f64,
    missing: f64,
    seed: u64,
    sampling: &SamplingConfig,
) -> Dataset {
    let spec = SystemSpec::with_defaults(id).unwrap();
    generate_dataset(&spec, sampling, noise, missing, seed)
        .unwrap()
        .dataset
}

fn short() -> SamplingConfig {
    SamplingConfig {
        t_end: 2.0,
        dt_meas: 0.1,
        ..SamplingConfig::default()
    }
}

/// The same dataset with measurements replaced by `f(t)`.
fn with_signal(ds: &Dataset, f: impl Fn(f64) -> f64, present: Vec<bool>) -> Dataset {
    let q = DMatrix::from_fn(ds.t_meas.len(), 1, |r, _| f(ds.t_meas[r]));
    Dataset::assemble(ds.meta.clone(), ds.t_meas.clone(), q, present).unwrap()
}

#[test]
fn zero_coefficients_without_force_give_zero_residual() {
    let lib = SystemSpec::with_defaults(SystemId::DoublePendulum)
        .unwrap()
        .library;
    let q = DMatrix::from_fn(7, 2, |r, i| 0.1 * (r + i) as f64);
    let res = physics_residual(
        &lib,
        &vec![0.0; lib.len()],
        &q,
        &q,
        &q,
        Some(&DMatrix::zeros(7, 2)),
    )
    .unwrap();
    assert!(res.iter().all(|&v| v == 0.0));
}

#[test]
fn init_reproduces_constant_and_affine_signals() {
    let base = dataset(
        SystemId::SinglePendulum,
        0.0,
        0.0,
        0,
        &SamplingConfig::default(),
    );
    let all = vec![true; base.t_meas.len()];
    let kv =
        KnotVector::with_basis_count(0.0, 20.0, default_control_count(base.t_meas.len())).unwrap();

    let constant = with_signal(&base, |_| 0.37, all.clone());
    let p = init_control_points(&constant, &kv).unwrap();
    assert!(p.iter().all(|&v| (v - 0.37).abs() < 1e-9));

    let affine = with_signal(&base, |t| 0.05 * t - 0.4, all);
    let p = init_control_points(&affine, &kv).unwrap();
    let g = kv.greville();
    for (j, &x) in g.iter().enumerate() {
        assert!((p[(j, 0)] - (0.05 * x - 0.4)).abs() < 1e-8);
    }
}

#[test]
fn init_with_five_percent_missing_is_close_to_full() {
    let full = dataset(
        SystemId::SinglePendulum,
        0.0,
        0.0,
        4,
        &SamplingConfig::default(),
    );
    let gappy = dataset(
        SystemId::SinglePendulum,
        0.0,
        0.05,
        4,
        &SamplingConfig::default(),
    );
    assert!(gappy.present.iter().any(|&p| !p));
    let kv =
        KnotVector::with_basis_count(0.0, 20.0, default_control_count(full.t_meas.len())).unwrap();
    let a = init_control_points(&full, &kv).unwrap();
    let b = init_control_points(&gappy, &kv).unwrap();
    let rms = |m: &DMatrix<f64>| (m.norm_squared() / m.len() as f64).sqrt();
    assert!(
        rms(&(&a - &b)) < 0.01 * rms(&a),
        "{} vs {}",
        rms(&(&a - &b)),
        rms(&a)
    );
}

#[test]
fn init_rejects_too_few_measurements() {
    let ds = dataset(SystemId::SinglePendulum, 0.0, 0.0, 0, &short());
    let kv = KnotVector::with_basis_count(0.0, 2.0, 30).unwrap();
    assert!(matches!(
        init_control_points(&ds, &kv),
        Err(Error::Initialization(_))
    ));
}

fn raw(alpha: f64, beta: f64, gamma: f64) -> LossWeights {
    LossWeights {
        alpha,
        beta,
        gamma,
        phys: 1.0,
        normalize: false,
    }
}

#[test]
fn data_loss_of_zero_curve_is_mean_square_measurement() {
    let ds = dataset(SystemId::DoublePendulum, 0.05, 0.1, 2, &short());
    let lib = SystemSpec::with_defaults(SystemId::DoublePendulum)
        .unwrap()
        .library;
    let kv = KnotVector::with_basis_count(0.0, 2.0, 8).unwrap();
    let problem = Problem::new(&ds, &lib, &kv, raw(2.5, 0.0, 0.0)).unwrap();
    let c = CoefficientVector::new(lib.len(), Mode::Active).unwrap();
    let j = problem.loss(&DMatrix::zeros(8, 2), &c).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..ds.t_meas.len() {
        for i in 0..2 {
            if ds.is_present(r, i) {
                sum += ds.q_meas[(r, i)].powi(2);
                count += 1;
            }
        }
    }
    assert!((j.data - 2.5 * sum / count as f64).abs() < 1e-12);
}

#[test]
fn regularization_is_linear_in_beta() {
    let ds = dataset(SystemId::SinglePendulum, 0.01, 0.0, 1, &short());
    let lib = SystemSpec::with_defaults(SystemId::SinglePendulum)
        .unwrap()
        .library;
    let kv = KnotVector::with_basis_count(0.0, 2.0, 8).unwrap();
    let p = init_control_points(&ds, &kv).unwrap();
    let c = CoefficientVector::new(lib.len(), Mode::Active).unwrap();
    for normalize in [false, true] {
        let w = LossWeights {
            normalize,
            ..raw(1.0, 0.3, 0.0)
        };
        let a = Problem::new(&ds, &lib, &kv, w)
            .unwrap()
            .loss(&p, &c)
            .unwrap();
        let b = Problem::new(&ds, &lib, &kv, LossWeights { beta: 0.6, ..w })
            .unwrap()
            .loss(&p, &c)
            .unwrap();
        assert!(a.reg > 0.0);
        assert!((b.reg - 2.0 * a.reg).abs() <= 1e-14 * b.reg);
        assert_eq!(a.data, b.data);
    }
}

/// Dense clean samples, one control point per two of them.
fn dense_clean() -> (SystemSpec, Dataset, KnotVector) {
    let spec = SystemSpec::with_defaults(SystemId::SinglePendulum).unwrap();
    let sampling = SamplingConfig {
        t_end: 5.0,
        dt_meas: 0.001,
        ..SamplingConfig::default()
    };
    let ds = generate_dataset(&spec, &sampling, 0.0, 0.0, 0)
        .unwrap()
        .dataset;
    let kv =
        KnotVector::with_basis_count(0.0, 5.0, default_control_count(ds.t_meas.len())).unwrap();
    (spec, ds, kv)
}

#[test]
fn clean_solution_has_tiny_loss() {
    let (spec, ds, kv) = dense_clean();
    let p0 = init_control_points(&ds, &kv).unwrap();
    let c0 = CoefficientVector::from_values(spec.true_coeffs.clone(), Mode::Active).unwrap();
    let problem = Problem::new(&ds, &spec.library, &kv, raw(1.0, 0.0, 0.0)).unwrap();
    let j = problem.loss(&p0, &c0).unwrap().total;
    assert!(j < 1e-10, "J = {j}");
}

#[test]
fn clean_solution_is_stationary() {
    let (spec, ds, kv) = dense_clean();
    let p0 = init_control_points(&ds, &kv).unwrap();
    let c0 = CoefficientVector::from_values(spec.true_coeffs.clone(), Mode::Active).unwrap();
    let weights = LossWeights {
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let problem = Problem::new(&ds, &spec.library, &kv, weights).unwrap();
    let j0 = problem.loss(&p0, &c0).unwrap().total;
    let config = FitConfig {
        weights,
        optimizer: OptimizerConfig {
            max_iter: 1,
            ..OptimizerConfig::default()
        },
        stls: StlsConfig {
            threshold: Threshold::RelativeContribution(0.1),
            every: 1,
        },
        ..FitConfig::default()
    };
    let report = fit_from(&problem, &kv, p0, c0, &config, Instant::now()).unwrap();
    let j1 = report.trace.last().unwrap().total;
    assert!((j1 - j0).abs() < 1e-8, "{j0} -> {j1}");
    assert_eq!(report.surviving_terms(), vec!["qd1^2", "cos(q1)"]);
}

/// Small problem: one coordinate, 8 control points, 4 terms.
fn gradient_problem() -> (Dataset, CandidateLibrary, KnotVector) {
    let ds = dataset(SystemId::SinglePendulum, 0.02, 0.1, 6, &short());
    let lib = CandidateLibrary::from_text("qd1^2\ncos(q1)\nq1^2\nqd1^2*cos(q1)\n").unwrap();
    let kv = KnotVector::with_basis_count(0.0, 2.0, 8).unwrap();
    (ds, lib, kv)
}

fn check_gradient(problem: &Problem<'_>, p: &DMatrix<f64>, c: &CoefficientVector) {
    let (gp, gl) = problem.gradient(p, c).unwrap();
    let scale = gp.amax().max(gl.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let agree = |a: f64, fd: f64| (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-6 * scale);
    for j in 0..p.nrows() {
        let h = 1e-6 * (1.0 + p[(j, 0)].abs());
        let (mut plus, mut minus) = (p.clone(), p.clone());
        plus[(j, 0)] += h;
        minus[(j, 0)] -= h;
        let fd = (problem.loss(&plus, c).unwrap().total - problem.loss(&minus, c).unwrap().total)
            / (2.0 * h);
        assert!(agree(gp[(j, 0)], fd), "dP{j}: {} vs {fd}", gp[(j, 0)]);
    }
    for k in c.free_indices() {
        let h = 1e-6 * (1.0 + c.values[k].abs());
        let (mut plus, mut minus) = (c.clone(), c.clone());
        plus.values[k] += h;
        minus.values[k] -= h;
        let fd = (problem.loss(p, &plus).unwrap().total - problem.loss(p, &minus).unwrap().total)
            / (2.0 * h);
        assert!(agree(gl[k], fd), "dλ{k}: {} vs {fd}", gl[k]);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let (ds, lib, kv) = gradient_problem();
    let p = init_control_points(&ds, &kv).unwrap();
    let mut p = p;
    for j in 0..8 {
        p[(j, 0)] += 0.03 * ((j * 7 % 5) as f64 - 2.0);
    }
    for (mode, values) in [
        (Mode::Active, vec![0.45, 9.0, -0.7, 0.2]),
        (Mode::Passive { known: 0 }, vec![1.0, 19.0, -0.7, 0.2]),
    ] {
        for normalize in [false, true] {
            let w = LossWeights {
                normalize,
                ..raw(3.0, 0.02, 0.01)
            };
            let problem = Problem::new(&ds, &lib, &kv, w).unwrap();
            let c = CoefficientVector::from_values(values.clone(), mode).unwrap();
            check_gradient(&problem, &p, &c);
        }
    }
}

#[test]
fn over_pruning_is_an_error() {
    let ds = dataset(
        SystemId::SinglePendulum,
        0.0,
        0.0,
        0,
        &SamplingConfig::default(),
    );
    let spec = SystemSpec::with_defaults(SystemId::SinglePendulum).unwrap();
    let config = FitConfig {
        stls: StlsConfig {
            threshold: Threshold::Absolute(1e6),
            every: 5,
        },
        ..FitConfig::default()
    };
    assert!(matches!(
        fit(&ds, &spec.library, spec.mode, &config),
        Err(Error::EmptyModel)
    ));
}

fn check_recovery(id: SystemId, seed: u64) -> f64 {
    let spec = SystemSpec::with_defaults(id).unwrap();
    let ds = generate_dataset(&spec, &SamplingConfig::default(), 0.0, 0.0, seed)
        .unwrap()
        .dataset;
    let report = fit(&ds, &spec.library, spec.mode, &FitConfig::default()).unwrap();
    assert!(!report.trace.is_empty());
    let active: Vec<usize> = report.trace.iter().map(|e| e.active_terms).collect();
    assert!(
        active.windows(2).all(|w| w[1] <= w[0]),
        "active set grew: {active:?}"
    );
    let pruned: Vec<&String> = report.pruning.iter().flat_map(|e| &e.terms).collect();
    let mut unique = pruned.clone();
    unique.dedup();
    assert_eq!(pruned.len(), unique.len());
    if let Some(k) = spec.mode.known() {
        assert_eq!(report.coefficients.values[k], 1.0);
    }
    let e = evaluate(
        &report.coefficients.values,
        &spec.true_coeffs,
        &report.terms,
        spec.mode == Mode::Active,
    )
    .unwrap();
    assert_eq!(
        (e.precision, e.recall),
        (1.0, 1.0),
        "{id}: {}",
        report.expression
    );
    e.l2_rel
}

#[test]
fn noise_free_single_pendulum_recovery() {
    let l2 = check_recovery(SystemId::SinglePendulum, 0);
    assert!(l2 <= 2e-2, "l2 {l2}");
}

#[test]
fn noise_free_chaos_pendulum_recovery() {
    let l2 = check_recovery(SystemId::ChaosPendulum, 0);
    assert!(l2 <= 2e-2, "l2 {l2}");
}

#[test]
fn least_squares_warm_start_also_recovers() {
    let spec = SystemSpec::with_defaults(SystemId::SinglePendulum).unwrap();
    let ds = generate_dataset(&spec, &SamplingConfig::default(), 0.0, 0.0, 1)
        .unwrap()
        .dataset;
    let config = FitConfig {
        init: CoeffInit::LeastSquares,
        ..FitConfig::default()
    };
    let report = fit(&ds, &spec.library, spec.mode, &config).unwrap();
    assert_eq!(report.surviving_terms(), vec!["qd1^2", "cos(q1)"]);
}

#[test]
fn report_json_round_trip() {
    let spec = SystemSpec::with_defaults(SystemId::SinglePendulum).unwrap();
    let ds = generate_dataset(&spec, &short(), 0.0, 0.0, 0)
        .unwrap()
        .dataset;
    let config = FitConfig {
        control_points: Some(10),
        ..FitConfig::default()
    };
    let report = fit(&ds, &spec.library, spec.mode, &config).unwrap();
    let back = lagsid::identify::FitReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.model().unwrap().control().nrows(), 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_check_at_random_points(
        offsets in prop::collection::vec(-0.2f64..0.2, 8),
        values in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let (ds, lib, kv) = gradient_problem();
        let mut p = init_control_points(&ds, &kv).unwrap();
        for (j, o) in offsets.iter().enumerate() {
            p[(j, 0)] += o;
        }
        // keep coefficients away from the kink of the L1 term
        let values: Vec<f64> = values.iter().map(|v| if v.abs() < 0.05 { 0.5 } else { *v }).collect();
        let problem = Problem::new(&ds, &lib, &kv, raw(2.0, 0.05, 0.01)).unwrap();
        let c = CoefficientVector::from_values(values, Mode::Active).unwrap();
        check_gradient(&problem, &p, &c);
    }

    #[test]
    fn known_term_is_fixed_at_one(known in 0usize..4, len in 4usize..8) {
        let c = CoefficientVector::new(len, Mode::Passive { known }).unwrap();
        prop_assert_eq!(c.values[known], 1.0);
        prop_assert!(!c.free_indices().contains(&known));
        let mut pruned = c.clone();
        pruned.prune(known);
        prop_assert_eq!(pruned.values[known], 1.0);
    }
}
