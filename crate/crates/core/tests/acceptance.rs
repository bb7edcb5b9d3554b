//! Acceptance suite: one test per release criterion, each printing a
//! `criterion N PASS` line with its measured evidence.
//!
//! Run with `cargo test -p ensteer-core --test acceptance -- --test-threads=1
//! --nocapture`; single-threaded execution keeps the wall-time measurements
//! of the scaling criterion stable.

use std::time::Instant;

use ensteer_core::baselines::{
    fit_loglog_slope, penalty_tune, qfolded_iteration_cost_probe, qfolded_train, stacked_flow,
    QFoldedConfig, QFoldedProblem,
};
use ensteer_core::dynamics::{flow, uplift, ControlSignal, Model, ReadoutMap};
use ensteer_core::endpoint_jacobian::{cost_gradient, endpoint_jacobian, per_sample_cost};
use ensteer_core::ensemble::{average_error, generate_ball_dataset, Sample};
use ensteer_core::kernel_projection::{build_stacked, kernel_projector, StackedConstraints};
use ensteer_core::tuner::{phase1, tune_without_forgetting, TuneContext, TunerConfig, TuningState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_two_layer_instance(
    nbar: usize,
    steps: usize,
    seed: u64,
) -> (Model, ReadoutMap, ControlSignal, Sample) {
    let model = Model::two_layer_tanh(nbar);
    let readout = ReadoutMap::canonical(1, nbar).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = ControlSignal::gaussian(model.params_per_step(), steps, 1.0, 0.5, &mut rng);
    let sample = Sample {
        x: DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5)),
        y: DVector::from_element(1, if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 }),
        index: 1,
    };
    (model, readout, u, sample)
}

/// Criterion 1: the endpoint Jacobian is first-order exact — the linearization
/// error decays quadratically when the perturbation is halved.
#[test]
fn criterion_1_endpoint_jacobian_first_order_accuracy() {
    let started = Instant::now();
    let mut ratios = Vec::new();
    for seed in 0..20u64 {
        let (model, readout, u, sample) = random_two_layer_instance(3, 5, 1_000 + seed);
        let jac = endpoint_jacobian(&model, &readout, &u, &sample).unwrap();
        let lifted = uplift(&sample.x, 3).unwrap();
        let base = readout
            .apply(flow(&model, &u, &lifted).unwrap().final_state())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + seed);
        let mut du = DVector::from_fn(u.dim(), |_, _| rng.random_range(-1.0..1.0));
        du /= du.norm();
        let err = |eps: f64| {
            let moved = u.offset(&du, eps).unwrap();
            let out = readout
                .apply(flow(&model, &moved, &lifted).unwrap().final_state())
                .unwrap();
            (out - &base - eps * jac.apply(&du).unwrap()).norm()
        };
        let ratio = err(5e-3) / err(1e-2);
        assert!(
            (0.15..=0.35).contains(&ratio),
            "instance {}: err(ε/2)/err(ε) = {} outside [0.15, 0.35]",
            seed,
            ratio
        );
        ratios.push(ratio);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "criterion 1 exceeded 5 s: {:?}", elapsed);
    println!(
        "criterion 1 PASS: endpoint-Jacobian first-order accuracy, 20 instances, mean ratio {:.4} in [0.15, 0.35] ({:?})",
        mean, elapsed
    );
}

/// Criterion 2: the analytic cost gradient matches central finite differences
/// of the per-sample cost to relative error ≤ 1e-5.
#[test]
fn criterion_2_gradient_matches_finite_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (model, readout, u, sample) = random_two_layer_instance(3, 5, 3_000 + seed);
        let cost = per_sample_cost(&model, &readout, &u, &sample).unwrap();
        let jac = endpoint_jacobian(&model, &readout, &u, &sample).unwrap();
        let g = cost_gradient(&jac, &cost.residual, &u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4_000 + seed);
        let mut d = DVector::from_fn(u.dim(), |_, _| rng.random_range(-1.0..1.0));
        d /= d.norm();
        let eps = 1e-5;
        let jp = per_sample_cost(&model, &readout, &u.offset(&d, eps).unwrap(), &sample)
            .unwrap()
            .value;
        let jm = per_sample_cost(&model, &readout, &u.offset(&d, -eps).unwrap(), &sample)
            .unwrap()
            .value;
        let fd = (jp - jm) / (2.0 * eps);
        let an = g.dot(&d);
        let rel = (fd - an).abs() / an.abs().max(1e-12);
        assert!(rel <= 1e-5, "instance {}: relative error {}", seed, rel);
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "criterion 2 exceeded 5 s: {:?}", elapsed);
    println!(
        "criterion 2 PASS: gradient vs central differences, 20 instances, worst relative error {:.2e} ≤ 1e-5 ({:?})",
        worst, elapsed
    );
}

/// Criterion 3: projector algebra — idempotence, orthogonality, annihilation,
/// argmin optimality, and the rank-zero identity case.
#[test]
fn criterion_3_projector_suite() {
    let started = Instant::now();

    // rank-zero case: an empty constraint set projects as the identity
    let mut empty = StackedConstraints::new(1, 4, 30);
    let p0 = empty.projector(1e-10).unwrap();
    assert_eq!(p0.rank(), 0);
    let g0 = DVector::from_fn(30, |i, _| (i as f64 - 14.5) * 0.1);
    assert_eq!(p0.project(&g0).unwrap(), g0);

    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for trial in 0..50 {
        let dim = 20 + (trial % 5) * 7;
        let rows = 1 + trial % 6;
        let mut stacked = StackedConstraints::new(1, rows, dim);
        for i in 1..=rows {
            let row = DMatrix::from_fn(1, dim, |_, _| rng.random_range(-1.0..1.0));
            stacked.set_block(i, &row).unwrap();
        }
        let projector = stacked.projector(1e-10).unwrap();
        let g = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let p = projector.project(&g).unwrap();

        let idem = (projector.project(&p).unwrap() - &p).norm();
        assert!(idem <= 1e-10 * g.norm(), "idempotence failed: {}", idem);

        let orth = (&g - &p).dot(&p).abs();
        assert!(orth <= 1e-10 * g.norm_squared(), "orthogonality failed: {}", orth);

        let ann = (stacked.matrix() * &p).norm();
        assert!(
            ann <= 1e-9 * stacked.matrix().norm() * g.norm(),
            "annihilation failed: {}",
            ann
        );

        let z = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let kernel_element = projector.project(&z).unwrap();
        assert!(
            (&p - &g).norm() <= (&kernel_element - &g).norm() + 1e-9,
            "argmin optimality failed"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 2.0, "criterion 3 exceeded 2 s: {:?}", elapsed);
    println!(
        "criterion 3 PASS: projector idempotence/orthogonality/annihilation/optimality incl. rank-0 identity ({:?})",
        elapsed
    );
}

/// Criterion 4: one kernel-projected step on a memorized sample drifts its
/// endpoint quadratically in the step size.
#[test]
fn criterion_4_first_order_forgetting_drift_law() {
    let started = Instant::now();
    let nbar = 3;
    let steps = 5;
    let model = Model::two_layer_tanh(nbar);
    let readout = ReadoutMap::canonical(1, nbar).unwrap();
    for alpha in [1e-2f64, 1e-3] {
        let mut ratios = Vec::new();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let u0 = ControlSignal::gaussian(model.params_per_step(), steps, 1.0, 0.5, &mut rng);
            let x1 = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
            let x2 = DVector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
            let y2 = DVector::from_element(1, rng.random_range(-1.0..1.0));

            // memorize sample 1 to machine precision: target a point near its
            // current endpoint and descend with the ideal scalar step 1/‖L‖²
            let end = readout
                .apply(flow(&model, &u0, &uplift(&x1, nbar).unwrap()).unwrap().final_state())
                .unwrap();
            let sample1 = Sample {
                x: x1,
                y: end + DVector::from_element(1, 0.3),
                index: 1,
            };
            let mut u = u0;
            for _ in 0..200 {
                let c = per_sample_cost(&model, &readout, &u, &sample1).unwrap();
                if c.value <= 1e-24 {
                    break;
                }
                let jac = endpoint_jacobian(&model, &readout, &u, &sample1).unwrap();
                let g = cost_gradient(&jac, &c.residual, &u).unwrap();
                u = u.offset(&g, -1.0 / jac.matrix().norm_squared()).unwrap();
            }
            let residual = per_sample_cost(&model, &readout, &u, &sample1)
                .unwrap()
                .residual
                .norm();
            assert!(residual < 1e-10, "memorization failed: residual {}", residual);

            // one kernel-projected step for a new sample
            let sample2 = Sample { x: x2, y: y2, index: 2 };
            let jac1 = endpoint_jacobian(&model, &readout, &u, &sample1).unwrap();
            let stacked = build_stacked(&[jac1], &[1], 2).unwrap();
            let projector = kernel_projector(&stacked, 1e-10).unwrap();
            let c2 = per_sample_cost(&model, &readout, &u, &sample2).unwrap();
            let jac2 = endpoint_jacobian(&model, &readout, &u, &sample2).unwrap();
            let g2 = cost_gradient(&jac2, &c2.residual, &u).unwrap();
            let d = projector.project(&g2).unwrap();

            let drift = |a: f64| {
                let moved = u.offset(&d, -a).unwrap();
                let out = readout
                    .apply(
                        flow(&model, &moved, &uplift(&sample1.x, nbar).unwrap())
                            .unwrap()
                            .final_state(),
                    )
                    .unwrap();
                (out - &sample1.y).norm()
            };
            ratios.push(drift(alpha / 2.0) / drift(alpha));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (0.15..=0.40).contains(&mean),
            "α = {}: mean drift ratio {} outside [0.15, 0.40]",
            alpha,
            mean
        );
        println!(
            "criterion 4 evidence: α = {:>5}: mean D(α/2)/D(α) = {:.4} over 10 instances",
            alpha, mean
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "criterion 4 exceeded 30 s: {:?}", elapsed);
    println!(
        "criterion 4 PASS: memorized-endpoint drift scales quadratically in the step size ({:?})",
        elapsed
    );
}

/// Shared desk-scale pipeline of criterion 5 (and the determinism criterion):
/// generate q = 16, train on the first 8 jointly, tune without forgetting
/// with two refinement rounds, run the penalty baseline at λ = 1.
struct DeskScaleOutcome {
    e_u0_old: f64,
    e_u0_new: f64,
    e_star_old: f64,
    e_star_new: f64,
    e_penalty_old: f64,
    dataset_text: String,
    u0_text: String,
    tune_report_csv: String,
    penalty_report_csv: String,
}

fn desk_scale_pipeline() -> DeskScaleOutcome {
    let nbar = 8;
    let steps = 10;
    let (q, j) = (16, 8);
    let model = Model::two_layer_tanh(nbar);
    let readout = ReadoutMap::canonical(1, nbar).unwrap();
    let ensemble = generate_ball_dataset(q, 1, 0.1, 2.0).unwrap();
    let dataset_text = ensteer_core::ensemble::dataset_to_string(&ensemble, 1);

    let prefix = ensemble.prefix(j).unwrap();
    let trained = qfolded_train(
        &model,
        &readout,
        &prefix,
        steps,
        1.0,
        &QFoldedConfig::default(),
        42,
    )
    .unwrap();
    assert!(trained.converged, "joint training must converge");
    let u0 = trained.control;
    let u0_text = ensteer_core::dynamics::control_to_string(&model, &u0);

    let ctx = TuneContext {
        model: &model,
        readout: &readout,
        ensemble: &ensemble,
    };
    let tuner_config = TunerConfig {
        step_size: 0.1,
        max_inner_iterations: 2000,
        rounds: 2,
        ..TunerConfig::default()
    };
    let (u_star, report) = tune_without_forgetting(ctx, &u0, j, &tuner_config).unwrap();

    let full = ensemble.prefix(q).unwrap();
    let rest = ensemble.view(j, q).unwrap();
    let e_u0_old = average_error(&model, &readout, &u0, &prefix).unwrap();
    let e_u0_new = average_error(&model, &readout, &u0, &rest).unwrap();
    let e_star_old = average_error(&model, &readout, &u_star, &prefix).unwrap();
    let e_star_new = average_error(&model, &readout, &u_star, &rest).unwrap();

    let penalty = penalty_tune(
        &model,
        &readout,
        &full,
        &u0,
        &ensteer_core::baselines::PenaltyConfig {
            lambda: 1.0,
            step_size: 0.05,
            max_iterations: 2000,
            armijo: true,
        },
    )
    .unwrap();
    let e_penalty_old = average_error(&model, &readout, &penalty.control, &prefix).unwrap();

    DeskScaleOutcome {
        e_u0_old,
        e_u0_new,
        e_star_old,
        e_star_new,
        e_penalty_old,
        dataset_text,
        u0_text,
        tune_report_csv: report.to_csv_string(),
        penalty_report_csv: penalty.curve.to_csv_string(),
    }
}

/// Criterion 5: desk-scale replication — joint training memorizes the prefix,
/// tuning learns the expansion while holding the prefix, and the penalty
/// baseline forgets more than the tuner does.
#[test]
fn criterion_5_desk_scale_replication() {
    let started = Instant::now();
    let out = desk_scale_pipeline();
    assert!(
        out.e_u0_old <= 0.05,
        "(pre) E(u0, old) = {} exceeds 0.05",
        out.e_u0_old
    );
    assert!(
        out.e_star_new <= 0.1,
        "(a) E(u*, new) = {} exceeds 0.1",
        out.e_star_new
    );
    assert!(
        out.e_star_new <= out.e_u0_new,
        "(a) tuning must reduce the error on the new points: {} vs pre-tuning {}",
        out.e_star_new,
        out.e_u0_new
    );
    assert!(
        out.e_star_old <= out.e_u0_old + 0.05,
        "(b) E(u*, old) = {} exceeds E(u0, old) + 0.05 = {}",
        out.e_star_old,
        out.e_u0_old + 0.05
    );
    assert!(
        out.e_penalty_old > out.e_star_old,
        "(c) penalty E(ũ, old) = {} should exceed tuner E(u*, old) = {}",
        out.e_penalty_old,
        out.e_star_old
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "criterion 5 exceeded 10 min: {:?}", elapsed);
    println!(
        "criterion 5 PASS: E(u0,old) = {:.4}, E(u*,new) = {:.4} ≤ 0.1, E(u*,old) = {:.4} ≤ {:.4}, penalty E(ũ,old) = {:.4} > E(u*,old) ({:?})",
        out.e_u0_old,
        out.e_star_new,
        out.e_star_old,
        out.e_u0_old + 0.05,
        out.e_penalty_old,
        elapsed
    );
}

/// Criterion 6: folded-method equivalences — the stacked flow concatenates
/// the per-sample flows, and with a single sample the folded iterates are
/// plain gradient descent.
#[test]
fn criterion_6_folded_equivalences() {
    let started = Instant::now();
    let model = Model::two_layer_tanh(4);
    let readout = ReadoutMap::canonical(1, 4).unwrap();

    for q in [2usize, 5, 8] {
        let ensemble = generate_ball_dataset(q, 60 + q as u64, 0.1, 2.0).unwrap();
        let view = ensemble.prefix(q).unwrap();
        let problem = QFoldedProblem::new(&model, &readout, &view).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61 + q as u64);
        let u = ControlSignal::gaussian(model.params_per_step(), 6, 1.0, 0.4, &mut rng);
        let states = stacked_flow(&model, &u, problem.x0_stacked()).unwrap();
        for (k, sample) in view.iter().enumerate() {
            let traj = flow(&model, &u, &uplift(&sample.x, 4).unwrap()).unwrap();
            for (l, stacked_state) in states.iter().enumerate() {
                let diff = (stacked_state.rows(k * 4, 4) - traj.state(l)).norm();
                assert!(diff <= 1e-12, "stacked-flow deviation {} at q={}", diff, q);
            }
        }
    }

    // q = 1: the folded objective is the single sample's ‖residual‖², so its
    // descent iterates must equal plain per-sample gradient descent. The
    // unregularized folded route is exercised through penalty_tune with λ = 0
    // (same joint-descent path, fixed start).
    let ensemble = generate_ball_dataset(1, 70, 0.1, 2.0).unwrap();
    let view = ensemble.prefix(1).unwrap();
    let sample = ensemble.sample(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let u0 = ControlSignal::gaussian(model.params_per_step(), 6, 1.0, 0.3, &mut rng);

    let mut plain = u0.clone();
    for _ in 0..25 {
        let c = per_sample_cost(&model, &readout, &plain, sample).unwrap();
        let jac = endpoint_jacobian(&model, &readout, &plain, sample).unwrap();
        let gi = cost_gradient(&jac, &c.residual, &plain).unwrap();
        let mut g = DVector::zeros(plain.dim());
        g.axpy(2.0, &gi, 1.0);
        plain = plain.offset(&g, -0.05).unwrap();
    }
    let folded = penalty_tune(
        &model,
        &readout,
        &view,
        &u0,
        &ensteer_core::baselines::PenaltyConfig {
            lambda: 0.0,
            step_size: 0.05,
            max_iterations: 25,
            armijo: false,
        },
    )
    .unwrap();
    let max_diff = folded
        .control
        .as_flat()
        .iter()
        .zip(plain.as_flat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_diff <= 1e-15,
        "q=1 folded iterates deviate from plain descent by {}",
        max_diff
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "criterion 6 exceeded 5 s: {:?}", elapsed);
    println!(
        "criterion 6 PASS: stacked flow ≡ concatenated flows (≤ 1e-12), q=1 iterates ≡ plain descent (≤ 1e-15, max diff {:.1e}) ({:?})",
        max_diff, elapsed
    );
}

/// Criterion 7: per-iteration wall time of the generic folded gradient
/// iteration scales close to quadratically in the ensemble size.
#[test]
fn criterion_7_folded_scaling_probe() {
    let started = Instant::now();
    let rows = qfolded_iteration_cost_probe(&[32], &[4, 8, 16, 32], 10, 7);
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.q as f64, r.seconds_per_iteration))
        .collect();
    let slope = fit_loglog_slope(&points);
    for w in points.windows(2) {
        println!(
            "criterion 7 evidence: q {} -> {}: per-iteration time ratio {:.2}",
            w[0].0,
            w[1].0,
            w[1].1 / w[0].1
        );
    }
    assert!(
        (1.6..=2.4).contains(&slope),
        "fitted log-log slope {} outside [1.6, 2.4]; rows: {:?}",
        slope,
        points
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "criterion 7 exceeded 5 min: {:?}", elapsed);
    println!(
        "criterion 7 PASS: per-iteration time vs q slope {:.3} in [1.6, 2.4] over q ∈ {{4,8,16,32}} ({:?})",
        slope, elapsed
    );
}

/// Criterion 8: from-scratch mode — phase 1 with an empty memorized set
/// steers four labeled ball samples to low average error.
#[test]
fn criterion_8_from_scratch_steering() {
    let started = Instant::now();
    let nbar = 8;
    let steps = 10;
    let model = Model::two_layer_tanh(nbar);
    let readout = ReadoutMap::canonical(1, nbar).unwrap();
    let ensemble = generate_ball_dataset(4, 5, 0.1, 2.0).unwrap();
    let ctx = TuneContext {
        model: &model,
        readout: &readout,
        ensemble: &ensemble,
    };
    let config = TunerConfig {
        step_size: 0.3,
        max_step_norm: 0.05,
        convergence_cost_threshold: 1e-5,
        max_inner_iterations: 4000,
        ..TunerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let u0 = ControlSignal::gaussian(
        model.params_per_step(),
        steps,
        1.0,
        0.1 / (nbar as f64).sqrt(),
        &mut rng,
    );
    let mut state = TuningState::new(ctx, u0, 0, config).unwrap();
    phase1(&mut state, ctx, &[1, 2, 3, 4]).unwrap();
    let view = ensemble.prefix(4).unwrap();
    let e = average_error(&model, &readout, state.control(), &view).unwrap();
    assert!(e <= 1e-2, "from-scratch average error {} exceeds 1e-2", e);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "criterion 8 exceeded 2 min: {:?}", elapsed);
    println!(
        "criterion 8 PASS: from-scratch phase 1 steers 4 ball samples to E = {:.3e} ≤ 1e-2 ({:?})",
        e, elapsed
    );
}

/// Criterion 9: rerunning the desk-scale pipeline with identical
/// configuration reproduces every artifact byte for byte.
#[test]
fn criterion_9_pipeline_determinism() {
    let started = Instant::now();
    let a = desk_scale_pipeline();
    let b = desk_scale_pipeline();
    assert_eq!(a.dataset_text, b.dataset_text, "dataset text differs");
    assert_eq!(a.u0_text, b.u0_text, "trained checkpoint differs");
    assert_eq!(a.tune_report_csv, b.tune_report_csv, "tuning report differs");
    assert_eq!(
        a.penalty_report_csv, b.penalty_report_csv,
        "penalty curve differs"
    );
    let elapsed = started.elapsed();
    println!(
        "criterion 9 PASS: two pipeline runs produced byte-identical dataset, checkpoint, and report CSVs ({:?})",
        elapsed
    );
}
