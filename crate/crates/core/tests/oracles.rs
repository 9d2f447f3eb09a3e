//! Library outputs checked against independent references.

mod common;

use std::sync::Arc;

use cbo_core::barrier::{inner_solve, InnerMode, InnerSolverOptions};
use cbo_core::cid::{cid_step, run, CidState, SolverConfig, StepSchedule};
use cbo_core::dro::{optimal_weights, regularized_inner_max_value, DroParams, SimplexWeights};
use cbo_core::hypergrad::{composite_objective, done_total_gradient, instance_hypergrad, HypergradConfig};
use cbo_core::problem::{InstanceLink, LogOuter, ProblemInstance, ProblemSchedule, Vector};
use cbo_core::testbed::attack::pgd_attack;
use cbo_core::testbed::classifier::{LogitLoss, ModelKind, ToyClassifier};
use cbo_core::testbed::data::make_gaussian_blobs;
use cbo_core::testbed::done::{build_done_problem, AttackLoss};
use cbo_core::testbed::quadratic::{make_quadratic_cbo, OuterKind, QuadraticDims};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims(d: usize, p: usize, instances: usize, outer: OuterKind) -> QuadraticDims {
    QuadraticDims {
        d,
        p,
        instances,
        outer,
        ..QuadraticDims::default()
    }
}

#[test]
fn weights_match_projected_ascent_when_well_conditioned() {
    let w = optimal_weights(&Vector::from_vec(vec![0.0, 1.0]), DroParams::new(1.0).unwrap()).unwrap();
    let pga = pga_simplex_weights(&[0.0, 1.0], 1.0, 100_000);
    assert!((pga[0] - 0.26894).abs() < 1e-5 && (pga[1] - 0.73106).abs() < 1e-5);
    for k in 0..2 {
        assert!((w.as_vector()[k] - pga[k]).abs() < 1e-8);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let m = rng.random_range(2..=6);
        let losses: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let r = rng.random_range(1.0..10.0);
        let w = optimal_weights(&Vector::from_vec(losses.clone()), DroParams::new(r).unwrap()).unwrap();
        let pga = pga_simplex_weights(&losses, r, 100_000);
        for (a, b) in w.as_vector().iter().zip(&pga) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn one_hot_inner_value() {
    let w = SimplexWeights::new(Vector::from_vec(vec![0.0, 1.0])).unwrap();
    let v = regularized_inner_max_value(&Vector::from_vec(vec![0.0, 1.0]), &w, DroParams::new(1.0).unwrap()).unwrap();
    let direct = 0.0 * 0.0 + 1.0 * 1.0 - 1.0 * (1.0 * (2.0f64 * 1.0).ln());
    assert!((v - direct).abs() < 1e-15);
    assert!((v - (1.0 - 2.0f64.ln())).abs() < 1e-15);
}

#[test]
fn quadratic_seed_seven_matches_analytic_gradient() {
    let qc = make_quadratic_cbo(7, dims(3, 2, 5, OuterKind::Log)).unwrap();
    let theta = Vector::zeros(3);
    let reports = solve_all(&qc.problem, &theta, InnerMode::Projected, None, 200);
    let grad = done_total_gradient(&qc.problem, &theta, &reports, InnerMode::Projected, &HypergradConfig::default())
        .unwrap();
    assert!(rel_err(&grad, &qc.gradient(&theta)) <= 1e-6);
}

#[test]
fn random_instance_hypergradient_matches_finite_differences() {
    let qc = make_quadratic_cbo(3, dims(5, 5, 1, OuterKind::Linear)).unwrap();
    let inst = qc.problem.instance(0);
    let alpha = inst.curvature_bounds().unwrap().optimal_step();
    let solve = |theta: &Vector| {
        inner_solve(inst, InnerMode::Projected, theta, inst.constraint().interior_point(), &InnerSolverOptions::gradient(alpha, 400))
            .unwrap()
    };
    let theta = Vector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4]);
    let rep = solve(&theta);
    assert!(rep.final_grad_norm < 1e-10);
    let jac = instance_hypergrad(inst, &theta, &rep.delta, InnerMode::Projected, &HypergradConfig::default()).unwrap();
    let fd = central_difference(|t| inst.g_value(t, &solve(t).delta)[0], &theta, 1e-5);
    assert!(rel_err(&jac.column(0).into_owned(), &fd) <= 1e-4);
}

#[test]
fn reweighted_objective_gradient_on_three_quadratics() {
    let qc = make_quadratic_cbo(5, dims(3, 2, 3, OuterKind::Linear)).unwrap();
    let r = 0.7;
    let problem = qc.problem.with_outer(Arc::new(LogOuter::new(r, 1.0)), InstanceLink::Exp { r }).unwrap();
    let theta = Vector::from_vec(vec![0.2, -0.1, 0.4]);
    let reports = solve_all(&problem, &theta, InnerMode::Projected, None, 200);
    let grad = done_total_gradient(&problem, &theta, &reports, InnerMode::Projected, &HypergradConfig::default())
        .unwrap();
    let reference = |t: &Vector| {
        let losses: Vec<f64> = (0..3).map(|i| qc.instance(i).g_value(t, &qc.delta_star(i, t))[0]).collect();
        r * (losses.iter().map(|l| (l / r).exp()).sum::<f64>() / 3.0).ln()
    };
    let fd = central_difference(reference, &theta, 1e-5);
    assert!(rel_err(&grad, &fd) <= 1e-4);
    let fd_solved = central_difference(|t| end_to_end_objective(&problem, t, InnerMode::Projected, None, 200), &theta, 1e-5);
    assert!(rel_err(&grad, &fd_solved) <= 1e-4);
}

#[test]
fn single_instance_reduces_to_chain_rule() {
    let qc = make_quadratic_cbo(9, dims(4, 3, 1, OuterKind::Linear)).unwrap();
    let theta = Vector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
    for r in [0.1, 1.0, 10.0] {
        let problem = qc.problem.with_outer(Arc::new(LogOuter::new(r, 1.0)), InstanceLink::Exp { r }).unwrap();
        let reports = solve_all(&problem, &theta, InnerMode::Projected, None, 200);
        let grad = done_total_gradient(&problem, &theta, &reports, InnerMode::Projected, &HypergradConfig::default())
            .unwrap();
        assert!(rel_err(&grad, &qc.instance(0).composed_jacobian(&theta).column(0).into_owned()) < 1e-9);
    }
}

#[test]
fn identical_instances_collapse_to_one() {
    let qc = make_quadratic_cbo(12, dims(3, 2, 1, OuterKind::Linear)).unwrap();
    let r = 0.5;
    let one = qc.problem.with_outer(Arc::new(LogOuter::new(r, 1.0)), InstanceLink::Exp { r }).unwrap();
    let many = one.with_instances(vec![qc.problem.instances()[0].clone(); 4]).unwrap();
    let theta = Vector::from_vec(vec![0.5, 0.0, -0.5]);
    let cfg = HypergradConfig::default();
    let g1 = done_total_gradient(&one, &theta, &solve_all(&one, &theta, InnerMode::Projected, None, 200), InnerMode::Projected, &cfg)
        .unwrap();
    let g4 = done_total_gradient(&many, &theta, &solve_all(&many, &theta, InnerMode::Projected, None, 200), InnerMode::Projected, &cfg)
        .unwrap();
    assert!(rel_err(&g4, &g1) < 1e-12);
}

/// Straight-line CID with exact inner solutions and hand-written Jacobians.
fn reference_cid(qc: &cbo_core::testbed::quadratic::QuadraticCbo, theta0: &Vector, steps: usize, eta: f64, beta: f64) -> Vector {
    let mut theta = theta0.clone();
    let mut u: Option<f64> = None;
    let n = qc.problem.len();
    for _ in 0..steps {
        let mut g = 0.0;
        let mut j = Vector::zeros(theta.len());
        for i in 0..n {
            let star = qc.delta_star(i, &theta);
            g += qc.instance(i).g_value(&theta, &star)[0];
            j += qc.instance(i).composed_jacobian(&theta).column(0);
        }
        g /= n as f64;
        j /= n as f64;
        let next = match u {
            None => g,
            Some(prev) => (1.0 - eta) * prev + eta * g,
        }
        .max(1.0);
        u = Some(next);
        theta -= beta * j / next;
    }
    theta
}

#[test]
fn cid_reproduces_reference_iterates() {
    let qc = make_quadratic_cbo(21, dims(3, 2, 3, OuterKind::Log)).unwrap();
    let theta0 = Vector::from_vec(vec![0.2, -0.3, 0.1]);
    let config = SolverConfig {
        outer_steps: 50,
        inner_steps: 200,
        batch_size: Some(3),
        beta: StepSchedule::constant(0.05),
        eta: StepSchedule::constant(0.3),
        inner_mode: InnerMode::Projected,
        seed: 4,
        ..SolverConfig::default()
    };
    let (state, _) = run(&qc.problem, &config, theta0.clone()).unwrap();
    let reference = reference_cid(&qc, &theta0, 50, 0.3, 0.05);
    assert!((&state.theta - &reference).amax() < 1e-10);

    let (again, _) = run(&qc.problem, &config, theta0).unwrap();
    assert_eq!(state.theta, again.theta);
}

#[test]
fn linear_outer_with_full_memoryless_batch_is_gradient_descent() {
    let qc = make_quadratic_cbo(8, dims(3, 2, 4, OuterKind::Linear)).unwrap();
    let theta0 = Vector::from_vec(vec![0.4, 0.1, -0.2]);
    let config = SolverConfig {
        outer_steps: 1,
        inner_steps: 200,
        batch_size: Some(4),
        beta: StepSchedule::constant(0.1),
        eta: StepSchedule::constant(1.0),
        inner_mode: InnerMode::Projected,
        ..SolverConfig::default()
    };
    let mut state = CidState::new(&qc.problem, theta0.clone(), 0).unwrap();
    cid_step(&qc.problem, &mut state, &config).unwrap();
    let expected = &theta0 - 0.1 * qc.gradient(&theta0);
    assert!((&state.theta - expected).amax() < 1e-10);
    let u = state.u.unwrap();
    assert!((&u - qc.composed_mean(&theta0)).amax() < 1e-10);
}

#[test]
fn zero_steps_leave_the_start() {
    let qc = make_quadratic_cbo(1, QuadraticDims::default()).unwrap();
    let theta0 = Vector::from_vec(vec![1.0, 2.0, 3.0]);
    let config = SolverConfig {
        outer_steps: 0,
        ..SolverConfig::default()
    };
    let (state, metrics) = run(&qc.problem, &config, theta0.clone()).unwrap();
    assert_eq!(state.theta, theta0);
    assert!(state.u.is_none());
    assert!(metrics.records.is_empty());
}

#[test]
fn one_pgd_step_reaches_the_best_corner() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for p in 1..=10 {
        let model = ToyClassifier::new(ModelKind::SoftmaxRegression, p, 3);
        let theta = model.init_params(&mut rng);
        let x = Vector::from_fn(p, |_, _| rng.random_range(0.05..0.95));
        let y = rng.random_range(0..3);
        let eps = 0.1;
        let adv = pgd_attack(&model, &theta, &x, y, eps, 1, eps);
        let grad = model.grad_x(&theta, &x, y, LogitLoss::CrossEntropy);
        let corner = best_corner(&grad, &x, eps);
        assert!((&adv - &corner).amax() < 1e-15, "p = {p}");
    }
}

#[test]
fn done_gradient_matches_finite_differences_on_two_class_blobs() {
    let data = make_gaussian_blobs(3, 8, 2, 3, 1.0, 0.5).unwrap();
    let model = ToyClassifier::new(ModelKind::SoftmaxRegression, 3, 2);
    let done = build_done_problem(&data, model, 0.05, AttackLoss::NegativeLoss).unwrap();
    let problem = done.problem_at(1.0).unwrap();
    let mode = InnerMode::Barrier { c: 0.05 };
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(5));
    let solve = |t: &Vector| -> Vec<Vector> {
        (0..problem.len())
            .map(|i| {
                let inst = problem.instance(i);
                let rep = inner_solve(inst, mode, t, inst.constraint().interior_point(), &InnerSolverOptions::gradient(1e-3, 4000))
                    .unwrap();
                assert!(rep.final_grad_norm < 1e-10, "inner gradient {}", rep.final_grad_norm);
                rep.delta
            })
            .collect()
    };
    let reports: Vec<_> = (0..problem.len())
        .map(|i| {
            let inst = problem.instance(i);
            inner_solve(inst, mode, &theta, inst.constraint().interior_point(), &InnerSolverOptions::gradient(1e-3, 4000))
                .unwrap()
        })
        .collect();
    let grad = done_total_gradient(&problem, &theta, &reports, mode, &HypergradConfig::default()).unwrap();
    let fd = central_difference(|t| composite_objective(&problem, t, &solve(t)).unwrap(), &theta, 1e-5);
    assert!(rel_err(&grad, &fd) <= 1e-3, "rel err {}", rel_err(&grad, &fd));
}

#[test]
fn large_temperature_recovers_the_average_loss() {
    let data = make_gaussian_blobs(4, 12, 3, 2, 1.0, 0.5).unwrap();
    let model = ToyClassifier::new(ModelKind::SoftmaxRegression, 2, 3);
    let done = build_done_problem(&data, model, 0.05, AttackLoss::NegativeLoss).unwrap();
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let deltas: Vec<Vector> = (0..done.len()).map(|i| done.instance(i).constraint().interior_point().clone()).collect();
    let average = composite_objective(&done.average_problem().unwrap(), &theta, &deltas).unwrap();
    let reweighted = composite_objective(&done.problem_at(1e6).unwrap(), &theta, &deltas).unwrap();
    assert!((average - reweighted).abs() < 1e-5);
}
