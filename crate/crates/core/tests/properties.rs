//! Invariants over random inputs.

use cbo_core::barrier::{inner_solve, InnerMode, InnerSolverOptions, UpdateRule};
use cbo_core::cli::output::format_float;
use cbo_core::dro::{logsumexp_objective, optimal_weights, regularized_inner_max_value, DroParams};
use cbo_core::problem::{build_box_constraints, Vector};
use cbo_core::testbed::attack::{pgd_attack, ra_tail};
use cbo_core::testbed::classifier::{ModelKind, ToyClassifier};
use cbo_core::testbed::data::geometric_class_counts;
use cbo_core::testbed::quadratic::{make_quadratic_cbo, QuadraticDims};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn losses() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..12)
}

proptest! {
    #[test]
    fn weights_lie_on_the_simplex(l in losses(), r in 0.01f64..100.0) {
        let w = optimal_weights(&Vector::from_vec(l), DroParams::new(r).unwrap()).unwrap();
        prop_assert!(w.as_vector().iter().all(|x| *x >= 0.0));
        prop_assert!((w.as_vector().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_ignore_shifts_and_follow_permutations(l in losses(), r in 0.05f64..20.0, shift in -100.0f64..100.0) {
        let params = DroParams::new(r).unwrap();
        let base = optimal_weights(&Vector::from_vec(l.clone()), params).unwrap();
        let shifted = optimal_weights(&Vector::from_vec(l.iter().map(|x| x + shift).collect()), params).unwrap();
        prop_assert!((base.as_vector() - shifted.as_vector()).amax() < 1e-12);
        let reversed: Vec<f64> = l.iter().rev().copied().collect();
        let rw = optimal_weights(&Vector::from_vec(reversed), params).unwrap();
        let n = l.len();
        for k in 0..n {
            prop_assert!((rw.as_vector()[k] - base.as_vector()[n - 1 - k]).abs() < 1e-15);
        }
    }

    #[test]
    fn larger_losses_get_larger_weights(l in losses(), r in 0.05f64..20.0) {
        let w = optimal_weights(&Vector::from_vec(l.clone()), DroParams::new(r).unwrap()).unwrap();
        for i in 0..l.len() {
            for j in 0..l.len() {
                if l[i] > l[j] {
                    prop_assert!(w.as_vector()[i] >= w.as_vector()[j]);
                }
            }
        }
    }

    #[test]
    fn logsumexp_between_mean_and_max_and_decreasing_in_r(l in losses(), r in 0.05f64..20.0) {
        let lv = Vector::from_vec(l.clone());
        let v = logsumexp_objective(&lv, DroParams::new(r).unwrap()).unwrap();
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= mean - 1e-9 && v <= max + 1e-9);
        let cooler = logsumexp_objective(&lv, DroParams::new(r / 2.0).unwrap()).unwrap();
        prop_assert!(cooler >= v - 1e-9);
    }

    #[test]
    fn optimal_weights_maximize_the_inner_value(l in losses(), r in 0.1f64..10.0, seed in any::<u64>()) {
        use rand::Rng;
        let lv = Vector::from_vec(l.clone());
        let params = DroParams::new(r).unwrap();
        let best = regularized_inner_max_value(&lv, &optimal_weights(&lv, params).unwrap(), params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..l.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let other = cbo_core::dro::SimplexWeights::new(Vector::from_vec(raw.iter().map(|x| x / total).collect())).unwrap();
        prop_assert!(regularized_inner_max_value(&lv, &other, params).unwrap() <= best + 1e-9);
    }

    #[test]
    fn attack_boxes_stay_in_the_unit_cube(x in prop::collection::vec(0.001f64..0.999, 1..8), eps in 0.001f64..0.5) {
        let xv = Vector::from_vec(x.clone());
        let bx = build_box_constraints(&xv, eps).unwrap();
        for k in 0..x.len() {
            prop_assert!(bx.upper(k) > 0.0 && bx.upper(k) <= eps);
            prop_assert!(bx.lower(k) < 0.0 && bx.lower(k) >= -eps);
            prop_assert!(x[k] + bx.upper(k) <= 1.0 + 1e-15);
            prop_assert!(x[k] + bx.lower(k) >= -1e-15);
        }
    }

    #[test]
    fn box_projection_is_idempotent(x in prop::collection::vec(0.01f64..0.99, 1..8), d in prop::collection::vec(-1.0f64..1.0, 8)) {
        let p = x.len();
        let bx = build_box_constraints(&Vector::from_vec(x), 0.1).unwrap();
        let once = bx.project(&Vector::from_fn(p, |k, _| d[k]));
        prop_assert!(bx.min_margin(&once) >= 0.0);
        prop_assert_eq!(bx.project(&once), once);
    }

    #[test]
    fn pgd_output_respects_both_boxes(seed in any::<u64>(), p in 1usize..8, steps in 0usize..15, eps in 0.01f64..0.3) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ToyClassifier::new(ModelKind::ReluMlp { hidden: 5 }, p, 3);
        let theta = model.init_params(&mut rng);
        let x = Vector::from_fn(p, |_, _| rng.random_range(0.0..=1.0));
        let adv = pgd_attack(&model, &theta, &x, rng.random_range(0..3), eps, steps, 2.5 * eps / steps.max(1) as f64);
        prop_assert!((&adv - &x).amax() <= eps + 1e-12);
        prop_assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn barrier_solves_stay_strictly_feasible(seed in 0u64..200, c in 1e-4f64..1.0, rule in 0usize..3, steps in 1usize..40) {
        use rand::Rng;
        let dims = QuadraticDims { box_half_width: 0.2, ..QuadraticDims::default() };
        let qc = make_quadratic_cbo(seed, dims).unwrap();
        let inst = qc.problem.instance(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = Vector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
        let start = Vector::from_fn(2, |_, _| rng.random_range(-0.1999..0.1999));
        let rule = [UpdateRule::Gradient, UpdateRule::Sign, UpdateRule::Adam][rule];
        let opts = InnerSolverOptions { alpha: 0.1, steps, rule, record_trajectory: false };
        let rep = inner_solve(inst, InnerMode::Barrier { c }, &theta, &start, &opts).unwrap();
        prop_assert!(rep.min_margin > 0.0);
        prop_assert!(inst.constraint().is_strictly_feasible(&rep.delta));
    }

    #[test]
    fn class_counts_are_geometric(n in 50usize..2000, classes in 1usize..10, ratio in 0.05f64..=1.0) {
        let counts = geometric_class_counts(n, classes, ratio).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert!(counts.iter().all(|c| *c >= 1));
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tail_accuracy_is_between_min_and_mean(acc in prop::collection::vec(0.0f64..100.0, 1..12), k in 0.01f64..=1.0) {
        let per: Vec<Option<f64>> = acc.iter().map(|a| Some(*a)).collect();
        let tail = ra_tail(&per, k).unwrap();
        let min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        prop_assert!(tail >= min - 1e-12 && tail <= mean + 1e-12);
    }

    #[test]
    fn floats_round_trip_exactly(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(format_float(x).parse::<f64>().unwrap(), x);
    }
}
