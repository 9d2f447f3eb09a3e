//! ℓ∞ PGD attacks and robustness evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{LogitLoss, ToyClassifier};
use super::data::SyntheticDataset;
use crate::problem::Vector;

/// Sign-gradient ascent on `loss` from `x`, projected onto the ε-box intersected
/// with `[0, 1]^p` after every step.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack_with(
    model: &ToyClassifier,
    theta: &Vector,
    x: &Vector,
    y: usize,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    loss: LogitLoss,
) -> Vector {
    let mut adv = x.clone();
    for _ in 0..steps {
        let grad = model.grad_x(theta, &adv, y, loss);
        for k in 0..adv.len() {
            let s = grad[k];
            let dir = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            let lo = (x[k] - epsilon).max(0.0);
            let hi = (x[k] + epsilon).min(1.0);
            adv[k] = (adv[k] + step_size * dir).clamp(lo, hi);
        }
    }
    adv
}

/// PGD on the cross-entropy loss.
pub fn pgd_attack(
    model: &ToyClassifier,
    theta: &Vector,
    x: &Vector,
    y: usize,
    epsilon: f64,
    steps: usize,
    step_size: f64,
) -> Vector {
    pgd_attack_with(model, theta, x, y, epsilon, steps, step_size, LogitLoss::CrossEntropy)
}

/// Mean of the `⌈k·C⌉` smallest per-class accuracies; classes with no examples are
/// skipped.
pub fn ra_tail(per_class: &[Option<f64>], fraction: f64) -> Option<f64> {
    let mut present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return None;
    }
    present.sort_by(f64::total_cmp);
    let take = ((fraction * present.len() as f64).ceil() as usize).clamp(1, present.len());
    Some(present[..take].iter().sum::<f64>() / take as f64)
}

/// Accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub standard_accuracy: f64,
    pub robust_accuracy: f64,
    pub per_class_standard: Vec<Option<f64>>,
    pub per_class_robust: Vec<Option<f64>>,
    pub ra_tail_30: Option<f64>,
    pub epsilon: f64,
    pub pgd_steps: usize,
}

/// Clean and PGD accuracy per class with step size `2.5 ε / steps`.
pub fn evaluate_robustness(
    model: &ToyClassifier,
    theta: &Vector,
    data: &SyntheticDataset,
    epsilon: f64,
    pgd_steps: usize,
) -> RobustnessReport {
    let step_size = if pgd_steps == 0 { 0.0 } else { 2.5 * epsilon / pgd_steps as f64 };
    let outcomes: Vec<(usize, bool, bool)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = data.example(i);
            let clean = model.predict(theta, &x) == y;
            let robust = clean && {
                let adv = pgd_attack(model, theta, &x, y, epsilon, pgd_steps, step_size);
                model.predict(theta, &adv) == y
            };
            (y, clean, robust)
        })
        .collect();
    let c = data.classes;
    let mut total = vec![0usize; c];
    let mut clean = vec![0usize; c];
    let mut robust = vec![0usize; c];
    for (y, ok, rob) in outcomes {
        total[y] += 1;
        clean[y] += ok as usize;
        robust[y] += rob as usize;
    }
    let pct = |hits: &[usize]| -> Vec<Option<f64>> {
        hits.iter()
            .zip(&total)
            .map(|(h, n)| (*n > 0).then(|| 100.0 * *h as f64 / *n as f64))
            .collect()
    };
    let n = data.len().max(1) as f64;
    let per_class_robust = pct(&robust);
    RobustnessReport {
        standard_accuracy: 100.0 * clean.iter().sum::<usize>() as f64 / n,
        robust_accuracy: 100.0 * robust.iter().sum::<usize>() as f64 / n,
        per_class_standard: pct(&clean),
        ra_tail_30: ra_tail(&per_class_robust, 0.3),
        per_class_robust,
        epsilon,
        pgd_steps,
    }
}
