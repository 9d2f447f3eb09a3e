//! KL-regularized worst-case instance weights.
//!
//! The inner maximization `max_{w ∈ Δ_M} Σ w_i ℓ_i − r Σ w_i log(M w_i)` has the
//! closed-form maximizer `w* = softmax(ℓ / r)`, and substituting it back gives the
//! log-mean-exp objective `r log((1/M) Σ exp(ℓ_i / r))`.

use serde::{Deserialize, Serialize};

use crate::error::{CboError, Result};
use crate::problem::Vector;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vector);

impl SimplexWeights {
    /// Accepts `w` if it is nonnegative and sums to one within `1e-12`.
    pub fn new(w: Vector) -> Result<Self> {
        if w.is_empty() {
            return Err(CboError::InvalidArgument("simplex weights cannot be empty".into()));
        }
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(CboError::InvalidArgument("simplex weights must be finite and nonnegative".into()));
        }
        let total = w.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CboError::InvalidArgument(format!("simplex weights sum to {total}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(m: usize) -> Self {
        Self(Vector::from_element(m, 1.0 / m as f64))
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn into_inner(self) -> Vector {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// KL regularization strength `r > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroParams {
    r: f64,
}

impl DroParams {
    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(CboError::InvalidArgument(format!(
                "KL regularization r must be positive and finite, got {r}"
            )));
        }
        Ok(Self { r })
    }

    pub fn r(&self) -> f64 {
        self.r
    }
}

fn check_losses(losses: &Vector) -> Result<()> {
    if losses.is_empty() {
        return Err(CboError::InvalidArgument("loss vector is empty".into()));
    }
    if losses.iter().all(|l| l.is_finite()) {
        Ok(())
    } else {
        Err(CboError::NonFinite { context: "instance losses" })
    }
}

/// `softmax(ℓ / r)` computed from `exp((ℓ_i − max ℓ) / r)`.
pub fn optimal_weights(losses: &Vector, params: DroParams) -> Result<SimplexWeights> {
    check_losses(losses)?;
    let max = losses.max();
    let shifted = losses.map(|l| ((l - max) / params.r).exp());
    let total = shifted.sum();
    let mut w = shifted / total;
    // renormalize once more so the sum is 1 to rounding
    let s = w.sum();
    w /= s;
    Ok(SimplexWeights(w))
}

/// `Σ w_i ℓ_i − r Σ w_i log(M w_i)` with `0 log 0 = 0`.
pub fn regularized_inner_max_value(losses: &Vector, weights: &SimplexWeights, params: DroParams) -> Result<f64> {
    check_losses(losses)?;
    if losses.len() != weights.len() {
        return Err(CboError::DimensionMismatch(format!(
            "{} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let m = losses.len() as f64;
    let w = weights.as_vector();
    let linear = w.dot(losses);
    let kl: f64 = w.iter().filter(|x| **x > 0.0).map(|x| x * (m * x).ln()).sum();
    Ok(linear - params.r * kl)
}

/// `r log((1/M) Σ exp(ℓ_i / r))`, max-shifted.
pub fn logsumexp_objective(losses: &Vector, params: DroParams) -> Result<f64> {
    check_losses(losses)?;
    let max = losses.max();
    let r = params.r;
    let mean_exp = losses.iter().map(|l| ((l - max) / r).exp()).sum::<f64>() / losses.len() as f64;
    Ok(max + r * mean_exp.ln())
}

/// Piecewise-constant temperature schedule over the fraction `t / T` of a run.
///
/// The default starts near-uniform at `r = 10`, sharpens to `1` after two thirds of
/// the run and to `0.1` after five sixths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RSchedule {
    /// `(start_fraction, r)` pairs in increasing fraction order; the first starts at 0.
    pub stages: Vec<(f64, f64)>,
}

impl Default for RSchedule {
    fn default() -> Self {
        Self {
            stages: vec![(0.0, 10.0), (2.0 / 3.0, 1.0), (5.0 / 6.0, 0.1)],
        }
    }
}

impl RSchedule {
    pub fn constant(r: f64) -> Self {
        Self { stages: vec![(0.0, r)] }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| CboError::InvalidArgument("r schedule has no stages".into()))?;
        if first.0 != 0.0 {
            return Err(CboError::InvalidArgument("r schedule must start at fraction 0".into()));
        }
        for w in self.stages.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(CboError::InvalidArgument("r schedule fractions must increase".into()));
            }
        }
        for &(frac, r) in &self.stages {
            if !(0.0..=1.0).contains(&frac) {
                return Err(CboError::InvalidArgument(format!("r schedule fraction {frac} outside [0, 1]")));
            }
            DroParams::new(r)?;
        }
        Ok(())
    }

    /// Temperature at outer step `t` of `total`.
    pub fn value_at(&self, t: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
        self.stages
            .iter()
            .rev()
            .find(|(start, _)| frac + 1e-12 >= *start)
            .map(|(_, r)| *r)
            .unwrap_or(self.stages[0].1)
    }
}
