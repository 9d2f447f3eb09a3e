//! Compositional implicit differentiation (CID): the stochastic outer loop.
//!
//! Each outer step samples a batch of instances, runs `K` inner steps per instance,
//! forms implicit hypergradients, and applies
//!
//! ```text
//! u_{t+1} = (1 − η_t) u_t + η_t ḡ_B
//! θ_{t+1} = θ_t − β_t Ĵ_B ∇f(u_{t+1})
//! ```
//!
//! where `ḡ_B` and `Ĵ_B` are the batch means of the linked instance values and their
//! implicit Jacobians.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{inner_solve, InnerMode, InnerSolveReport, InnerSolverOptions, UpdateRule};
use crate::dro::RSchedule;
use crate::error::{CboError, Result};
use crate::hypergrad::{batch_means, instance_terms, HypergradConfig, InstanceTerms};
use crate::problem::{CboProblem, ProblemSchedule, Vector};

/// Default cap on the batch size when none is configured.
pub const DEFAULT_MAX_BATCH: usize = 64;

/// A stepsize sequence indexed by the outer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant { value: f64 },
    /// `scale / √T` for a run of `T` outer steps.
    InvSqrtHorizon { scale: f64 },
    /// Half-cosine decay from `base` to `floor` over the run.
    Cosine { base: f64, floor: f64 },
    /// `base · factor^⌊t / every⌋`.
    Step { base: f64, factor: f64, every: usize },
}

impl StepSchedule {
    pub fn constant(value: f64) -> Self {
        StepSchedule::Constant { value }
    }

    pub fn value_at(&self, t: usize, total: usize) -> f64 {
        match *self {
            StepSchedule::Constant { value } => value,
            StepSchedule::InvSqrtHorizon { scale } => scale / (total.max(1) as f64).sqrt(),
            StepSchedule::Cosine { base, floor } => {
                let frac = if total == 0 { 0.0 } else { t as f64 / total as f64 };
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            StepSchedule::Step { base, factor, every } => base * factor.powi((t / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Outer iterations `T`.
    pub outer_steps: usize,
    /// Inner iterations `K`.
    pub inner_steps: usize,
    /// `None` means `min(M, 64)`.
    pub batch_size: Option<usize>,
    /// Use a batch of `min(M, T)` instances, the setting of the convergence analysis.
    pub theorem_batch: bool,
    /// Inner stepsize; `None` means `2/(L+μ)` from each instance's declared bounds.
    pub alpha: Option<f64>,
    pub beta: StepSchedule,
    pub eta: StepSchedule,
    /// Outer temperature schedule; only read by [`run_scheduled`].
    pub r_schedule: RSchedule,
    pub inner_mode: InnerMode,
    pub inner_rule: UpdateRule,
    pub seed: u64,
    pub warm_start: bool,
    pub hypergrad: HypergradConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_steps: 100,
            inner_steps: 10,
            batch_size: None,
            theorem_batch: false,
            alpha: None,
            beta: StepSchedule::InvSqrtHorizon { scale: 1.0 },
            eta: StepSchedule::constant(0.5),
            r_schedule: RSchedule::default(),
            inner_mode: InnerMode::Barrier { c: 1e-3 },
            inner_rule: UpdateRule::Gradient,
            seed: 0,
            warm_start: true,
            hypergrad: HypergradConfig::default(),
        }
    }
}

impl SolverConfig {
    /// Checks every constraint that does not depend on the problem.
    pub fn validate(&self) -> Result<()> {
        for t in 0..self.outer_steps.max(1) {
            let eta = self.eta.value_at(t, self.outer_steps);
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(CboError::config(
                    "solver.eta",
                    format!("η_t must lie in (0, 1], got {eta} at step {t}"),
                ));
            }
            let beta = self.beta.value_at(t, self.outer_steps);
            if !(beta >= 0.0) || !beta.is_finite() {
                return Err(CboError::config(
                    "solver.beta",
                    format!("β_t must be finite and nonnegative, got {beta} at step {t}"),
                ));
            }
        }
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(CboError::config("solver.batch_size", "batch size must be at least 1"));
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(CboError::config("solver.alpha", format!("inner stepsize must be positive, got {a}")));
            }
        }
        if let InnerMode::Barrier { c } = self.inner_mode {
            if !(c > 0.0) || !c.is_finite() {
                return Err(CboError::config("solver.c", format!("barrier coefficient must be positive, got {c}")));
            }
        }
        self.r_schedule
            .validate()
            .map_err(|e| CboError::config("solver.r_schedule", e.to_string()))?;
        self.hypergrad
            .validate()
            .map_err(|e| CboError::config("hypergrad", e.to_string()))?;
        Ok(())
    }

    /// Batch size used on a problem with `m` instances.
    pub fn effective_batch(&self, m: usize) -> Result<usize> {
        if self.theorem_batch {
            return Ok(m.min(self.outer_steps.max(1)));
        }
        match self.batch_size {
            None => Ok(m.min(DEFAULT_MAX_BATCH)),
            Some(b) if b >= 1 && b <= m => Ok(b),
            Some(b) => Err(CboError::config(
                "solver.batch_size",
                format!("batch size {b} must lie in [1, {m}]"),
            )),
        }
    }
}

/// Iterate bundle of a CID run.
#[derive(Debug, Clone)]
pub struct CidState {
    pub theta: Vector,
    /// Running estimate of the linked mean; `None` until bootstrapped from a batch.
    pub u: Option<Vector>,
    pub step: usize,
    pub per_instance_delta: Vec<Vector>,
    /// Number of coordinates of `u` raised to the outer domain floor so far.
    pub clamp_activations: usize,
    /// Temperature the current `u` was accumulated under.
    pub temperature: Option<f64>,
    rng: ChaCha8Rng,
}

impl CidState {
    /// Fresh state with every warm start at its box center.
    pub fn new(problem: &CboProblem, theta0: Vector, seed: u64) -> Result<Self> {
        if theta0.len() != problem.dims().d {
            return Err(CboError::DimensionMismatch(format!(
                "θ0 has length {}, problem expects {}",
                theta0.len(),
                problem.dims().d
            )));
        }
        Ok(Self {
            theta: theta0,
            u: None,
            step: 0,
            per_instance_delta: problem
                .instances()
                .iter()
                .map(|i| i.constraint().interior_point().clone())
                .collect(),
            clamp_activations: 0,
            temperature: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

/// Diagnostics for one outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `f(u_{t+1})`.
    pub objective: f64,
    /// `‖Ĵ_B ∇f(u_{t+1})‖`.
    pub grad_norm: f64,
    /// `‖u_{t+1} − ḡ_B‖`.
    pub tracking_error: f64,
    /// Mean final inner gradient norm over the batch.
    pub inner_grad_norm: f64,
    pub wall_ms: f64,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub clamp_activations: usize,
}

/// Draws `size` distinct instance indices, returned in increasing order.
pub fn sample_batch(rng: &mut ChaCha8Rng, instances: usize, size: usize) -> Vec<usize> {
    let mut idx = sample(rng, instances, size).into_vec();
    idx.sort_unstable();
    idx
}

fn inner_stepsize(problem: &CboProblem, index: usize, config: &SolverConfig) -> Result<f64> {
    if let Some(a) = config.alpha {
        return Ok(a);
    }
    problem
        .instance(index)
        .curvature_bounds()
        .map(|b| b.optimal_step())
        .ok_or_else(|| {
            CboError::config(
                "solver.alpha",
                format!("instance {index} declares no curvature bounds; set an explicit inner stepsize"),
            )
        })
}

/// Inner solve plus implicit terms for one instance, starting from `delta0`.
pub fn solve_instance(
    problem: &CboProblem,
    index: usize,
    theta: &Vector,
    delta0: &Vector,
    config: &SolverConfig,
) -> Result<(InnerSolveReport, InstanceTerms)> {
    let inst = problem.instance(index);
    let opts = InnerSolverOptions {
        alpha: inner_stepsize(problem, index, config)?,
        steps: config.inner_steps,
        rule: config.inner_rule,
        record_trajectory: false,
    };
    let report = inner_solve(inst, config.inner_mode, theta, delta0, &opts)?;
    let terms = instance_terms(problem, index, theta, &report.delta, config.inner_mode, &config.hypergrad)?;
    Ok((report, terms))
}

/// One CID outer step. On error the state is left untouched.
pub fn cid_step(problem: &CboProblem, state: &mut CidState, config: &SolverConfig) -> Result<StepRecord> {
    let started = Instant::now();
    let t = state.step;
    let total = config.outer_steps;
    let eta = config.eta.value_at(t, total);
    let beta = config.beta.value_at(t, total);

    let m = problem.len();
    let batch_size = config.effective_batch(m)?;
    let mut rng = state.rng.clone();
    let batch = sample_batch(&mut rng, m, batch_size);

    let solved = batch
        .par_iter()
        .map(|&i| {
            let start = if config.warm_start {
                &state.per_instance_delta[i]
            } else {
                problem.instance(i).constraint().interior_point()
            };
            solve_instance(problem, i, &state.theta, start, config)
        })
        .collect::<Result<Vec<_>>>()?;

    let (reports, terms): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    let (g_batch, j_batch) = batch_means(problem, &terms)?;

    let u_prev = state.u.clone().unwrap_or_else(|| g_batch.clone());
    let mut u_next = (1.0 - eta) * u_prev + eta * &g_batch;
    let floor = problem.outer().domain_floor();
    let mut clamps = 0;
    for x in u_next.iter_mut() {
        if *x < floor {
            *x = floor;
            clamps += 1;
        }
    }
    let outer_grad = problem.outer().gradient(&u_next);
    let direction = &j_batch * outer_grad;
    if direction.iter().any(|x| !x.is_finite()) {
        return Err(CboError::NonFinite { context: "CID update direction" });
    }
    let theta_next = &state.theta - beta * &direction;
    let objective = problem.outer().evaluate(&u_next);
    let tracking_error = (&u_next - &g_batch).norm();
    let inner_grad_norm = reports.iter().map(|r| r.final_grad_norm).sum::<f64>() / reports.len() as f64;

    for (&i, rep) in batch.iter().zip(&reports) {
        state.per_instance_delta[i] = rep.delta.clone();
    }
    state.theta = theta_next;
    state.u = Some(u_next);
    state.step += 1;
    state.clamp_activations += clamps;
    state.rng = rng;

    Ok(StepRecord {
        step: t,
        objective,
        grad_norm: direction.norm(),
        tracking_error,
        inner_grad_norm,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        temperature: state.temperature,
    })
}

/// `T` CID steps from `theta0`.
pub fn run(problem: &CboProblem, config: &SolverConfig, theta0: Vector) -> Result<(CidState, RunMetrics)> {
    run_observed(problem, config, theta0, |_| {})
}

/// Like [`run`], calling `observer` with the state before every step (so it sees
/// `θ_0 … θ_{T−1}`).
pub fn run_observed<O>(
    problem: &CboProblem,
    config: &SolverConfig,
    theta0: Vector,
    mut observer: O,
) -> Result<(CidState, RunMetrics)>
where
    O: FnMut(&CidState),
{
    config.validate()?;
    config.effective_batch(problem.len())?;
    let mut state = CidState::new(problem, theta0, config.seed)?;
    let mut metrics = RunMetrics::default();
    for step in 0..config.outer_steps {
        observer(&state);
        let record = cid_step(problem, &mut state, config).map_err(|e| CboError::StepFailed {
            step,
            source: Box::new(e),
        })?;
        metrics.records.push(record);
    }
    metrics.clamp_activations = state.clamp_activations;
    Ok((state, metrics))
}

/// CID on a temperature-scheduled problem. When the temperature changes, `u` is
/// re-bootstrapped from the next batch since the linked values change scale.
pub fn run_scheduled<S>(source: &S, config: &SolverConfig, theta0: Vector) -> Result<(CidState, RunMetrics)>
where
    S: ProblemSchedule + ?Sized,
{
    config.validate()?;
    let total = config.outer_steps;
    let first_r = config.r_schedule.value_at(0, total);
    let mut problem = source.problem_at(first_r)?;
    config.effective_batch(problem.len())?;
    let mut state = CidState::new(&problem, theta0, config.seed)?;
    state.temperature = Some(first_r);
    let mut metrics = RunMetrics::default();
    for step in 0..total {
        let r = config.r_schedule.value_at(step, total);
        if state.temperature != Some(r) {
            problem = source.problem_at(r)?;
            state.u = None;
            state.temperature = Some(r);
        }
        let record = cid_step(&problem, &mut state, config).map_err(|e| CboError::StepFailed {
            step,
            source: Box::new(e),
        })?;
        metrics.records.push(record);
    }
    metrics.clamp_activations = state.clamp_activations;
    Ok((state, metrics))
}
