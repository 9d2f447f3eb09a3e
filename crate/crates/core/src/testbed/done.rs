//! Distributionally robust adversarial training (DONE) on toy classifiers.
//!
//! Every training example `(x_i, y_i)` becomes one instance with
//! `g_i(θ, δ) = ℓ(θ; x_i + δ)` (cross-entropy) and inner objective the attack loss
//! `ℓ′_i(θ, δ)` over the box `{δ : ‖δ‖_∞ ≤ ε, x_i + δ ∈ [0, 1]^p}`. The outer objective
//! `r log((1/M) Σ exp(g_i / r))` is expressed through the exponential link and a
//! log outer function, so the temperature can follow a schedule.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attack::{evaluate_robustness, pgd_attack, RobustnessReport};
use super::classifier::{LogitLoss, ModelKind, ToyClassifier};
use super::data::{make_blob_split, BlobSpec, SyntheticDataset};
use crate::cid::{run_scheduled, sample_batch, SolverConfig, StepRecord, StepSchedule};
use crate::error::{CboError, Result};
use crate::problem::{
    build_box_constraints, BoxConstraint, CboProblem, InstanceDims, InstanceLink, LinearOuter, LogOuter, Matrix,
    ProblemInstance, ProblemSchedule, Vector,
};

/// Features are clipped into `[FEATURE_CLIP, 1 − FEATURE_CLIP]` before the boxes are
/// built so no side has zero width.
pub const FEATURE_CLIP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    /// `ℓ′ = −ℓ`: the attacker maximizes the training loss.
    #[default]
    NegativeLoss,
    /// Smooth margin `z_y − log Σ_{j≠y} exp(z_j)`.
    Margin,
}

impl AttackLoss {
    pub fn logit_loss(self) -> LogitLoss {
        match self {
            AttackLoss::NegativeLoss => LogitLoss::NegCrossEntropy,
            AttackLoss::Margin => LogitLoss::SmoothMargin,
        }
    }
}

/// One training example as a CBO instance.
#[derive(Debug, Clone)]
pub struct DoneInstance {
    model: ToyClassifier,
    x: Vector,
    y: usize,
    attack: LogitLoss,
    constraint: BoxConstraint,
}

impl DoneInstance {
    pub fn new(model: ToyClassifier, x: Vector, y: usize, epsilon: f64, attack: AttackLoss) -> Result<Self> {
        if x.len() != model.inputs {
            return Err(CboError::DimensionMismatch(format!(
                "example has {} features, model expects {}",
                x.len(),
                model.inputs
            )));
        }
        if y >= model.classes {
            return Err(CboError::InvalidArgument(format!("label {y} outside [0, {})", model.classes)));
        }
        let constraint = build_box_constraints(&x, epsilon)?;
        Ok(Self {
            model,
            x,
            y,
            attack: attack.logit_loss(),
            constraint,
        })
    }

    pub fn input(&self, delta: &Vector) -> Vector {
        &self.x + delta
    }

    pub fn label(&self) -> usize {
        self.y
    }
}

fn column(v: Vector) -> Matrix {
    let n = v.len();
    Matrix::from_column_slice(n, 1, v.as_slice())
}

impl ProblemInstance for DoneInstance {
    fn dims(&self) -> InstanceDims {
        InstanceDims {
            d: self.model.num_params(),
            p: self.model.inputs,
            m: 1,
        }
    }

    fn g_value(&self, theta: &Vector, delta: &Vector) -> Vector {
        Vector::from_element(1, self.model.loss(theta, &self.input(delta), self.y, LogitLoss::CrossEntropy))
    }

    fn g_jac_theta(&self, theta: &Vector, delta: &Vector) -> Matrix {
        column(self.model.grad_theta(theta, &self.input(delta), self.y, LogitLoss::CrossEntropy))
    }

    fn g_jac_delta(&self, theta: &Vector, delta: &Vector) -> Matrix {
        column(self.model.grad_x(theta, &self.input(delta), self.y, LogitLoss::CrossEntropy))
    }

    fn h_value(&self, theta: &Vector, delta: &Vector) -> f64 {
        self.model.loss(theta, &self.input(delta), self.y, self.attack)
    }

    fn h_grad_delta(&self, theta: &Vector, delta: &Vector) -> Vector {
        self.model.grad_x(theta, &self.input(delta), self.y, self.attack)
    }

    fn h_hess_delta_vec(&self, theta: &Vector, delta: &Vector, v: &Vector) -> Vector {
        self.model.hess_x_vec(theta, &self.input(delta), self.y, self.attack, v)
    }

    fn h_cross_jac_vec(&self, theta: &Vector, delta: &Vector, v: &Vector) -> Vector {
        self.model.cross_vec(theta, &self.input(delta), self.y, self.attack, v)
    }

    fn constraint(&self) -> &BoxConstraint {
        &self.constraint
    }
}

/// The instances of a training set, re-wrapped into a [`CboProblem`] per temperature.
#[derive(Clone)]
pub struct DoneProblem {
    pub model: ToyClassifier,
    pub epsilon: f64,
    instances: Vec<Arc<dyn ProblemInstance>>,
}

impl std::fmt::Debug for DoneProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DoneProblem")
            .field("model", &self.model)
            .field("epsilon", &self.epsilon)
            .field("instances", &self.instances.len())
            .finish()
    }
}

impl DoneProblem {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, i: usize) -> &dyn ProblemInstance {
        self.instances[i].as_ref()
    }

    /// Plain average adversarial loss `(1/M) Σ g_i`.
    pub fn average_problem(&self) -> Result<CboProblem> {
        CboProblem::new(
            self.instances.clone(),
            Arc::new(LinearOuter::new(Vector::from_element(1, 1.0))),
            InstanceLink::Identity,
        )
    }
}

impl ProblemSchedule for DoneProblem {
    /// `r log((1/M) Σ exp(g_i / r))`; cross-entropy is nonnegative so the linked
    /// mean never drops below 1.
    fn problem_at(&self, r: f64) -> Result<CboProblem> {
        CboProblem::new(self.instances.clone(), Arc::new(LogOuter::new(r, 1.0)), InstanceLink::Exp { r })
    }
}

pub fn build_done_problem(
    data: &SyntheticDataset,
    model: ToyClassifier,
    epsilon: f64,
    attack: AttackLoss,
) -> Result<DoneProblem> {
    if data.is_empty() {
        return Err(CboError::InvalidArgument("empty training set".into()));
    }
    if !(epsilon > 0.0) {
        return Err(CboError::InvalidArgument(format!("ε must be positive, got {epsilon}")));
    }
    let clipped = data.clipped(FEATURE_CLIP);
    let instances = (0..clipped.len())
        .map(|i| {
            let (x, y) = clipped.example(i);
            DoneInstance::new(model, x, y, epsilon, attack).map(|inst| Arc::new(inst) as Arc<dyn ProblemInstance>)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DoneProblem {
        model,
        epsilon,
        instances,
    })
}

/// Minibatch PGD adversarial training on the average loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformAtConfig {
    pub outer_steps: usize,
    pub beta: StepSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
}

impl UniformAtConfig {
    /// Same horizon, stepsizes, batch and seed as a CID run.
    pub fn matching(solver: &SolverConfig, m: usize, pgd_steps: usize, pgd_step_size: f64) -> Result<Self> {
        Ok(Self {
            outer_steps: solver.outer_steps,
            beta: solver.beta,
            batch_size: solver.effective_batch(m)?,
            seed: solver.seed,
            pgd_steps,
            pgd_step_size,
        })
    }
}

pub fn train_uniform_at(
    data: &SyntheticDataset,
    model: ToyClassifier,
    epsilon: f64,
    theta0: Vector,
    config: &UniformAtConfig,
) -> Result<(Vector, Vec<StepRecord>)> {
    if config.batch_size == 0 || config.batch_size > data.len() {
        return Err(CboError::config(
            "solver.batch_size",
            format!("batch size {} must lie in [1, {}]", config.batch_size, data.len()),
        ));
    }
    let data = data.clipped(FEATURE_CLIP);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = theta0;
    let mut records = Vec::with_capacity(config.outer_steps);
    for t in 0..config.outer_steps {
        let batch = sample_batch(&mut rng, data.len(), config.batch_size);
        let mut grad = Vector::zeros(theta.len());
        let mut loss = 0.0;
        for &i in &batch {
            let (x, y) = data.example(i);
            let adv = pgd_attack(&model, &theta, &x, y, epsilon, config.pgd_steps, config.pgd_step_size);
            loss += model.loss(&theta, &adv, y, LogitLoss::CrossEntropy);
            grad += model.grad_theta(&theta, &adv, y, LogitLoss::CrossEntropy);
        }
        let n = batch.len() as f64;
        grad /= n;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CboError::StepFailed {
                step: t,
                source: Box::new(CboError::NonFinite { context: "adversarial training gradient" }),
            });
        }
        theta -= config.beta.value_at(t, config.outer_steps) * &grad;
        records.push(StepRecord {
            step: t,
            objective: loss / n,
            grad_norm: grad.norm(),
            tracking_error: 0.0,
            inner_grad_norm: 0.0,
            wall_ms: 0.0,
            temperature: None,
        });
    }
    Ok((theta, records))
}

/// Settings for comparing DONE against uniform adversarial training on imbalanced
/// blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSettings {
    pub blobs: BlobSpec,
    pub n_train: usize,
    pub n_test_per_class: usize,
    pub imbalance_ratio: f64,
    pub model: ModelKind,
    pub epsilon: f64,
    pub attack: AttackLoss,
    pub solver: SolverConfig,
    /// PGD steps used by the uniform baseline during training.
    pub train_pgd_steps: usize,
    pub eval_pgd_steps: usize,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        let solver = SolverConfig {
            outer_steps: 2000,
            inner_steps: 10,
            alpha: Some(0.05),
            beta: StepSchedule::Cosine { base: 0.5, floor: 0.0 },
            ..SolverConfig::default()
        };
        Self {
            blobs: BlobSpec {
                classes: 5,
                features: 4,
                separation: 0.5,
                noise: 0.1,
            },
            n_train: 500,
            n_test_per_class: 200,
            imbalance_ratio: 0.2,
            model: ModelKind::SoftmaxRegression,
            epsilon: 0.05,
            attack: AttackLoss::NegativeLoss,
            solver: SolverConfig {
                hypergrad: crate::hypergrad::HypergradConfig::hessian_free(),
                ..solver
            },
            train_pgd_steps: 10,
            eval_pgd_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub seed: u64,
    pub done: RobustnessReport,
    pub uniform: RobustnessReport,
}

/// Trains both methods from the same initialization and batch sequence.
pub fn compare_done_with_uniform(seed: u64, settings: &ComparisonSettings) -> Result<ComparisonOutcome> {
    let (train, test) = make_blob_split(
        seed,
        &settings.blobs,
        settings.n_train,
        settings.n_test_per_class,
        settings.imbalance_ratio,
    )?;
    let model = ToyClassifier::new(settings.model, settings.blobs.features, settings.blobs.classes);
    let theta0 = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let solver = SolverConfig {
        seed,
        ..settings.solver.clone()
    };

    let problem = build_done_problem(&train, model, settings.epsilon, settings.attack)?;
    let (state, _) = run_scheduled(&problem, &solver, theta0.clone())?;
    let done = evaluate_robustness(&model, &state.theta, &test, settings.epsilon, settings.eval_pgd_steps);

    let step = if settings.train_pgd_steps == 0 {
        0.0
    } else {
        2.5 * settings.epsilon / settings.train_pgd_steps as f64
    };
    let at = UniformAtConfig::matching(&solver, train.len(), settings.train_pgd_steps, step)?;
    let (theta_at, _) = train_uniform_at(&train, model, settings.epsilon, theta0, &at)?;
    let uniform = evaluate_robustness(&model, &theta_at, &test, settings.epsilon, settings.eval_pgd_steps);
    Ok(ComparisonOutcome { seed, done, uniform })
}
