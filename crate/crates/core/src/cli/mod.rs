//! The `cbo` command-line front end.
//!
//! ```text
//! cbo run-quadratic|run-done|audit-gradients|scaling-study|evaluate \
//!     --config <path> [--key value ...] --out <dir>
//! ```
//!
//! Every command resolves and validates its whole configuration and checks that the
//! output directory is writable before doing any work.

pub mod config;
pub mod output;
pub mod scaling;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cid::{run, run_scheduled};
use crate::error::{CboError, Result};
use crate::problem::{audit_instance, OracleAudit, Vector};
use crate::testbed::attack::{evaluate_robustness, RobustnessReport};
use crate::testbed::classifier::ToyClassifier;
use crate::testbed::data::{make_blob_split, SyntheticDataset};
use crate::testbed::done::build_done_problem;
use crate::testbed::quadratic::make_quadratic_cbo;

pub use config::{Command, RawConfig};

/// Parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub flags: Vec<(String, String)>,
}

/// Trained classifier as written by `run-done` and read by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub model: ToyClassifier,
    pub theta: Vec<f64>,
    /// Flat configuration of the training run.
    pub config: Value,
}

/// Runs one command and returns the path of its `summary.json`.
pub fn execute(inv: &Invocation) -> Result<PathBuf> {
    let raw = RawConfig::from_file(inv.command, inv.config.as_deref(), &inv.flags)?;
    execute_with(inv.command, &raw, &inv.out)
}

pub fn execute_with(command: Command, raw: &RawConfig, out: &Path) -> Result<PathBuf> {
    match command {
        Command::RunQuadratic => run_quadratic(raw, out),
        Command::RunDone => run_done(raw, out),
        Command::AuditGradients => audit_gradients(raw, out),
        Command::ScalingStudy => scaling_study(raw, out),
        Command::Evaluate => evaluate(raw, out),
    }
}

fn summary(command: Command, raw: &RawConfig, results: Value) -> Result<Value> {
    Ok(json!({
        "command": command.name(),
        "seed": raw.u64("solver.seed")?,
        "config": raw.to_json(),
        "results": results,
    }))
}

fn finish(out: &Path, command: Command, raw: &RawConfig, results: Value) -> Result<PathBuf> {
    let path = out.join("summary.json");
    output::write_json(&path, &summary(command, raw, results)?)?;
    Ok(path)
}

fn robustness_json(rep: &RobustnessReport) -> Value {
    json!({
        "standard_accuracy": rep.standard_accuracy,
        "robust_accuracy": rep.robust_accuracy,
        "per_class_standard_accuracy": rep.per_class_standard,
        "per_class_robust_accuracy": rep.per_class_robust,
        "ra_tail_30": rep.ra_tail_30,
        "epsilon": rep.epsilon,
        "pgd_steps": rep.pgd_steps,
    })
}

fn run_quadratic(raw: &RawConfig, out: &Path) -> Result<PathBuf> {
    let solver = raw.solver()?;
    let dims = raw.quadratic()?;
    let seed = raw.problem_seed()?;
    let (json_out, timing) = (raw.json_output()?, raw.timing()?);
    output::ensure_writable(out)?;

    let qc = make_quadratic_cbo(seed, dims)?;
    let (state, metrics) = run(&qc.problem, &solver, Vector::zeros(dims.d))?;
    output::emit_metrics(out, &metrics.records, json_out, timing)?;
    let results = json!({
        "problem_seed": seed,
        "final_objective": qc.objective(&state.theta),
        "final_grad_norm": qc.gradient(&state.theta).norm(),
        "theta": state.theta.as_slice(),
        "clamp_activations": metrics.clamp_activations,
    });
    finish(out, Command::RunQuadratic, raw, results)
}

fn run_done(raw: &RawConfig, out: &Path) -> Result<PathBuf> {
    let settings = raw.done()?;
    let seed = raw.problem_seed()?;
    let (json_out, timing) = (raw.json_output()?, raw.timing()?);
    output::ensure_writable(out)?;

    let (train, test) = make_blob_split(
        seed,
        &settings.blobs,
        settings.n_train,
        settings.n_test_per_class,
        settings.imbalance_ratio,
    )?;
    output::write_atomic(&out.join("train.csv"), train.to_csv().as_bytes())?;
    output::write_atomic(&out.join("test.csv"), test.to_csv().as_bytes())?;

    let model = ToyClassifier::new(settings.model, settings.blobs.features, settings.blobs.classes);
    let theta0 = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let problem = build_done_problem(&train, model, settings.epsilon, settings.attack)?;
    let (state, metrics) = run_scheduled(&problem, &settings.solver, theta0)?;
    output::emit_metrics(out, &metrics.records, json_out, timing)?;

    let saved = SavedModel {
        model,
        theta: state.theta.as_slice().to_vec(),
        config: raw.to_json(),
    };
    output::write_json(
        &out.join("model.json"),
        &serde_json::to_value(&saved).expect("model serializes"),
    )?;

    let report = evaluate_robustness(&model, &state.theta, &test, settings.epsilon, settings.eval_pgd_steps);
    let mut results = robustness_json(&report);
    results["problem_seed"] = json!(seed);
    results["clamp_activations"] = json!(metrics.clamp_activations);
    results["train_class_counts"] = json!(train.class_counts());
    finish(out, Command::RunDone, raw, results)
}

fn evaluate(raw: &RawConfig, out: &Path) -> Result<PathBuf> {
    let model_path = raw
        .opt_path("evaluate.model")?
        .ok_or_else(|| CboError::config("evaluate.model", "path to a model.json is required"))?;
    let data_path = raw.opt_path("evaluate.data")?;
    let epsilon = raw.positive("problem.epsilon")?;
    let steps = raw.usize("problem.pgd_steps")?;
    output::ensure_writable(out)?;

    let text = std::fs::read_to_string(&model_path).map_err(|e| CboError::io(&model_path, e))?;
    let saved: SavedModel = serde_json::from_str(&text)
        .map_err(|e| CboError::config("evaluate.model", format!("{}: {e}", model_path.display())))?;
    if saved.theta.len() != saved.model.num_params() {
        return Err(CboError::config(
            "evaluate.model",
            format!("{} parameters for a model with {}", saved.theta.len(), saved.model.num_params()),
        ));
    }
    let data = match &data_path {
        Some(p) => SyntheticDataset::read_csv(p, Some(saved.model.classes))?,
        None => {
            let train_cfg = RawConfig::resolve(Command::RunDone, Some(&saved.config), &[], None)?;
            let s = train_cfg.done()?;
            make_blob_split(
                train_cfg.problem_seed()?,
                &s.blobs,
                s.n_train,
                s.n_test_per_class,
                s.imbalance_ratio,
            )?
            .1
        }
    };
    if data.num_features() != saved.model.inputs {
        return Err(CboError::DimensionMismatch(format!(
            "data has {} features, model expects {}",
            data.num_features(),
            saved.model.inputs
        )));
    }
    let theta = Vector::from_vec(saved.theta.clone());
    let report = evaluate_robustness(&saved.model, &theta, &data, epsilon, steps);
    let mut results = robustness_json(&report);
    results["examples"] = json!(data.len());
    finish(out, Command::Evaluate, raw, results)
}

fn audit_row(family: &str, index: usize, a: &OracleAudit) -> String {
    format!(
        "{family},{index},{},{},{},{},{}\n",
        output::format_float(a.g_jac_theta),
        output::format_float(a.g_jac_delta),
        output::format_float(a.h_grad_delta),
        output::format_float(a.h_hess_delta_vec),
        output::format_float(a.h_cross_jac_vec)
    )
}

/// Maximum number of adversarial-training instances audited.
const AUDITED_EXAMPLES: usize = 10;

fn audit_gradients(raw: &RawConfig, out: &Path) -> Result<PathBuf> {
    let dims = raw.quadratic()?;
    let settings = raw.done()?;
    let seed = raw.problem_seed()?;
    let points = raw.positive_usize("audit.points")?;
    let tolerance = raw.positive("audit.tolerance")?;
    output::ensure_writable(out)?;

    let mut csv = String::from("family,instance,g_jac_theta,g_jac_delta,h_grad_delta,h_hess_delta_vec,h_cross_jac_vec\n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_quadratic: f64 = 0.0;
    let qc = make_quadratic_cbo(seed, dims)?;
    for i in 0..qc.problem.len() {
        let audit = audit_instance(qc.problem.instance(i), points, &mut rng, |r| {
            Vector::from_fn(dims.d, |_, _| r.random_range(-1.0..1.0))
        })?;
        worst_quadratic = worst_quadratic.max(audit.worst());
        csv.push_str(&audit_row("quadratic", i, &audit));
    }

    let (train, _) = make_blob_split(seed, &settings.blobs, settings.n_train, 1, settings.imbalance_ratio)?;
    let model = ToyClassifier::new(settings.model, settings.blobs.features, settings.blobs.classes);
    let problem = build_done_problem(&train, model, settings.epsilon, settings.attack)?;
    let mut worst_done: f64 = 0.0;
    for i in 0..problem.len().min(AUDITED_EXAMPLES) {
        let audit = audit_instance(problem.instance(i), points, &mut rng, |r| model.init_params(r))?;
        worst_done = worst_done.max(audit.worst());
        csv.push_str(&audit_row("done", i, &audit));
    }
    output::write_atomic(&out.join("audit.csv"), csv.as_bytes())?;

    let worst = worst_quadratic.max(worst_done);
    let results = json!({
        "worst_quadratic": worst_quadratic,
        "worst_done": worst_done,
        "tolerance": tolerance,
        "passed": worst <= tolerance,
    });
    let path = finish(out, Command::AuditGradients, raw, results)?;
    if worst > tolerance {
        return Err(CboError::AuditFailed { worst, tolerance });
    }
    Ok(path)
}

fn scaling_study(raw: &RawConfig, out: &Path) -> Result<PathBuf> {
    let mut solver = raw.solver()?;
    let dims = raw.quadratic()?;
    let t_list = raw.usize_list("scaling.t_list")?;
    let k_list = raw.usize_list("scaling.k_list")?;
    let seeds = raw.u64_list("scaling.seeds")?;
    if raw.bool("scaling.cold_start")? {
        solver.warm_start = false;
    }
    for &t in &t_list {
        crate::cid::SolverConfig {
            outer_steps: t,
            ..solver.clone()
        }
        .validate()?;
    }
    output::ensure_writable(out)?;

    let cells = scaling::scaling_study(&solver, dims, &t_list, &k_list, &seeds);
    output::write_atomic(&out.join("scaling.csv"), scaling::scaling_csv(&cells).as_bytes())?;
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    let results = json!({ "cells": cells.len(), "failed_cells": failed });
    finish(out, Command::ScalingStudy, raw, results)
}
