//! Flat dotted-key JSON configuration with command-specific defaults.
//!
//! Values are resolved in order: built-in defaults, config file, `--key value` flags,
//! then the `CBO_SEED` environment variable for `solver.seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::barrier::{InnerMode, UpdateRule};
use crate::cid::{SolverConfig, StepSchedule};
use crate::dro::RSchedule;
use crate::error::{CboError, Result};
use crate::hypergrad::{HypergradConfig, LinearSolver};
use crate::testbed::data::BlobSpec;
use crate::testbed::done::{AttackLoss, ComparisonSettings};
use crate::testbed::quadratic::{OuterKind, QuadraticDims};
use crate::testbed::ModelKind;

pub const SEED_ENV: &str = "CBO_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    RunQuadratic,
    RunDone,
    AuditGradients,
    ScalingStudy,
    Evaluate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::RunQuadratic => "run-quadratic",
            Command::RunDone => "run-done",
            Command::AuditGradients => "audit-gradients",
            Command::ScalingStudy => "scaling-study",
            Command::Evaluate => "evaluate",
        }
    }
}

/// Every accepted key with its default for `run-quadratic`.
fn base_defaults() -> BTreeMap<String, Value> {
    let entries = [
        ("solver.T", json!(100)),
        ("solver.K", json!(10)),
        ("solver.eta", json!(0.5)),
        ("solver.beta", json!(1.0)),
        ("solver.beta_schedule", json!("inv-sqrt")),
        ("solver.batch_size", Value::Null),
        ("solver.theorem_batch", json!(false)),
        ("solver.alpha", Value::Null),
        ("solver.inner_mode", json!("barrier")),
        ("solver.c", json!(1e-3)),
        ("solver.inner_rule", json!("gradient")),
        ("solver.seed", json!(0)),
        ("solver.warm_start", json!(true)),
        ("solver.r", Value::Null),
        ("solver.r_schedule", json!([[0.0, 10.0], [2.0 / 3.0, 1.0], [5.0 / 6.0, 0.1]])),
        ("hypergrad.linear_solver", json!("cg")),
        ("hypergrad.cg_tol", json!(1e-10)),
        ("hypergrad.cg_max_iters", json!(500)),
        ("hypergrad.neglect_inner_hessian", json!(false)),
        ("problem.seed", Value::Null),
        ("problem.d", json!(3)),
        ("problem.p", json!(2)),
        ("problem.m", json!(1)),
        ("problem.instances", json!(5)),
        ("problem.mu", json!(1.0)),
        ("problem.l", json!(4.0)),
        ("problem.curvature", json!(1.0)),
        ("problem.theta_reg", json!(0.5)),
        ("problem.box_half_width", json!(100.0)),
        ("problem.outer", json!("log")),
        ("problem.classes", json!(5)),
        ("problem.features", json!(4)),
        ("problem.n_train", json!(500)),
        ("problem.n_test_per_class", json!(200)),
        ("problem.imbalance_ratio", json!(0.2)),
        ("problem.separation", json!(0.5)),
        ("problem.noise", json!(0.1)),
        ("problem.model", json!("softmax")),
        ("problem.hidden", json!(16)),
        ("problem.epsilon", json!(0.05)),
        ("problem.attack", json!("negative-loss")),
        ("problem.pgd_steps", json!(20)),
        ("scaling.t_list", json!([100, 400, 1600])),
        ("scaling.k_list", json!([10])),
        ("scaling.seeds", json!([0])),
        ("scaling.cold_start", json!(false)),
        ("audit.points", json!(10)),
        ("audit.tolerance", json!(1e-4)),
        ("evaluate.model", Value::Null),
        ("evaluate.data", Value::Null),
        ("output.format", json!("csv")),
        ("output.timing", json!(false)),
    ];
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Defaults for one command.
pub fn defaults(command: Command) -> BTreeMap<String, Value> {
    let mut map = base_defaults();
    if command == Command::RunDone {
        let done = ComparisonSettings::default();
        map.insert("solver.T".into(), json!(done.solver.outer_steps));
        map.insert("solver.alpha".into(), json!(0.05));
        map.insert("solver.beta".into(), json!(0.5));
        map.insert("solver.beta_schedule".into(), json!("cosine"));
        map.insert("hypergrad.linear_solver".into(), json!("exact-diagonal"));
        map.insert("hypergrad.neglect_inner_hessian".into(), json!(true));
    }
    map
}

/// Flattens nested objects into dotted keys.
fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(obj) => {
            for (k, v) in obj {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Maps a flag name to a known key, allowing the part after the last dot alone when
/// it is unambiguous.
pub fn resolve_key(known: &BTreeMap<String, Value>, name: &str) -> Result<String> {
    if known.contains_key(name) {
        return Ok(name.to_string());
    }
    let matches: Vec<&String> = known
        .keys()
        .filter(|k| k.rsplit('.').next() == Some(name))
        .collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(CboError::config(name, "unknown configuration key")),
        many => Err(CboError::config(
            name,
            format!(
                "ambiguous key; use one of {}",
                many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ),
        )),
    }
}

/// Flag values are read as JSON when they parse, otherwise as strings.
fn parse_flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `--key value` and `--key=value` pairs.
pub fn parse_flag_pairs(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| CboError::config(arg.as_str(), "expected a `--key value` flag"))?;
        if let Some((k, v)) = name.split_once('=') {
            pairs.push((k.to_string(), v.to_string()));
        } else {
            let value = iter
                .next()
                .ok_or_else(|| CboError::config(name, "flag is missing its value"))?;
            pairs.push((name.to_string(), value.clone()));
        }
    }
    Ok(pairs)
}

/// Resolved key-value configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, Value>,
}

impl RawConfig {
    pub fn resolve(
        command: Command,
        file: Option<&Value>,
        flags: &[(String, String)],
        seed_env: Option<&str>,
    ) -> Result<Self> {
        let mut values = defaults(command);
        if let Some(file) = file {
            if !file.is_object() {
                return Err(CboError::config("<config>", "config file must hold a JSON object"));
            }
            let mut flat = BTreeMap::new();
            flatten("", file, &mut flat);
            for (k, v) in flat {
                if !values.contains_key(&k) {
                    return Err(CboError::config(k, "unknown configuration key"));
                }
                values.insert(k, v);
            }
        }
        for (name, raw) in flags {
            let key = resolve_key(&values, name)?;
            values.insert(key, parse_flag_value(raw));
        }
        if let Some(seed) = seed_env {
            let parsed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| CboError::config("solver.seed", format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
            values.insert("solver.seed".into(), json!(parsed));
        }
        Ok(Self { values })
    }

    pub fn from_file(command: Command, path: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CboError::io(p, e))?;
                let value: Value = if text.trim().is_empty() {
                    Value::Object(Map::new())
                } else {
                    serde_json::from_str(&text)
                        .map_err(|e| CboError::config("<config>", format!("{}: {e}", p.display())))?
                };
                Some(value)
            }
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(command, file.as_ref(), flags, env.as_deref())
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or(&Value::Null)
    }

    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    /// The resolved configuration as a flat JSON object.
    pub fn to_json(&self) -> Value {
        Value::Object(self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| CboError::config(key, format!("expected a finite number, got {}", self.get(key))))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.get(key).is_null() {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    pub fn positive(&self, key: &str) -> Result<f64> {
        let x = self.f64(key)?;
        if x > 0.0 {
            Ok(x)
        } else {
            Err(CboError::config(key, format!("must be positive, got {x}")))
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .as_u64()
            .ok_or_else(|| CboError::config(key, format!("expected an unsigned integer, got {}", self.get(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.u64(key).map(|x| x as usize)
    }

    pub fn positive_usize(&self, key: &str) -> Result<usize> {
        match self.usize(key)? {
            0 => Err(CboError::config(key, "must be at least 1")),
            n => Ok(n),
        }
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        if self.get(key).is_null() {
            Ok(None)
        } else {
            self.usize(key).map(Some)
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.get(key)
            .as_bool()
            .ok_or_else(|| CboError::config(key, format!("expected true or false, got {}", self.get(key))))
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.get(key)
            .as_str()
            .ok_or_else(|| CboError::config(key, format!("expected a string, got {}", self.get(key))))
    }

    pub fn opt_path(&self, key: &str) -> Result<Option<PathBuf>> {
        if self.get(key).is_null() {
            Ok(None)
        } else {
            self.str(key).map(|s| Some(PathBuf::from(s)))
        }
    }

    pub fn choice<'a>(&'a self, key: &str, allowed: &[&str]) -> Result<&'a str> {
        let s = self.str(key)?;
        if allowed.contains(&s) {
            Ok(s)
        } else {
            Err(CboError::config(key, format!("expected one of {}, got {s:?}", allowed.join(", "))))
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let bad = || CboError::config(key, format!("expected a non-empty list of positive integers, got {}", self.get(key)));
        let list = self.get(key).as_array().ok_or_else(bad)?;
        let out: Vec<usize> = list
            .iter()
            .map(|v| v.as_u64().filter(|n| *n > 0).map(|n| n as usize))
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        if out.is_empty() {
            return Err(bad());
        }
        Ok(out)
    }

    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>> {
        let bad = || CboError::config(key, format!("expected a non-empty list of unsigned integers, got {}", self.get(key)));
        let list = self.get(key).as_array().ok_or_else(bad)?;
        let out: Vec<u64> = list.iter().map(|v| v.as_u64()).collect::<Option<_>>().ok_or_else(bad)?;
        if out.is_empty() {
            return Err(bad());
        }
        Ok(out)
    }

    fn r_schedule(&self) -> Result<RSchedule> {
        if let Some(r) = self.opt_f64("solver.r")? {
            let s = RSchedule::constant(r);
            s.validate().map_err(|e| CboError::config("solver.r", e.to_string()))?;
            return Ok(s);
        }
        let key = "solver.r_schedule";
        let bad = || CboError::config(key, "expected a list of [start_fraction, r] pairs");
        let stages = self
            .get(key)
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|pair| match pair.as_array().map(|p| p.as_slice()) {
                Some([a, b]) => Some((a.as_f64()?, b.as_f64()?)),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        let s = RSchedule { stages };
        s.validate().map_err(|e| CboError::config(key, e.to_string()))?;
        Ok(s)
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        let beta = self.f64("solver.beta")?;
        let beta = match self.choice("solver.beta_schedule", &["inv-sqrt", "constant", "cosine"])? {
            "inv-sqrt" => StepSchedule::InvSqrtHorizon { scale: beta },
            "constant" => StepSchedule::Constant { value: beta },
            _ => StepSchedule::Cosine { base: beta, floor: 0.0 },
        };
        let eta = self.f64("solver.eta")?;
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(CboError::config("solver.eta", format!("η must lie in (0, 1], got {eta}")));
        }
        let inner_mode = match self.choice("solver.inner_mode", &["barrier", "projected"])? {
            "barrier" => InnerMode::Barrier { c: self.positive("solver.c")? },
            _ => InnerMode::Projected,
        };
        let inner_rule = match self.choice("solver.inner_rule", &["gradient", "sign", "adam"])? {
            "gradient" => UpdateRule::Gradient,
            "sign" => UpdateRule::Sign,
            _ => UpdateRule::Adam,
        };
        let linear_solver = match self.choice("hypergrad.linear_solver", &["cg", "exact-diagonal"])? {
            "cg" => LinearSolver::ConjugateGradient,
            _ => LinearSolver::ExactDiagonal,
        };
        let hypergrad = HypergradConfig {
            linear_solver,
            cg_tol: self.positive("hypergrad.cg_tol")?,
            cg_max_iters: self.positive_usize("hypergrad.cg_max_iters")?,
            neglect_inner_hessian: self.bool("hypergrad.neglect_inner_hessian")?,
        };
        let config = SolverConfig {
            outer_steps: self.positive_usize("solver.T")?,
            inner_steps: self.usize("solver.K")?,
            batch_size: self.opt_usize("solver.batch_size")?,
            theorem_batch: self.bool("solver.theorem_batch")?,
            alpha: self.opt_f64("solver.alpha")?,
            beta,
            eta: StepSchedule::constant(eta),
            r_schedule: self.r_schedule()?,
            inner_mode,
            inner_rule,
            seed: self.u64("solver.seed")?,
            warm_start: self.bool("solver.warm_start")?,
            hypergrad,
        };
        config.validate()?;
        Ok(config)
    }

    /// `problem.seed`, falling back to the solver seed.
    pub fn problem_seed(&self) -> Result<u64> {
        if self.get("problem.seed").is_null() {
            self.u64("solver.seed")
        } else {
            self.u64("problem.seed")
        }
    }

    pub fn quadratic(&self) -> Result<QuadraticDims> {
        let mu = self.positive("problem.mu")?;
        let l = self.positive("problem.l")?;
        if l < mu {
            return Err(CboError::config("problem.l", format!("L = {l} must be at least μ = {mu}")));
        }
        let nonneg = |key: &str| -> Result<f64> {
            let x = self.f64(key)?;
            if x >= 0.0 {
                Ok(x)
            } else {
                Err(CboError::config(key, format!("must be nonnegative, got {x}")))
            }
        };
        Ok(QuadraticDims {
            d: self.positive_usize("problem.d")?,
            p: self.positive_usize("problem.p")?,
            m: self.positive_usize("problem.m")?,
            instances: self.positive_usize("problem.instances")?,
            mu,
            l,
            curvature: nonneg("problem.curvature")?,
            theta_reg: nonneg("problem.theta_reg")?,
            box_half_width: self.positive("problem.box_half_width")?,
            outer: match self.choice("problem.outer", &["log", "linear"])? {
                "log" => OuterKind::Log,
                _ => OuterKind::Linear,
            },
        })
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        Ok(match self.choice("problem.model", &["softmax", "mlp"])? {
            "softmax" => ModelKind::SoftmaxRegression,
            _ => ModelKind::ReluMlp {
                hidden: self.positive_usize("problem.hidden")?,
            },
        })
    }

    /// Data, model and attack settings of the adversarial-training problem.
    pub fn done(&self) -> Result<ComparisonSettings> {
        let classes = self.positive_usize("problem.classes")?;
        let n_train = self.positive_usize("problem.n_train")?;
        if n_train < classes {
            return Err(CboError::config(
                "problem.n_train",
                format!("{n_train} examples cannot cover {classes} classes"),
            ));
        }
        let ratio = self.f64("problem.imbalance_ratio")?;
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(CboError::config("problem.imbalance_ratio", format!("must lie in (0, 1], got {ratio}")));
        }
        let epsilon = self.positive("problem.epsilon")?;
        if epsilon >= 0.5 {
            return Err(CboError::config("problem.epsilon", format!("must be below 0.5, got {epsilon}")));
        }
        let noise = self.f64("problem.noise")?;
        let separation = self.f64("problem.separation")?;
        if noise < 0.0 || separation < 0.0 {
            return Err(CboError::config("problem.noise", "noise and separation must be nonnegative"));
        }
        Ok(ComparisonSettings {
            blobs: BlobSpec {
                classes,
                features: self.positive_usize("problem.features")?,
                separation,
                noise,
            },
            n_train,
            n_test_per_class: self.positive_usize("problem.n_test_per_class")?,
            imbalance_ratio: ratio,
            model: self.model_kind()?,
            epsilon,
            attack: match self.choice("problem.attack", &["negative-loss", "margin"])? {
                "negative-loss" => AttackLoss::NegativeLoss,
                _ => AttackLoss::Margin,
            },
            solver: self.solver()?,
            train_pgd_steps: ComparisonSettings::default().train_pgd_steps,
            eval_pgd_steps: self.usize("problem.pgd_steps")?,
        })
    }

    pub fn json_output(&self) -> Result<bool> {
        Ok(self.choice("output.format", &["csv", "json"])? == "json")
    }

    pub fn timing(&self) -> Result<bool> {
        self.bool("output.timing")
    }
}
