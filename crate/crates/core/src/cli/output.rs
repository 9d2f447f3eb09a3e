//! Atomic result files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::cid::StepRecord;
use crate::error::{CboError, Result};

/// Creates `dir` if needed and checks that a file can be created in it.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CboError::io(dir, e))?;
    let probe = dir.join(format!(".cbo-write-probe-{}", std::process::id()));
    fs::File::create(&probe).map_err(|e| CboError::io(dir, e))?;
    fs::remove_file(&probe).map_err(|e| CboError::io(&probe, e))?;
    Ok(())
}

/// Writes through a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CboError::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp: PathBuf = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CboError::io(path, e));
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub const METRICS_HEADER: &str = "step,objective,grad_norm,tracking_error,inner_grad_norm,wall_ms";

/// One row per outer step; `wall_ms` is left empty unless `timing` is set so that
/// reruns are byte-identical.
pub fn metrics_csv(records: &[StepRecord], timing: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let wall = if timing { format_float(r.wall_ms) } else { String::new() };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            format_float(r.objective),
            format_float(r.grad_norm),
            format_float(r.tracking_error),
            format_float(r.inner_grad_norm),
            wall
        ));
    }
    out
}

pub fn metrics_json(records: &[StepRecord], timing: bool) -> Value {
    Value::Array(
        records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "step": r.step,
                    "objective": r.objective,
                    "grad_norm": r.grad_norm,
                    "tracking_error": r.tracking_error,
                    "inner_grad_norm": r.inner_grad_norm,
                    "wall_ms": if timing { Value::from(r.wall_ms) } else { Value::Null },
                })
            })
            .collect(),
    )
}

/// Writes `metrics.csv` or `metrics.json` into `dir`, returning the path.
pub fn emit_metrics(dir: &Path, records: &[StepRecord], json: bool, timing: bool) -> Result<PathBuf> {
    if json {
        let path = dir.join("metrics.json");
        write_json(&path, &metrics_json(records, timing))?;
        Ok(path)
    } else {
        let path = dir.join("metrics.csv");
        write_atomic(&path, metrics_csv(records, timing).as_bytes())?;
        Ok(path)
    }
}
