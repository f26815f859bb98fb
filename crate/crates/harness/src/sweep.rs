//! One-axis sweeps over a base run configuration.
//!
//! ```toml
//! base = "hazard.toml"       # relative to this file
//! axis = "slack"             # any dotted config key
//! values = ["2SR", "3SR-G", "4S-F", "4S-G"]
//! output_dir = "sweeps/slack"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::run::{run_training, RunSummary};
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: PathBuf,
    pub axis: String,
    pub values: Vec<toml::Value>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A sweep with every point's config already built and checked.
#[derive(Debug, Clone)]
pub struct PreparedSweep {
    pub axis: String,
    pub points: Vec<(String, RunConfig)>,
    pub output_dir: PathBuf,
}

fn label(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn dir_name(axis: &str, value: &str) -> String {
    let clean = |s: &str| -> String {
        s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
    };
    format!("{}={}", clean(axis), clean(value))
}

pub fn load(path: &Path) -> Result<PreparedSweep> {
    let text = config::read_file(path)?;
    let origin = path.display().to_string();
    let spec: SweepSpec = toml::from_str(&text).map_err(|e| HarnessError::config(&origin, e.to_string()))?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    prepare(&spec, base_dir)
}

pub fn prepare(spec: &SweepSpec, base_dir: &Path) -> Result<PreparedSweep> {
    if spec.values.is_empty() {
        return Err(HarnessError::config("values", "a sweep needs at least one value"));
    }
    let base_path = base_dir.join(&spec.base);
    let base_text = config::read_file(&base_path)?;
    let origin = base_path.display().to_string();
    let base_doc = config::parse_document(&base_text, &origin)?;
    let run_base = base_path.parent().unwrap_or(Path::new("."));

    let mut points = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let mut doc = base_doc.clone();
        config::set_dotted(&mut doc, &spec.axis, value.clone())?;
        let cfg = config::from_document(doc, &format!("{origin} with {}={value}", spec.axis), run_base).map_err(
            |e| match e {
                HarnessError::Config { message, .. } => {
                    HarnessError::config("axis", format!("{:?} is not a usable config field: {message}", spec.axis))
                }
                other => other,
            },
        )?;
        points.push((label(value), cfg));
    }
    let output_dir = match &spec.output_dir {
        Some(p) => p.clone(),
        None => points[0].1.output_dir.join("sweep"),
    };
    Ok(PreparedSweep { axis: spec.axis.clone(), points, output_dir })
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub value: String,
    pub result: std::result::Result<RunSummary, String>,
}

/// Run every point into `<out>/<axis>=<value>/` and write `comparison.csv`.
/// Failed points are recorded and do not stop the sweep.
pub fn run_sweep(sweep: &PreparedSweep, out: &Path) -> Result<Vec<SweepOutcome>> {
    fs::create_dir_all(out).map_err(|source| HarnessError::Io { path: out.into(), source })?;
    let outcomes: Vec<SweepOutcome> = sweep
        .points
        .par_iter()
        .map(|(value, cfg)| {
            let dir = out.join(dir_name(&sweep.axis, value));
            SweepOutcome { value: value.clone(), result: run_training(cfg, &dir, false).map_err(|e| e.to_string()) }
        })
        .collect();
    write_comparison(&out.join("comparison.csv"), &sweep.axis, &outcomes)?;
    Ok(outcomes)
}

fn write_comparison(path: &Path, axis: &str, outcomes: &[SweepOutcome]) -> Result<()> {
    let file = fs::File::create(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "axis",
        "value",
        "status",
        "final_reward_mean",
        "final_reward_std",
        "final_cost_mean",
        "final_cost_std",
        "flip_count_mean",
    ])?;
    for o in outcomes {
        match &o.result {
            Ok(s) => {
                let cost_mean = s.final_cost_mean.first().copied().unwrap_or(f64::NAN);
                let cost_std = s.final_cost_std.first().copied().unwrap_or(f64::NAN);
                w.write_record([
                    axis.to_string(),
                    o.value.clone(),
                    "ok".into(),
                    s.final_reward_mean.to_string(),
                    s.final_reward_std.to_string(),
                    cost_mean.to_string(),
                    cost_std.to_string(),
                    s.flip_count_mean.to_string(),
                ])?;
            }
            Err(msg) => {
                let status = format!("failed: {msg}");
                w.write_record([axis, &o.value, &status, "", "", "", "", ""])?;
            }
        }
    }
    w.flush().map_err(|source| HarnessError::Io { path: path.into(), source })?;
    Ok(())
}
