//! TOML run configuration and `--set key=value` overrides.
//!
//! ```toml
//! name = "hazard"
//! seeds = [0, 1, 2]
//! output_dir = "runs/hazard"
//! slack = "lower-G"          # or a [slack] table with h_plus, h_minus, ...
//!
//! [environment]
//! kind = "gridworld"         # gridworld | pointmass | spec_file
//! width = 4
//! ...
//!
//! [trainer]
//! total_iters = 300
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use pcrpo_core::cmdp::{build_gridworld, build_pointmass_velocity, CmdpSpec, GridworldConfig, PointMassConfig};
use pcrpo_core::trainer::{SlackConfig, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

pub const OUTPUT_ROOT_ENV: &str = "PCRPO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentConfig {
    Gridworld(GridworldConfig),
    Pointmass(PointMassConfig),
    /// A CMDP JSON document; relative paths resolve against the config file.
    SpecFile {
        path: PathBuf,
    },
}

impl EnvironmentConfig {
    pub fn build(&self) -> Result<CmdpSpec> {
        match self {
            EnvironmentConfig::Gridworld(cfg) => Ok(build_gridworld(cfg)?),
            EnvironmentConfig::Pointmass(cfg) => Ok(build_pointmass_velocity(cfg)?),
            EnvironmentConfig::SpecFile { path } => {
                let text = read_file(path)?;
                Ok(CmdpSpec::from_json(&text)?)
            }
        }
    }
}

/// Named slack variants, scaled by the first cost limit `b`.
///
/// | name      | h⁺       | h⁻        | decay |
/// |-----------|----------|-----------|-------|
/// | `2SR`     | +∞       | 0         | no    |
/// | `3SR-G`   | 0.5·\|b\| | 0         | yes   |
/// | `4S-F`    | 0.5·\|b\| | −0.5·\|b\| | no    |
/// | `4S-G`    | 0.5·\|b\| | −0.5·\|b\| | yes   |
/// | `lower-G` | 0        | −0.36·\|b\| | yes   |
/// | `switch`  | 0        | −∞        | no    |
pub const SLACK_VARIANTS: [&str; 6] = ["2SR", "3SR-G", "4S-F", "4S-G", "lower-G", "switch"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlackSetting {
    Variant(String),
    Explicit(SlackConfig),
}

impl Default for SlackSetting {
    fn default() -> Self {
        SlackSetting::Variant("lower-G".into())
    }
}

impl SlackSetting {
    pub fn resolve(&self, limit: f64) -> Result<SlackConfig> {
        let b = limit.abs();
        let slack = match self {
            SlackSetting::Explicit(s) => *s,
            SlackSetting::Variant(name) => match name.as_str() {
                "2SR" => SlackConfig::case_one(),
                "3SR-G" => SlackConfig::case_three(0.5 * b, 0.0, true, true),
                "4S-F" => SlackConfig::case_three(0.5 * b, -0.5 * b, false, false),
                "4S-G" => SlackConfig::case_three(0.5 * b, -0.5 * b, true, true),
                "lower-G" => SlackConfig::case_three(0.0, -0.36 * b, true, true),
                "switch" => SlackConfig::case_two(),
                other => {
                    return Err(HarnessError::config(
                        "slack",
                        format!("unknown slack variant {other:?}; expected one of {SLACK_VARIANTS:?}"),
                    ))
                }
            },
        };
        slack.case().map_err(|e| HarnessError::config("slack", e.to_string()))?;
        Ok(slack)
    }
}

fn default_name() -> String {
    "run".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub slack: SlackSetting,
}

impl RunConfig {
    /// Check everything that can be checked without training.
    pub fn validate(&self) -> Result<CmdpSpec> {
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds", "at least one seed is required"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(HarnessError::config("seeds", format!("seed {dup} appears twice")));
        }
        self.trainer.validate().map_err(|e| HarnessError::config("trainer", e.to_string()))?;
        let spec = self.environment.build()?;
        self.resolved_slack(&spec)?;
        Ok(spec)
    }

    pub fn resolved_slack(&self, spec: &CmdpSpec) -> Result<SlackConfig> {
        let limit = spec
            .limits
            .first()
            .copied()
            .ok_or_else(|| HarnessError::config("environment", "the CMDP has no cost channel"))?;
        self.slack.resolve(limit)
    }

    /// `--out` beats the config; relative paths hang off `$PCRPO_OUTPUT_ROOT`.
    pub fn output_path(&self, cli_out: Option<&Path>) -> PathBuf {
        resolve_output(cli_out.unwrap_or(&self.output_dir))
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::ReadFile { path: path.to_path_buf(), source })
}

/// Parse `raw` as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set a dotted key such as `trainer.eta`, creating intermediate tables.
pub fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Usage(format!("malformed key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for part in parents {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(HarnessError::config(key, format!("{part:?} is not a table"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Split `key=value` and apply it.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Usage(format!("override {assignment:?} is not key=value")))?;
    set_dotted(doc, key.trim(), parse_value(raw.trim()))
}

pub fn parse_document(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| HarnessError::config(origin, e.to_string()))
}

/// Deserialize a document and anchor relative spec paths at `base_dir`.
pub fn from_document(doc: toml::Table, origin: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut config: RunConfig =
        toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| HarnessError::config(origin, e.to_string()))?;
    if let EnvironmentConfig::SpecFile { path } = &mut config.environment {
        if path.is_relative() {
            *path = base_dir.join(&*path);
        }
    }
    Ok(config)
}

/// Read a config file and apply overrides in order.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = read_file(path)?;
    let origin = path.display().to_string();
    let mut doc = parse_document(&text, &origin)?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let base = path.parent().unwrap_or(Path::new("."));
    from_document(doc, &origin, base)
}
