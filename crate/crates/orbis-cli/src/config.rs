//! TOML config file: hardware model overrides, simulation parameters, and
//! matcher defaults. Every section and field is optional; CLI flags win over
//! the file.

use orbis::hwsim::{HardwareConfig, SimParams};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub hardware: Option<HardwareConfig>,
    pub sim: Option<SimParams>,
    pub datm: DatmSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatmSection {
    pub k_dst: Option<usize>,
    pub epsilon: Option<f64>,
    pub max_iterations: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text, overrides).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn from_overrides(overrides: &[String]) -> Result<Self, String> {
        Self::parse("", overrides).map_err(|e| format!("invalid --set override: {e}"))
    }

    /// Parses the TOML text and applies dotted-path `--set key=value`
    /// overrides on top, e.g. `--set hardware.vpu_lanes=256`.
    fn parse(text: &str, overrides: &[String]) -> Result<Self, String> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| e.to_string())?;
        for spec in overrides {
            let (path, raw) = spec
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got '{spec}'"))?;
            set_path(&mut value, path.trim(), raw.trim())?;
        }
        value.try_into().map_err(|e| e.to_string())
    }

    pub fn hardware(&self) -> HardwareConfig {
        self.hardware.clone().unwrap_or_default()
    }

    /// Simulation parameters: config-file section if present, otherwise the
    /// per-workload defaults.
    pub fn sim_params(&self, workload_name: &str) -> SimParams {
        self.sim
            .clone()
            .unwrap_or_else(|| SimParams::default_for(workload_name))
    }
}

fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), String> {
    let mut node = root;
    let mut parts = path.split('.').peekable();
    if path.is_empty() {
        return Err("empty override key".into());
    }
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(format!("bad override path '{path}'"));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("'{path}' does not address a table"))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), parse_literal(raw));
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!()
}

/// Interpret the override value as a TOML literal when possible, falling
/// back to a string.
fn parse_literal(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.to_string())
}
