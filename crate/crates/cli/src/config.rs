//! Run configuration: a TOML file layered over the built-in defaults, then
//! `--set section.key=value` overrides.

use std::path::Path;

use serde_json::{Map, Value};
use talos::pipeline::ExperimentConfig;

use crate::error::CliError;

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t
            .remove("v")
            .and_then(|v| serde_json::to_value(v).ok())
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{path}`")));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{path}`: `{k}` is not a section")))?;
        let next = obj
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if next.is_null() {
            *next = Value::Object(Map::new());
        }
        cur = next;
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("`{path}` does not name a field")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// The calibration section is optional in the schema; fill it in when an
/// override targets it so partial sections still deserialize.
fn seed_optional_sections(root: &mut Value, defaults: &ExperimentConfig) -> Result<(), CliError> {
    if let Some(obj) = root.as_object_mut() {
        if let Some(c) = obj.get_mut("calibration") {
            if c.is_object() {
                let mut full = serde_json::to_value(defaults.calibration_config())?;
                merge(&mut full, c.take());
                *c = full;
            }
        }
    }
    Ok(())
}

pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig, CliError> {
    let defaults = ExperimentConfig::default();
    let mut root = serde_json::to_value(&defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut root, serde_json::to_value(table)?);
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
        set_path(&mut root, k.trim(), parse_value(v.trim()))?;
    }
    seed_optional_sections(&mut root, &defaults)?;
    let seed = root.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let cfg: ExperimentConfig =
        serde_json::from_value(root).map_err(|e| CliError::Config(format!("config: {e}")))?;
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}
