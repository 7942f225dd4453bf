//! Config loading: JSON file, then `--set key=value` overrides, then the
//! seed override from the environment.

use std::fs;
use std::path::Path;

use dud_core::RunConfig;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "DUD_SEED_OVERRIDE";

pub fn load(path: Option<&Path>, overrides: &[String], seed_env: Option<&str>) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Io { context: format!("reading {}", p.display()), source: e })?;
            serde_json::from_str(&text).map_err(|e| CliError::ConfigParse { path: p.into(), source: e })?
        }
        None => Value::Object(Map::new()),
    };
    for kv in overrides {
        apply_override(&mut root, kv)?;
    }
    let mut config: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(raw) = seed_env {
        let seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        config.override_seeds(seed);
    }
    config.validate()?;
    Ok(config)
}

/// Sets a dotted path, creating objects on the way. The value is parsed as
/// JSON and falls back to a plain string, so `mode=direct` works unquoted.
pub fn apply_override(root: &mut Value, kv: &str) -> Result<()> {
    let bad = |why: &str| CliError::Override(kv.to_string(), why.to_string());
    let (key, raw) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(bad("empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node.as_object_mut().ok_or_else(|| bad(&format!("`{part}` is not inside an object")))?;
        node = obj.entry(part).or_insert(Value::Null);
    }
    *node = value;
    Ok(())
}
