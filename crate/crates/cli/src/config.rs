//! Layered settings: built-in defaults, then the config file, then flags.
//!
//! The config file is TOML. Top-level keys apply to every command that
//! knows them; a `[<command>]` table applies to that command only and may
//! not contain unknown keys.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub type ConfigFile = toml::Table;

pub fn read_config_file(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Validation(format!("config file {}: {e}", path.display())))
}

fn to_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("settings serialize") {
        Value::Object(m) => m,
        _ => unreachable!("settings are structs"),
    }
}

/// Merges the layers and deserializes the result. `defaults` lists every
/// key the command accepts; a `null` default is required unless listed in
/// `optional`. Null flags are treated as unset.
pub fn resolve<T: DeserializeOwned, F: Serialize>(
    command: &str,
    defaults: Value,
    optional: &[&str],
    file: Option<&ConfigFile>,
    flags: &F,
) -> Result<T, CliError> {
    let Value::Object(mut merged) = defaults else {
        unreachable!("defaults are an object")
    };
    if let Some(file) = file {
        for (k, v) in file {
            if v.is_table() {
                continue;
            }
            if merged.contains_key(k) {
                merged.insert(k.clone(), serde_json::to_value(v).expect("toml to json"));
            } else {
                log::debug!("config key `{k}` not used by {command}");
            }
        }
        if let Some(section) = file.get(command) {
            let section = section
                .as_table()
                .ok_or_else(|| CliError::Validation(format!("config: `{command}` must be a table")))?;
            for (k, v) in section {
                if !merged.contains_key(k) {
                    return Err(CliError::Validation(format!("config: unknown key `{command}.{k}`")));
                }
                merged.insert(k.clone(), serde_json::to_value(v).expect("toml to json"));
            }
        }
    }
    for (k, v) in to_object(flags) {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    if let Some((k, _)) = merged.iter().find(|(k, v)| v.is_null() && !optional.contains(&k.as_str())) {
        return Err(CliError::Usage(format!("missing required setting `--{}`", k.replace('_', "-"))));
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Validation(format!("{command}: {e}")))
}
