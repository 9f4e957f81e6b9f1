//! Layered configuration: a TOML file deep-merged over built-in defaults.

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use std::path::Path;

/// Tag key of internally tagged enums. Switching variants replaces the whole
/// table instead of merging into the old variant's fields.
const TAG: &str = "kind";

/// Overlays the TOML document `text` on `base`. Every key absent from the
/// defaults is reported in one error.
pub fn merge_toml<T: Serialize + DeserializeOwned>(
    base: &T,
    text: &str,
    origin: &str,
) -> Result<T> {
    let table: toml::Table = toml::from_str(text).with_context(|| format!("parsing {origin}"))?;
    let over = serde_json::to_value(table)?;
    let mut merged = serde_json::to_value(base)?;
    let mut unknown = Vec::new();
    merge(&mut merged, over, "", &mut unknown);
    if !unknown.is_empty() {
        bail!("unknown config keys in {origin}: {}", unknown.join(", "));
    }
    serde_json::from_value(merged).with_context(|| format!("invalid values in {origin}"))
}

pub fn merge_file<T: Serialize + DeserializeOwned>(base: &T, path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(serde_json::from_value(serde_json::to_value(base)?)?),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            merge_toml(base, &text, &p.display().to_string())
        }
    }
}

fn merge(base: &mut Value, over: Value, path: &str, unknown: &mut Vec<String>) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !switches_variant(b, &o) => {
            for (k, v) in o {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p, unknown),
                    None => unknown.push(p),
                }
            }
        }
        (slot, o) => *slot = o,
    }
}

fn switches_variant(
    base: &serde_json::Map<String, Value>,
    over: &serde_json::Map<String, Value>,
) -> bool {
    match (base.get(TAG), over.get(TAG)) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    }
}

/// Renders `value` as TOML text.
pub fn render<T: Serialize>(value: &T) -> Result<String> {
    Ok(toml::to_string(value)?)
}
