//! Structured configuration files and `dotted.key=value` overrides.
//!
//! Configs are JSON objects. Overrides are applied to the raw value before
//! it is deserialized, so unknown keys are rejected by the target type.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{Error, Result};

/// Sets `key` (dot separated) to `raw`, parsed as JSON when possible and as a
/// string otherwise. Intermediate objects are created as needed.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("'{}' is not an object", parts[..i].join("."))));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces the base.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `key=value` pairs and applies them in order.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' lacks '='")))?;
        apply_override(root, k.trim(), v.trim())?;
    }
    Ok(())
}

/// Deserializes `value`, reporting unknown or mistyped keys as config errors.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::io::read_to_string(crate::error::open_file(path)?)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_keeps_untouched_siblings() {
        let mut base = json!({"a": {"x": 1, "y": [1, 2]}, "b": 2});
        merge(&mut base, json!({"a": {"y": [3]}, "c": null}));
        assert_eq!(base, json!({"a": {"x": 1, "y": [3]}, "b": 2, "c": null}));
    }

    #[test]
    fn nested_override_creates_objects() {
        let mut v = json!({"model": {"layers": 2}});
        apply_overrides(&mut v, &["model.layers=3".into(), "train.plan.epochs=5".into(), "name=abc".into()]).unwrap();
        assert_eq!(v, json!({"model": {"layers": 3}, "train": {"plan": {"epochs": 5}}, "name": "abc"}));
    }

    #[test]
    fn list_values_parse_as_json() {
        let mut v = json!({});
        apply_override(&mut v, "widths", "[8, 16]").unwrap();
        assert_eq!(v["widths"], json!([8, 16]));
    }

    #[test]
    fn rejects_malformed() {
        let mut v = json!({"a": 1});
        assert!(apply_overrides(&mut v, &["a".into()]).is_err());
        assert!(apply_override(&mut v, "a.b", "1").is_err());
        assert!(apply_override(&mut v, "x..y", "1").is_err());
    }
}
