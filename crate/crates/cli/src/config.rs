//! JSON configs with dotted `--set key=value` overrides.
//!
//! The defaults of the target type are serialized first; the config file is
//! merged over them and the overrides applied last. Any key that does not
//! exist in the defaults is rejected, so a typo never silently falls back to
//! a default.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub struct Loaded<T> {
    pub value: T,
    /// The file or an override set `seed` explicitly.
    pub explicit_seed: bool,
}

pub fn load<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, sets: &[String]) -> Result<Loaded<T>, CliError> {
    let mut merged = serde_json::to_value(T::default()).expect("defaults serialize");
    let mut explicit_seed = false;
    if let Some(path) = file {
        let bytes = std::fs::read(path).map_err(|e| CliError::data("io", format!("{}: {e}", path.display())))?;
        let user: Value = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::data("json", format!("{}: {e}", path.display())))?;
        explicit_seed |= user.get("seed").is_some();
        merge(&mut merged, user, "")?;
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
        explicit_seed |= key == "seed";
        set(&mut merged, key, parse_value(raw))?;
    }
    let value = serde_json::from_value(merged).map_err(|e| CliError::data("config", e.to_string()))?;
    Ok(Loaded { value, explicit_seed })
}

/// JSON if it parses, otherwise the raw text as a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, user: Value, prefix: &str) -> Result<(), CliError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let path = join(prefix, &k);
                let slot = b.get_mut(&k).ok_or_else(|| unknown(&path))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, u) => {
            *b = u;
            Ok(())
        }
    }
}

fn set(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let mut path = String::new();
    for part in key.split('.') {
        path = join(&path, part);
        let obj: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| unknown(&path))?;
        node = obj.get_mut(part).ok_or_else(|| unknown(&path))?;
    }
    *node = value;
    Ok(())
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn unknown(path: &str) -> CliError {
    CliError::usage(format!("unknown config key '{path}'"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tall_core::trainer::TrainConfig;

    fn sets(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let l: Loaded<TrainConfig> = load(None, &sets(&["arch.dims=[8,16]", "lr=0.01", "order=reverse", "mask_size=4"])).unwrap();
        assert_eq!(l.value.arch.dims, vec![8, 16]);
        assert_eq!(l.value.lr, 0.01);
        assert_eq!(l.value.order, tall_core::tall::OrderSpec::Reverse);
        assert_eq!(l.value.mask_size, Some(4));
        assert!(!l.explicit_seed);
        assert!(load::<TrainConfig>(None, &sets(&["seed=3"])).unwrap().explicit_seed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["lr_max=1", "arch.width=3", "lr.x=1"] {
            let err = load::<TrainConfig>(None, &sets(&[bad])).err().unwrap();
            assert_eq!(err.code, 1, "{bad}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"arch": {"depth": [1]}}"#).unwrap();
        let err = load::<TrainConfig>(Some(&p), &[]).err().unwrap();
        assert!(err.message.contains("arch.depth"), "{}", err.message);
    }

    #[test]
    fn bad_values_are_data_errors() {
        let err = load::<TrainConfig>(None, &sets(&["lr=fast"])).err().unwrap();
        assert_eq!(err.code, 2);
    }
}
