//! Run configuration as flat dotted JSON keys, layered defaults, file, flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decode::DecodeConfig;
use crate::model::ModelConfig;
use crate::seed;
use crate::train::TrainConfig;

/// Derived from the top-level seed, never set directly.
const DERIVED_KEYS: [&str; 1] = ["train.seed"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("config file must hold a JSON object of dotted keys")]
    NotAnObject,
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_comments: usize,
    /// Instances per output shard.
    pub shard_size: usize,
    /// Posts per parallel batch.
    pub chunk_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_comments: 10,
            shard_size: 10_000,
            chunk_size: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    /// Seed for the named random stream.
    pub fn sub_seed(&self, name: &str) -> u64 {
        seed::derive(self.seed, name, &[])
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Where each dotted key's value came from.
    pub provenance: BTreeMap<String, Source>,
}

pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn default_flat() -> BTreeMap<String, Value> {
    let mut flat = flatten(&serde_json::to_value(RunConfig::default()).expect("defaults serialise"));
    for k in DERIVED_KEYS {
        flat.remove(k);
    }
    flat
}

/// All settable keys with their default values.
pub fn default_keys() -> BTreeMap<String, Value> {
    default_flat()
}

/// Parses a config file body: a JSON object whose keys are dotted paths.
/// Nested objects are accepted and flattened.
pub fn parse_config_str(text: &str) -> Result<BTreeMap<String, Value>, ConfigError> {
    if text.trim().is_empty() {
        return Ok(BTreeMap::new());
    }
    let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::File {
        path: "<input>".into(),
        message: e.to_string(),
    })?;
    if !v.is_object() {
        return Err(ConfigError::NotAnObject);
    }
    Ok(flatten(&v))
}

/// `key=value`; the value is read as JSON when it parses, otherwise as a string.
pub fn parse_override(arg: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = arg.split_once('=').ok_or_else(|| ConfigError::BadOverride(arg.to_string()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::BadOverride(arg.to_string()));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Merges defaults, then `file`, then `flags`, and validates the result.
pub fn resolve(
    file: &BTreeMap<String, Value>,
    flags: &[(String, Value)],
) -> Result<LoadedConfig, ConfigError> {
    let mut flat = default_flat();
    let mut provenance: BTreeMap<String, Source> = flat.keys().map(|k| (k.clone(), Source::Default)).collect();
    let layers = file
        .iter()
        .map(|(k, v)| (k, v, Source::File))
        .chain(flags.iter().map(|(k, v)| (k, v, Source::Flag)));
    for (k, v, src) in layers {
        let slot = flat.get_mut(k).ok_or_else(|| ConfigError::UnknownKey(k.clone()))?;
        *slot = v.clone();
        provenance.insert(k.clone(), src);
    }
    let mut nested = unflatten(&flat);
    let config_seed = nested
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| ConfigError::BadValue {
            key: "seed".into(),
            message: "expected a non-negative integer".into(),
        })?;
    nested["train"]["seed"] = Value::from(seed::derive(config_seed, "train", &[]));
    let config: RunConfig = serde_json::from_value(nested).map_err(|e| ConfigError::BadValue {
        key: "?".into(),
        message: e.to_string(),
    })?;
    config.model.validate().map_err(|e| ConfigError::BadValue {
        key: "model".into(),
        message: e.to_string(),
    })?;
    config.train.validate().map_err(|e| ConfigError::BadValue {
        key: "train".into(),
        message: e.to_string(),
    })?;
    Ok(LoadedConfig { config, provenance })
}

/// Reads `path` (if any) and applies `overrides` of the form `key=value`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let file = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::File {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            parse_config_str(&text).map_err(|e| match e {
                ConfigError::File { message, .. } => ConfigError::File {
                    path: p.display().to_string(),
                    message,
                },
                other => other,
            })?
        }
        None => BTreeMap::new(),
    };
    let flags = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    resolve(&file, &flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = resolve(&parse_config_str("").unwrap(), &[]).unwrap();
        let mut expected = RunConfig::default();
        expected.train.seed = seed::derive(0, "train", &[]);
        assert_eq!(c.config, expected);
        assert!(c.provenance.values().all(|&s| s == Source::Default));
        assert!(!c.provenance.contains_key("train.seed"));
    }

    #[test]
    fn flag_beats_file() {
        let file = parse_config_str(r#"{"model.num_layers": 2, "model.hidden": 32, "model.num_heads": 4}"#).unwrap();
        let flags = vec![parse_override("model.num_layers=3").unwrap()];
        let c = resolve(&file, &flags).unwrap();
        assert_eq!(c.config.model.num_layers, 3);
        assert_eq!(c.config.model.hidden, 32);
        assert_eq!(c.provenance["model.num_layers"], Source::Flag);
        assert_eq!(c.provenance["model.hidden"], Source::File);
        assert_eq!(c.provenance["model.clip_k"], Source::Default);
    }

    #[test]
    fn nested_objects_are_accepted() {
        let file = parse_config_str(r#"{"model": {"clip_k": 4}, "train.clip_norm": null}"#).unwrap();
        let c = resolve(&file, &[]).unwrap();
        assert_eq!(c.config.model.clip_k, 4);
        assert_eq!(c.config.train.clip_norm, None);
    }

    #[test]
    fn unknown_and_derived_keys_are_rejected() {
        let err = resolve(&parse_config_str(r#"{"model.depth": 3}"#).unwrap(), &[]).unwrap_err();
        assert!(err.to_string().contains("model.depth"));
        let err = resolve(&BTreeMap::new(), &[parse_override("train.seed=4").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("train.seed"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_config_str("[1]").is_err());
    }

    #[test]
    fn enum_and_string_values() {
        let flags = vec![
            parse_override("model.decoder_memory=utterance_level").unwrap(),
            parse_override("train.objective.thread_pred_source=\"utterance_enc\"").unwrap(),
        ];
        let c = resolve(&BTreeMap::new(), &flags).unwrap();
        assert_eq!(c.config.model.decoder_memory, crate::model::MemoryMode::UtteranceLevel);
        let bad = vec![parse_override("model.hidden=-1").unwrap()];
        assert!(resolve(&BTreeMap::new(), &bad).is_err());
    }

    #[test]
    fn seed_fans_out() {
        let a = resolve(&BTreeMap::new(), &[parse_override("seed=1").unwrap()]).unwrap().config;
        let b = resolve(&BTreeMap::new(), &[parse_override("seed=2").unwrap()]).unwrap().config;
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.sub_seed("init"), a.sub_seed("train"));
        assert_ne!(a.hash(), b.hash());
    }
}
