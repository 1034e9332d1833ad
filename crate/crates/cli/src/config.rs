//! Run configuration: one JSON document plus dotted-path overrides.
//!
//! Engine fields sit at the top level next to `source`, `eval` and
//! `out_dir`:
//!
//! ```json
//! { "seed": 7, "update": "feature_enhanced", "loss": { "tau": 0.2 },
//!   "source": { "synth": { "train_frames": 300 } },
//!   "eval": { "fpr_limit": 0.3 } }
//! ```

use std::path::{Path, PathBuf};

use lemo_core::experiments::SyntheticProtocol;
use lemo_core::rng::{derive_seed, tag};
use lemo_core::{EngineConfig, EvalOptions};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Keys that belong to the run rather than to the engine.
const RUN_KEYS: [&str; 3] = ["source", "eval", "out_dir"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Generated stream and test set. The generator seed is split off the
    /// top-level seed.
    Synth(SyntheticProtocol),
    /// Path to a dataset manifest, relative to the config file.
    Manifest(PathBuf),
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self::Synth(SyntheticProtocol::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub source: SourceConfig,
    pub eval: EvalOptions,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_value(Value::Object(Map::new()), Path::new("")).expect("defaults are valid")
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Reads `path`, applies `key=value` overrides in order and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigFile {
            path: path.to_path_buf(),
            source,
        })?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value, path.parent().unwrap_or(Path::new("")))
    }

    /// Builds a config from its JSON form; relative manifest paths resolve
    /// against `base_dir`.
    pub fn from_value(value: Value, base_dir: &Path) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(config_err("config must be a JSON object"));
        };
        let source_v = map.remove("source");
        let eval_v = map.remove("eval");
        let out_v = map.remove("out_dir");
        if let Some(Value::Object(s)) = &source_v {
            if let Some(Value::Object(synth)) = s.get("synth") {
                if synth.get("synth").and_then(|v| v.get("seed")).is_some() {
                    return Err(config_err(
                        "source.synth.synth.seed is derived from the top-level seed; set `seed` instead",
                    ));
                }
            }
        }
        let engine: EngineConfig = serde_json::from_value(Value::Object(map)).map_err(config_err)?;
        let mut source: SourceConfig = match source_v {
            Some(v) => serde_json::from_value(v).map_err(config_err)?,
            None => SourceConfig::default(),
        };
        let eval: EvalOptions = match eval_v {
            Some(v) => serde_json::from_value(v).map_err(config_err)?,
            None => EvalOptions::default(),
        };
        let out_dir: Option<PathBuf> = match out_v {
            Some(v) => serde_json::from_value(v).map_err(config_err)?,
            None => None,
        };
        match &mut source {
            SourceConfig::Synth(p) => {
                p.synth.seed = derive_seed(engine.seed, &[tag("synth")]);
                p.validate()?;
            }
            SourceConfig::Manifest(m) => {
                if m.is_relative() {
                    *m = base_dir.join(&*m);
                }
            }
        }
        engine.validate()?;
        if !(eval.fpr_limit > 0.0 && eval.fpr_limit <= 1.0) {
            return Err(config_err(format!("eval.fpr_limit must lie in (0, 1], got {}", eval.fpr_limit)));
        }
        Ok(Self {
            engine,
            source,
            eval,
            out_dir,
        })
    }

    /// The flat JSON form, as echoed into reports.
    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(self.engine).expect("engine config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("structs serialize to objects"),
        };
        let mut source = serde_json::to_value(&self.source).expect("source serializes");
        // The derived generator seed is not a user setting.
        if let Some(Value::Object(synth)) = source.get_mut("synth").and_then(|s| s.get_mut("synth")) {
            synth.remove("seed");
        }
        map.insert("source".into(), source);
        map.insert("eval".into(), serde_json::to_value(self.eval).expect("eval serializes"));
        if let Some(d) = &self.out_dir {
            map.insert("out_dir".into(), Value::String(d.display().to_string()));
        }
        Value::Object(map)
    }
}

/// Applies one `dotted.path=value` override. The value is read as JSON when
/// it parses, otherwise as a bare string. Missing objects along the path are
/// created.
pub fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{item}` is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override `{item}` has an empty key")));
    }
    if RUN_KEYS.contains(&keys[0]) && keys.len() == 1 && keys[0] != "out_dir" {
        return Err(config_err(format!("override `{item}` would replace a whole section")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let Value::Object(map) = node else {
            return Err(config_err(format!("override `{item}`: `{key}` is not inside an object")));
        };
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let Value::Object(map) = node else {
        return Err(config_err(format!("override `{item}`: parent is not an object")));
    };
    map.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
