//! Run configuration: a flat JSON object whose keys are the pipeline
//! fields, plus a nested `scene` object and a few run-level keys.
//! Command-line `key=value` overrides are applied to the same object before
//! it is parsed, so they share validation with file values.

use std::path::Path;

use hcpm_core::pipeline::PipelineConfig;
use hcpm_core::synthetic::SceneConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{at, IoError, Result};

/// Held-out evaluation seeds start this far from the training seed.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub scene: SceneConfig,
    /// Pairs per evaluation.
    pub eval_pairs: usize,
    /// Training steps between metric lines.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            scene: SceneConfig::default(),
            eval_pairs: 100,
            log_every: 50,
        }
    }
}

const RUN_KEYS: [&str; 2] = ["eval_pairs", "log_every"];

impl RunConfig {
    /// Parses the flat object. Unknown keys are errors.
    pub fn from_value(v: Value) -> Result<Self> {
        let Value::Object(mut map) = v else {
            return Err(IoError::Config("top level must be a JSON object".into()));
        };
        let mut out = Self::default();
        if let Some(scene) = map.remove("scene") {
            out.scene = serde_json::from_value(scene).map_err(|e| IoError::Config(format!("scene: {e}")))?;
        }
        for key in RUN_KEYS {
            if let Some(v) = map.remove(key) {
                let n = v.as_u64().ok_or_else(|| IoError::Config(format!("{key} must be a non-negative integer")))? as usize;
                match key {
                    "eval_pairs" => out.eval_pairs = n,
                    _ => out.log_every = n.max(1),
                }
            }
        }
        out.pipeline = serde_json::from_value(Value::Object(map)).map_err(|e| IoError::Config(e.to_string()))?;
        out.pipeline.validate()?;
        out.scene.validate()?;
        Ok(out)
    }

    /// The flat object this config parses from.
    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(self.pipeline).expect("plain data") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        map.insert("scene".into(), serde_json::to_value(self.scene).expect("plain data"));
        map.insert("eval_pairs".into(), self.eval_pairs.into());
        map.insert("log_every".into(), self.log_every.into());
        Value::Object(map)
    }

    /// Seed of the first held-out evaluation pair.
    pub fn eval_scene(&self) -> SceneConfig {
        SceneConfig {
            seed: self.scene.seed.wrapping_add(EVAL_SEED_OFFSET),
            ..self.scene
        }
    }
}

/// Reads a config file (or starts from defaults), applies `overrides` and
/// the common `--seed`, then validates.
pub fn load(path: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<RunConfig> {
    let mut map = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(at(p))?;
            match serde_json::from_str::<Value>(&text)? {
                Value::Object(m) => m,
                _ => return Err(IoError::Config(format!("{}: top level must be an object", p.display()))),
            }
        }
        None => Map::new(),
    };
    for (k, v) in overrides {
        set(&mut map, k, v)?;
    }
    if let Some(s) = seed {
        // one seed drives initialization, DICS sampling and the data stream
        set(&mut map, "seed", &s.to_string())?;
        set(&mut map, "scene.seed", &s.to_string())?;
    }
    RunConfig::from_value(Value::Object(map))
}

/// Sets `key` (dotted for `scene.*`) to `raw`, read as JSON when it
/// parses and as a string otherwise.
pub fn set(map: &mut Map<String, Value>, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    match key.split_once('.') {
        Some(("scene", sub)) => {
            let scene = map.entry("scene").or_insert_with(|| Value::Object(Map::new()));
            let Value::Object(s) = scene else {
                return Err(IoError::Config("scene must be an object".into()));
            };
            s.insert(sub.to_string(), value);
        }
        Some(_) => return Err(IoError::Config(format!("unknown nested key {key:?}"))),
        None => {
            map.insert(key.to_string(), value);
        }
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}
