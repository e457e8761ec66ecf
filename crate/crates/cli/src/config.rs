//! Run configuration: one JSON document whose flat `defaults` section mixes
//! data-generation, split and training keys. Each key is routed to the
//! struct that owns it; `seed` feeds all three.

use std::path::Path;

use anyhow::{bail, Context, Result};
use impact::data::{SplitConfig, SynthSpec};
use impact::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub split: SplitConfig,
    pub train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default)]
    defaults: Map<String, Value>,
}

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Apply `patch` over the serialized form of `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Map<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Value::Object(m) = &mut v {
        m.extend(patch);
    }
    Ok(serde_json::from_value(v)?)
}

impl RunConfig {
    pub fn from_defaults(defaults: Map<String, Value>) -> Result<Self> {
        let base = RunConfig::default();
        let synth_keys = keys_of(&base.synth);
        let split_keys = keys_of(&base.split);
        let mut synth = Map::new();
        let mut split = Map::new();
        let mut train = Map::new();
        for (k, v) in defaults {
            if k == "seed" {
                synth.insert(k.clone(), v.clone());
                split.insert(k.clone(), v.clone());
                train.insert(k, v);
            } else if synth_keys.contains(&k) {
                synth.insert(k, v);
            } else if split_keys.contains(&k) {
                split.insert(k, v);
            } else {
                train.insert(k, v);
            }
        }
        let cfg = RunConfig {
            synth: overlay(&base.synth, synth).context("in data-generation keys")?,
            split: overlay(&base.split, split).context("in split keys")?,
            train: overlay(&base.train, train).context("in training keys")?,
        };
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).context("config is not a valid config document")?;
        Self::from_defaults(doc.defaults)
    }

    /// Built-in defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("bad config file {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.train.channels == 0 {
            bail!("channels must be positive");
        }
        Ok(())
    }
}
