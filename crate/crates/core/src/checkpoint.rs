//! On-disk checkpoints: a JSON header next to a little-endian `f64`
//! parameter payload.
//!
//! A checkpoint directory holds `checkpoint.json` and `params.bin`. The
//! header records the architecture, seed and segment offsets so a payload
//! can be checked before anything reads it; trained models add the state
//! the scorer needs (prior, reference mean, config echo).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Arch, Layout, ModelState};
use crate::objective::PriorStats;
use crate::trainer::{ScoreStats, TrainAudit, TrainConfig, TrainHistory, TrainedModel};

pub const HEADER_FILE: &str = "checkpoint.json";
pub const PAYLOAD_FILE: &str = "params.bin";
const FORMAT: &str = "impact-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub arch: Arch,
    pub seed: u64,
    pub layout: Layout,
    pub param_count: usize,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained: Option<TrainedState>,
}

/// Everything in a `TrainedModel` apart from the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedState {
    pub ref_feature_mean: Vec<f64>,
    pub prior: PriorStats,
    pub config: TrainConfig,
    pub ref_stats: ScoreStats,
    pub history: TrainHistory,
    pub audit: TrainAudit,
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(invalid(format!("parameter payload of {} bytes is not a whole number of f64s", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn header_for(model: &ModelState, trained: Option<TrainedState>) -> Header {
    Header {
        format: FORMAT.into(),
        version: VERSION,
        arch: model.arch.clone(),
        seed: model.seed,
        layout: model.layout.clone(),
        param_count: model.params.len(),
        payload: PAYLOAD_FILE.into(),
        trained,
    }
}

fn write(dir: &Path, header: &Header, params: &[f64]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PAYLOAD_FILE), encode_params(params))?;
    fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(header)?)?;
    Ok(())
}

fn read(dir: &Path) -> Result<(Header, ModelState)> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| invalid(format!("cannot read checkpoint header {}: {e}", path.display())))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(invalid(format!(
            "{} is not a version {VERSION} checkpoint (format {:?}, version {})",
            path.display(),
            header.format,
            header.version
        )));
    }
    header.arch.validate()?;
    if header.layout != header.arch.layout() {
        return Err(invalid("checkpoint segment offsets disagree with its architecture"));
    }
    if header.payload.contains(['/', '\\']) {
        return Err(invalid("checkpoint payload must sit next to its header"));
    }
    let params = decode_params(&fs::read(dir.join(&header.payload))?)?;
    if params.len() != header.param_count || params.len() != header.layout.total() {
        return Err(Error::Shape(format!(
            "payload holds {} parameters, header declares {} and the layout {}",
            params.len(),
            header.param_count,
            header.layout.total()
        )));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("checkpoint holds non-finite parameters".into()));
    }
    let model = ModelState {
        arch: header.arch.clone(),
        params,
        layout: header.layout.clone(),
        seed: header.seed,
    };
    Ok((header, model))
}

pub fn save_model(dir: &Path, model: &ModelState) -> Result<()> {
    write(dir, &header_for(model, None), &model.params)
}

pub fn load_model(dir: &Path) -> Result<ModelState> {
    read(dir).map(|(_, m)| m)
}

pub fn save_trained(dir: &Path, tm: &TrainedModel) -> Result<()> {
    let state = TrainedState {
        ref_feature_mean: tm.ref_feature_mean.clone(),
        prior: tm.prior.clone(),
        config: tm.config.clone(),
        ref_stats: tm.ref_stats,
        history: tm.history.clone(),
        audit: tm.audit.clone(),
    };
    write(dir, &header_for(&tm.model, Some(state)), &tm.model.params)
}

pub fn load_trained(dir: &Path) -> Result<TrainedModel> {
    let (header, model) = read(dir)?;
    let s = header
        .trained
        .ok_or_else(|| invalid(format!("{} holds an untrained model", dir.display())))?;
    if s.ref_feature_mean.len() != model.arch.feature_dim || s.prior.channels() != model.arch.channels {
        return Err(Error::Shape("trained state does not match the checkpoint architecture".into()));
    }
    Ok(TrainedModel {
        model,
        ref_feature_mean: s.ref_feature_mean,
        prior: s.prior,
        config: s.config,
        audit: s.audit,
        ref_stats: s.ref_stats,
        history: s.history,
    })
}
