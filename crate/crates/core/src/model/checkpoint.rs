//! Checkpoint files: one JSON document holding the version tag, the model
//! configuration and every named parameter array.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::motion::write_file;

pub const CHECKPOINT_VERSION: &str = "mdt-1";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    params: Vec<ParamRecord>,
}

pub fn bundle_to_json(bundle: &ModelBundle, config_hash: Option<&str>) -> Result<String> {
    let params = bundle
        .params()
        .iter()
        .map(|(name, m)| ParamRecord {
            name: name.to_owned(),
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_owned(),
        config: bundle.config().clone(),
        config_hash: config_hash.map(str::to_owned),
        params,
    };
    serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Parses a checkpoint; returns the bundle and the embedded config hash.
pub fn bundle_from_json(text: &str) -> Result<(ModelBundle, Option<String>)> {
    let probe: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    match probe.get("version").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_VERSION) => {}
        Some(other) => {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {other:?}, expected {CHECKPOINT_VERSION:?}"
            )))
        }
        None => return Err(Error::Checkpoint("missing version tag".into())),
    }
    let file: CheckpointFile = serde_json::from_value(probe).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let named = file
        .params
        .into_iter()
        .map(|p| {
            let m = Array2::from_shape_vec((p.shape[0], p.shape[1]), p.data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.name)))?;
            Ok((p.name, m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ModelBundle::from_parts(file.config, named)?, file.config_hash))
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
    write_file(path.as_ref(), bundle_to_json(bundle, config_hash)?.as_bytes())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(bundle_from_json(&text)?.0)
}

/// Loads a checkpoint and checks it was built for feature width `d`.
pub fn load_bundle_for(path: impl AsRef<Path>, d: usize) -> Result<ModelBundle> {
    let bundle = load_bundle(path)?;
    bundle.expect_feature_dim(d)?;
    Ok(bundle)
}
