//! Checkpoints: `manifest.json` plus two little-endian f64 blobs holding the
//! raw and EMA parameters in layer order.

use super::{DenoiserConfig, Mlp, TrainConfig, TrainedModel};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_SCHEMA: u32 = 1;
const RAW_FILE: &str = "params.bin";
const EMA_FILE: &str = "ema.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub architecture: DenoiserConfig,
    pub train: Option<TrainConfig>,
    pub steps: u64,
    pub param_count: usize,
    /// Parameter blocks in storage order.
    pub layout: Vec<LayerEntry>,
    pub params_file: String,
    pub ema_file: String,
    /// Free-form extras such as the bridge schedule.
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn layout(config: &DenoiserConfig) -> Vec<LayerEntry> {
    config
        .layer_shapes()
        .iter()
        .enumerate()
        .flat_map(|(k, &(i, o))| {
            [
                LayerEntry { name: format!("w{k}"), shape: vec![i, o] },
                LayerEntry { name: format!("b{k}"), shape: vec![o] },
            ]
        })
        .collect()
}

fn write_blob(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Load(format!(
            "{}: expected {} bytes for {expected} parameters, found {}",
            path.display(),
            expected * 8,
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Write `model` into directory `dir` (created if missing).
pub fn save_checkpoint(
    dir: &Path,
    model: &TrainedModel,
    train: Option<&TrainConfig>,
    extra: serde_json::Value,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let config = model.raw.config().clone();
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA,
        param_count: config.param_count(),
        layout: layout(&config),
        architecture: config,
        train: train.cloned(),
        steps: model.steps,
        params_file: RAW_FILE.into(),
        ema_file: EMA_FILE.into(),
        extra,
    };
    write_blob(&dir.join(RAW_FILE), model.raw.params())?;
    write_blob(&dir.join(EMA_FILE), model.ema.params())?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load `(raw, ema, manifest)` from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(Mlp, Mlp, Manifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Load(format!(
            "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA})",
            manifest.schema_version
        )));
    }
    let config = manifest.architecture.clone();
    if manifest.param_count != config.param_count() || manifest.layout != layout(&config) {
        return Err(Error::Load("checkpoint layout does not match its architecture".into()));
    }
    let raw = read_blob(&dir.join(&manifest.params_file), manifest.param_count)?;
    let ema = read_blob(&dir.join(&manifest.ema_file), manifest.param_count)?;
    Ok((Mlp::from_params(config.clone(), raw)?, Mlp::from_params(config, ema)?, manifest))
}
