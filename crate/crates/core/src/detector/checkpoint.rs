use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DetectorConfig;
use crate::autograd::ParamStore;
use crate::dataset::{ClassInfo, Phase};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::saan::Fusion;

/// Metadata sidecar written next to every weight archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    /// Foreground classes in predict-head order.
    pub classes: Vec<ClassInfo>,
    pub novel: Vec<u32>,
    pub d: usize,
    pub fusion: Fusion,
    pub detector: DetectorConfig,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    /// The backbone was trained from random initialisation.
    pub from_scratch: bool,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut name = weights.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    weights.with_file_name(name)
}

/// Writes `path` (weights) and `path.json` (metadata), each atomically.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut bytes = Vec::new();
    store.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &bytes)?;
    let mut json = serde_json::to_vec_pretty(meta)?;
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, CheckpointMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let store = ParamStore::read_from(std::io::BufReader::new(file))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let rows = store
        .id("predict.cls.weight")
        .map(|id| store.value(id).shape()[0])
        .ok_or_else(|| Error::Checkpoint(format!("{}: no predict head", path.display())))?;
    if rows != meta.classes.len() + 1 {
        return Err(Error::Checkpoint(format!(
            "{}: metadata lists {} classes but the predict head has {} rows",
            path.display(),
            meta.classes.len(),
            rows
        )));
    }
    Ok((store, meta))
}
