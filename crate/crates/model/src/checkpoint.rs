//! Safetensors checkpoints with a JSON config sidecar.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::network::AdapterModel;

/// Contents of the `.json` file written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub backbone_hash: String,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn save_tensors(tensors: HashMap<String, Tensor>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    candle_core::safetensors::save(&tensors, path)?;
    Ok(())
}

/// Writes every tensor of `model` to `path` and its config to the sidecar.
pub fn save_checkpoint(model: &AdapterModel, path: &Path) -> Result<()> {
    let mut tensors: HashMap<String, Tensor> = model
        .backbone_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    for (n, v) in model.trainable_named() {
        tensors.insert(n.clone(), v.as_tensor().detach());
    }
    save_tensors(tensors, path)?;
    let meta = CheckpointMeta {
        config: model.config().clone(),
        backbone_hash: model.backbone_hash()?,
    };
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)?).map_err(|source| ModelError::Io { path: sidecar, source })
}

/// Writes only the backbone tensors, in the layout accepted by
/// [`load_pretrained_backbone`].
pub fn save_backbone(model: &AdapterModel, path: &Path) -> Result<()> {
    save_tensors(
        model
            .backbone_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect(),
        path,
    )
}

fn read_tensors(path: &Path, model: &AdapterModel) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(ModelError::load(path, "file does not exist"));
    }
    candle_core::safetensors::load(path, model.device()).map_err(|e| ModelError::load(path, e.to_string()))
}

/// Checks `found` against the names and shapes of `expected`; the error lists
/// every offending tensor.
fn match_tensors(
    path: &Path,
    expected: &BTreeMap<String, Vec<usize>>,
    found: &HashMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut problems = Vec::new();
    let mut out = BTreeMap::new();
    for (name, shape) in expected {
        match found.get(name) {
            None => problems.push(format!("{name}: missing")),
            Some(t) if t.dims() != shape.as_slice() => {
                problems.push(format!("{name}: expected {shape:?}, found {:?}", t.dims()))
            }
            Some(t) => {
                out.insert(name.clone(), t.to_dtype(candle_core::DType::F32)?);
            }
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(ModelError::load(
            path,
            format!("tensor mismatch: {}", problems.join("; ")),
        ))
    }
}

/// Replaces the backbone of `model` with the `backbone.*` tensors in `path`.
/// Adapters and decoder are left as they are.
pub fn load_pretrained_backbone(model: &mut AdapterModel, path: &Path) -> Result<()> {
    let found = read_tensors(path, model)?;
    let expected: BTreeMap<String, Vec<usize>> = model
        .backbone_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.dims().to_vec()))
        .collect();
    let tensors = match_tensors(path, &expected, &found)?;
    model.replace_backbone(tensors);
    Ok(())
}

/// Rebuilds a model from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<AdapterModel> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| ModelError::load(&sidecar, e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| ModelError::load(&sidecar, e.to_string()))?;
    let mut model = AdapterModel::build(meta.config)?;
    let found = read_tensors(path, &model)?;
    let expected: BTreeMap<String, Vec<usize>> =
        model.parameter_table().into_iter().map(|p| (p.name, p.shape)).collect();
    let mut tensors = match_tensors(path, &expected, &found)?;
    for (n, v) in model.trainable_named() {
        v.set(&tensors.remove(n).expect("matched above"))?;
    }
    let backbone: BTreeMap<String, Tensor> = tensors
        .into_iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .collect();
    model.replace_backbone(backbone);
    let hash = model.backbone_hash()?;
    if hash != meta.backbone_hash {
        return Err(ModelError::load(path, "backbone hash does not match the sidecar"));
    }
    Ok(model)
}
