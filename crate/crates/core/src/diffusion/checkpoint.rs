//! Self-describing denoiser checkpoints stored as safetensors.

use std::collections::HashMap;
use std::path::Path;

use mdps_nn::{ParamStore, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{Architecture, NetDenoiser, TrainConfig};
use crate::schedule::ScheduleParams;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "mdps-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained denoiser and its schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: NetDenoiser,
    pub schedule: ScheduleParams,
    pub train_config: TrainConfig,
    /// Dataset category the weights were trained on.
    pub category: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params = ckpt.model.params();
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = params
        .iter()
        .map(|(_, name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), raw, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F32, shape.clone(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| bad(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("architecture".to_string(), serde_json::to_string(ckpt.model.architecture())?),
        ("schedule".to_string(), serde_json::to_string(&ckpt.schedule)?),
        ("train_config".to_string(), serde_json::to_string(&ckpt.train_config)?),
        ("category".to_string(), ckpt.category.clone()),
    ]);
    let buf = safetensors::serialize(views, Some(metadata)).map_err(|e| bad(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("missing metadata header"))?;
    let field = |key: &str| {
        meta.get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("missing metadata field `{key}`")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(bad(format!("not an {CHECKPOINT_FORMAT} file")));
    }
    let version: u32 = field("version")?
        .parse()
        .map_err(|_| bad("unreadable version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let arch: Architecture = serde_json::from_str(field("architecture")?)?;
    let schedule: ScheduleParams = serde_json::from_str(field("schedule")?)?;
    let train_config: TrainConfig = serde_json::from_str(field("train_config")?)?;
    let category = field("category")?.to_string();

    let tensors = SafeTensors::deserialize(&buf).map_err(|e| bad(e.to_string()))?;
    let mut names: Vec<&str> = tensors.names();
    names.sort_unstable();
    let mut params = ParamStore::new();
    for name in names {
        let view = tensors.tensor(name).map_err(|e| bad(e.to_string()))?;
        if view.dtype() != Dtype::F32 || view.shape().len() != 4 {
            return Err(bad(format!("tensor `{name}` is not a rank-4 f32 tensor")));
        }
        let shape = [view.shape()[0], view.shape()[1], view.shape()[2], view.shape()[3]];
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(name, Tensor::from_vec(shape, data)?)?;
    }
    // Reorder to the architecture's canonical parameter order.
    let reference = NetDenoiser::new(arch.clone(), &mut crate::Rng::new(0))?;
    let mut ordered = ParamStore::new();
    for (_, name, _) in reference.params().iter() {
        let id = params
            .id(name)
            .map_err(|_| bad(format!("missing tensor `{name}`")))?;
        ordered.insert(name, params.get(id).clone())?;
    }
    if ordered.len() != params.len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, architecture expects {}",
            params.len(),
            ordered.len()
        )));
    }
    Ok(Checkpoint {
        model: NetDenoiser::from_params(arch, ordered)?,
        schedule,
        train_config,
        category,
    })
}
