//! Single-file checkpoints: safetensors tensors plus JSON metadata.
//!
//! Training checkpoints hold every model variable (including batch-norm
//! running statistics) and the optimizer state under `optim.`. Inference
//! checkpoints hold only the `full.` stream.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{InferenceModel, ParamStore, PpgNetCat, StreamConfig};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub stream_config: StreamConfig,
    /// Entity label vocabulary, index = class id.
    pub labels: Vec<String>,
    pub trainer_state: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes tensors and metadata atomically (temporary file, then rename).
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    let mut info = HashMap::new();
    info.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    info.insert(
        "kind".to_string(),
        serde_json::to_value(meta.kind)?.as_str().unwrap_or_default().to_string(),
    );
    info.insert("stream_config".to_string(), serde_json::to_string(&meta.stream_config)?);
    info.insert("labels".to_string(), serde_json::to_string(&meta.labels)?);
    if let Some(state) = &meta.trainer_state {
        info.insert("trainer_state".to_string(), state.to_string());
    }
    let data = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.to_dtype(DType::F32)?.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(data, &Some(info), &tmp).map_err(|e| ckpt_err(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_meta(path: &Path, info: &HashMap<String, String>) -> Result<CheckpointMeta> {
    let field = |k: &str| info.get(k).ok_or_else(|| ckpt_err(path, format!("metadata lacks `{k}`")));
    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| ckpt_err(path, "unreadable format_version"))?;
    if version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let kind = serde_json::from_value(serde_json::Value::String(field("kind")?.clone()))
        .map_err(|_| ckpt_err(path, "unknown checkpoint kind"))?;
    let stream_config = serde_json::from_str(field("stream_config")?)
        .map_err(|e| ckpt_err(path, format!("bad stream_config: {e}")))?;
    let labels = serde_json::from_str(field("labels")?)
        .map_err(|e| ckpt_err(path, format!("bad labels: {e}")))?;
    let trainer_state = match info.get("trainer_state") {
        Some(s) => Some(serde_json::from_str(s).map_err(|e| ckpt_err(path, format!("bad trainer_state: {e}")))?),
        None => None,
    };
    Ok(CheckpointMeta {
        kind,
        stream_config,
        labels,
        trainer_state,
    })
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "no metadata; not a checkpoint written by this tool"))?;
    let meta = parse_meta(path, &info)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = view.load(device)?.to_dtype(DType::F32)?;
        tensors.insert(name, t);
    }
    Ok(Checkpoint { meta, tensors })
}

/// Model variables (no optimizer state) loaded into a fresh store.
pub fn store_from(tensors: &BTreeMap<String, Tensor>) -> Result<ParamStore> {
    let store = ParamStore::new(0);
    for (name, t) in tensors.iter().filter(|(n, _)| !n.starts_with(OPTIM_PREFIX)) {
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Fails if building the model created variables the checkpoint lacked.
fn check_complete(path: &Path, before: usize, store: &ParamStore, loaded: &BTreeMap<String, Tensor>) -> Result<()> {
    if store.len() == before {
        return Ok(());
    }
    let missing: Vec<String> = store
        .names()
        .into_iter()
        .filter(|n| !loaded.contains_key(n))
        .take(5)
        .collect();
    Err(ckpt_err(path, format!("missing parameters, e.g. {}", missing.join(", "))))
}

pub fn save_training(
    path: &Path,
    model: &PpgNetCat,
    optimizer: &BTreeMap<String, Tensor>,
    labels: &[String],
    trainer_state: serde_json::Value,
) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = model
        .store()
        .vars()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    for (n, t) in optimizer {
        tensors.insert(format!("{OPTIM_PREFIX}{n}"), t.clone());
    }
    save(
        path,
        &tensors,
        &CheckpointMeta {
            kind: CheckpointKind::Training,
            stream_config: model.config().clone(),
            labels: labels.to_vec(),
            trainer_state: Some(trainer_state),
        },
    )
}

/// Stores only the full stream.
pub fn save_inference(path: &Path, model: &InferenceModel, labels: &[String]) -> Result<()> {
    let tensors = model
        .store()
        .vars()
        .into_iter()
        .filter(|(n, _)| n.starts_with("full."))
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    save(
        path,
        &tensors,
        &CheckpointMeta {
            kind: CheckpointKind::Inference,
            stream_config: model.config().clone(),
            labels: labels.to_vec(),
            trainer_state: None,
        },
    )
}

pub struct LoadedTraining {
    pub model: PpgNetCat,
    pub optimizer: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

pub fn load_training(path: &Path, device: &Device) -> Result<LoadedTraining> {
    let ckpt = load(path, device)?;
    if ckpt.meta.kind != CheckpointKind::Training {
        return Err(ckpt_err(path, "inference checkpoints cannot resume training"));
    }
    let store = store_from(&ckpt.tensors)?;
    let before = store.len();
    let model = PpgNetCat::from_store(ckpt.meta.stream_config.clone(), store, device)?;
    check_complete(path, before, model.store(), &ckpt.tensors)?;
    let optimizer = ckpt
        .tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(OPTIM_PREFIX).map(|s| (s.to_string(), t.clone())))
        .collect();
    Ok(LoadedTraining {
        model,
        optimizer,
        meta: ckpt.meta,
    })
}

/// Loads the full stream from either checkpoint kind.
pub fn load_inference(path: &Path, device: &Device) -> Result<(InferenceModel, CheckpointMeta)> {
    let ckpt = load(path, device)?;
    let full: BTreeMap<String, Tensor> = ckpt
        .tensors
        .into_iter()
        .filter(|(n, _)| n.starts_with("full."))
        .collect();
    let store = store_from(&full)?;
    let before = store.len();
    let model = InferenceModel::from_store(ckpt.meta.stream_config.clone(), store, device)?;
    check_complete(path, before, model.store(), &full)?;
    Ok((model, ckpt.meta))
}

/// Loads backbone weights from a plain safetensors file (names like
/// `conv1.weight`, `layer1.0.bn1.running_mean`) under `prefix`. Extra
/// tensors such as `fc.*` are ignored; missing or misshaped ones are errors.
pub fn load_backbone_weights(
    store: &ParamStore,
    path: &Path,
    prefix: &str,
    spec: super::BackboneSpec,
    device: &Device,
) -> Result<usize> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    // instantiate once to learn the expected names and shapes
    let probe = ParamStore::new(0);
    super::ResNet::new(spec, probe.var_builder(device))?;
    let mut loaded = 0;
    for (name, var) in probe.vars() {
        let view = st
            .tensor(&name)
            .map_err(|_| ckpt_err(path, format!("pretrained weights lack `{name}`")))?;
        let t = view.load(device)?.to_dtype(DType::F32)?;
        if t.dims() != var.dims() {
            return Err(ckpt_err(
                path,
                format!("`{name}` has shape {:?}, expected {:?}", t.dims(), var.dims()),
            ));
        }
        store.insert(&format!("{prefix}.{name}"), &t)?;
        loaded += 1;
    }
    Ok(loaded)
}
